use clap::Parser;
use eigensdf_cli::exit::{exit_code, CONFIG_ERROR};
use eigensdf_cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            std::process::exit(CONFIG_ERROR);
        }
        Err(e) => {
            let _ = e.print();
            return;
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
