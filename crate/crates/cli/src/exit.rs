//! Mapping of failures to process exit codes.

use thiserror::Error;

pub const SUCCESS: i32 = 0;
pub const CONFIG_ERROR: i32 = 2;
pub const DATA_ERROR: i32 = 3;
pub const NUMERIC_FAILURE: i32 = 4;

/// Invalid or inconsistent user configuration.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Exit code for an error chain: explicit configuration errors and
/// out-of-range parameters give 2, numeric failures 4, everything else 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some()
            || cause.downcast_ref::<toml::de::Error>().is_some()
            || cause.downcast_ref::<clap::Error>().is_some()
        {
            return CONFIG_ERROR;
        }
        if let Some(e) = cause.downcast_ref::<eigensdf::Error>() {
            return match e {
                e if e.is_numeric() => NUMERIC_FAILURE,
                eigensdf::Error::OutOfRange(_) => CONFIG_ERROR,
                _ => DATA_ERROR,
            };
        }
    }
    DATA_ERROR
}
