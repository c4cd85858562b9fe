//! Procedural dataset directories: meshes, the shape manifest and cached grids.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eigensdf::bvh::Aabb;
use eigensdf::mesh::{generate_shape, load_mesh, MeshFormat, ShapeFamily, ShapeSpec, TriangleMesh};
use eigensdf::sdfgrid::{compute_sdf, SdfGrid};
use serde::{Deserialize, Serialize};

use crate::exit::config_error;
use crate::manifest::{json_text, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub families: Vec<ShapeFamily>,
    pub per_family: usize,
    pub seed: u64,
    /// Fraction of each family assigned to the training split.
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            families: vec![
                ShapeFamily::Ellipsoid,
                ShapeFamily::Box,
                ShapeFamily::Capsule,
            ],
            per_family: 80,
            seed: 0,
            train_fraction: 0.9,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.per_family == 0 {
            return Err(config_error("the dataset must contain at least one shape"));
        }
        let mut seen = self.families.clone();
        seen.sort_by_key(|f| f.name());
        seen.dedup();
        if seen.len() != self.families.len() {
            return Err(config_error("families are listed more than once"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(config_error(format!(
                "train_fraction must lie in [0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        ((self.per_family as f64) * self.train_fraction + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub family: ShapeFamily,
    pub params: Vec<f64>,
    pub seed: u64,
    /// Mesh path relative to the dataset root.
    pub file: String,
    pub split: Split,
}

impl Entry {
    /// Seed of the evaluation and encoder-input samplers for this shape.
    pub fn sample_seed(&self) -> u64 {
        splitmix(self.seed ^ 0x5a17_e5ee_d000_0001)
    }
}

pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Shape specs and split assignment for a config, without touching disk.
pub fn plan(cfg: &DatasetConfig) -> Result<Vec<(Entry, ShapeSpec)>> {
    cfg.validate()?;
    let n_train = cfg.train_count();
    let mut out = Vec::new();
    for (fi, &family) in cfg.families.iter().enumerate() {
        let seeds: Vec<u64> = (0..cfg.per_family)
            .map(|i| splitmix(cfg.seed ^ splitmix(((fi as u64) << 32) | i as u64)))
            .collect();
        let mut rank: Vec<usize> = (0..cfg.per_family).collect();
        rank.sort_by_key(|&i| (splitmix(seeds[i] ^ 0x7e57), i));
        let mut split = vec![Split::Test; cfg.per_family];
        for &i in rank.iter().take(n_train) {
            split[i] = Split::Train;
        }
        for (i, &seed) in seeds.iter().enumerate() {
            let spec = ShapeSpec::random(family, seed);
            let id = format!("{}-{i:03}", family.name());
            out.push((
                Entry {
                    file: format!("meshes/{id}.obj"),
                    id,
                    family,
                    params: spec.params.clone(),
                    seed,
                    split: split[i],
                },
                spec,
            ));
        }
    }
    Ok(out)
}

/// Writes meshes and the shape manifest; returns the entries.
pub fn generate(cfg: &DatasetConfig, root: &Path) -> Result<Vec<Entry>> {
    let planned = plan(cfg)?;
    fs::create_dir_all(root.join("meshes"))
        .with_context(|| format!("creating {}", root.display()))?;
    let mut entries = Vec::with_capacity(planned.len());
    for (entry, spec) in planned {
        let mesh = generate_shape(&spec)
            .with_context(|| format!("generating {}", entry.id))?
            .normalized();
        write_atomic(&root.join(&entry.file), mesh.to_obj_string().as_bytes())?;
        entries.push(entry);
    }
    write_atomic(&root.join(MANIFEST_FILE), json_text(&entries)?.as_bytes())?;
    Ok(entries)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let entries: Vec<Entry> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if entries.is_empty() {
            anyhow::bail!(eigensdf::Error::Invalid(format!(
                "{} lists no shapes",
                path.display()
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn split(&self, split: Split) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn mesh(&self, entry: &Entry) -> Result<TriangleMesh> {
        let path = self.root.join(&entry.file);
        let format = MeshFormat::from_path(&path).unwrap_or(MeshFormat::Obj);
        load_mesh(&path, format).with_context(|| format!("loading {}", path.display()))
    }

    pub fn grid_path(&self, entry: &Entry, m: usize) -> PathBuf {
        self.root
            .join(format!("sdf-{m}"))
            .join(format!("{}.esdf", entry.id))
    }

    /// Ground-truth grid at resolution `m`, computed once and cached
    /// beside the meshes. Values are rounded to `f32` either way, so cached
    /// and fresh grids agree exactly.
    pub fn grid(&self, entry: &Entry, m: usize) -> Result<SdfGrid> {
        let path = self.grid_path(entry, m);
        if path.exists() {
            let g = SdfGrid::read(&path)?;
            if g.resolution() == m {
                return Ok(g);
            }
        }
        let mesh = self.mesh(entry)?;
        let grid = compute_sdf(&mesh, m, &Aabb::cube(0.5))
            .with_context(|| format!("computing the SDF of {}", entry.id))?
            .quantized();
        write_atomic(&path, &grid.to_bytes())?;
        Ok(grid)
    }
}
