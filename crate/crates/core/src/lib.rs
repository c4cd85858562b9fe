//! Shape representation by principal components of signed distance grids.
//!
//! A watertight [`mesh::TriangleMesh`] is sampled into an [`sdfgrid::SdfGrid`]
//! (positive inside), a set of grids is compressed into an
//! [`pca::EigenBasis`] by incremental PCA, and shapes travel through the
//! linear latent space as [`pca::LatentCode`]s. The decoder can be refined
//! with the level-set loss in [`sdfloss`], and latent codes can be predicted
//! from point clouds or depth rasters by the small networks in [`encoders`].
//! [`surface`] and [`metrics`] close the loop for evaluation.

pub mod bvh;
pub mod encoders;
pub mod error;
pub mod finetune;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod pca;
pub mod sdfgrid;
pub mod sdfloss;
pub mod spatial;
pub mod surface;

pub use error::{Error, Result};

/// World-space vector type used throughout the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
