//! Open-vocabulary 3D Gaussian feature fields on the CPU.
//!
//! The crate reconstructs a field of anisotropic 3D Gaussians — each carrying
//! color (spherical harmonics), opacity and a low-dimensional latent feature —
//! from posed RGB-D views with instance masks and per-instance embeddings.
//! A tile-based differentiable rasterizer renders color, latent features,
//! depth and normals; training distills the per-instance embeddings into the
//! latent features so the field can be queried with embedding vectors.
//! Query results feed grasp-proposal filtering (force closure) and localized
//! field updates after objects move.
//!
//! All numeric code is generic over [`Float`] (`f32` for production runs,
//! `f64` for gradient checks); concrete aliases live at the crate root.

pub mod camera;
pub mod efd;
pub mod error;
pub mod field;
pub mod float;
pub mod hull;
pub mod image;
pub mod io;
pub mod loss;
pub mod geometry;
pub mod grasp;
pub mod math;
pub mod query;
pub mod raster;
pub mod sh;
pub mod ssim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use float::Float;

/// Concrete production aliases (the CLI runs in `f32`; gradient checks
/// instantiate the same code with `f64`).
pub type FieldF32 = field::GaussianField<f32>;
pub type FieldF64 = field::GaussianField<f64>;
pub type ViewF32 = camera::CameraView<f32>;
pub type ViewF64 = camera::CameraView<f64>;
