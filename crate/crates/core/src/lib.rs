//! Fixed-budget Gaussian splatting, optimal-transport voxel structuring,
//! cross-modal alignment losses and a toy conditioned diffusion model over
//! voxelised Gaussians.

// Range checks are written negated so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod camera;
pub mod diffusion;
pub mod edc;
pub mod error;
pub mod exec;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod optim;
pub mod gaussian;
pub mod raster;
pub mod scene;
pub mod view;
pub mod voxel;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{Features14, Gaussian, GaussianCloud};
