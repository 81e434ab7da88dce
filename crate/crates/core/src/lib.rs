//! Sparse-view CT reconstruction with a cloud of anisotropic Gaussians.
//!
//! The crate is `no_std` (it needs `alloc`). Enable the `parallel` feature to
//! run the projector and rasterizer kernels on a rayon pool; results are
//! value-identical to the serial build because every reduction is split into
//! chunks whose boundaries depend only on the problem size, and the chunk
//! partials are merged in index order.
//!
//! Module map:
//!
//! * [`grid`]: volumes, sinograms and parallel-beam geometry.
//! * [`projector`]: Radon forward projection, its exact transpose, ramp
//!   filtering and FBP.
//! * [`gaussian`]: the Gaussian cloud, confined rasterization and its VJP.
//! * [`objective`]: L1 / SSIM / TV composite loss and PSNR.
//! * [`optimizer`]: cloud initialization, Adam, and the reconstruction loop.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod fft;
pub mod gaussian;
pub mod grid;
pub mod objective;
pub mod optimizer;
pub mod projector;

mod math;
mod par;

pub use error::{CoreError, Result};
pub use gaussian::{GaussianCloud, NeighborhoodSpec, PrecisionSet};
pub use grid::{ProjectionGeometry, Sinogram, VolumeGrid};
pub use objective::{LossWeights, SsimConfig};
pub use optimizer::{ReconConfig, ReconError, ReconOutput};
