//! High-dimensional sparse convolutional networks for finding geometric
//! patterns (lines, planes, rigid-motion and epipolar correspondence sets)
//! in noisy point data.
//!
//! Layout:
//!
//! - [`coords`]: quantization, the coordinate hash map, [`SparseTensor`]
//! - [`kernel`]: kernel regions, kernel maps, pooling maps
//! - [`layers`]: forward/backward rules of the sparse layers
//! - [`autodiff`]: reverse-mode tape, losses, optimizers
//! - [`models`]: the U-shaped ConvNet and the pointwise MLP baseline
//! - [`geom`]: synthetic datasets, geometric labeling, fitting, registration
//! - [`metrics`]: F1 / AP and registration metrics
//! - [`checkpoint`]: named-tensor files for model weights
//! - [`gradcheck`]: finite-difference checks of layers and networks
//! - [`cli`]: configuration, pipelines, reports and the subcommands

pub mod autodiff;
pub mod checkpoint;
pub(crate) mod binio;
pub mod cli;
pub mod coords;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod kernel;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod rng;

pub use coords::{quantize, CoordinateMap, Quantized, SparseTensor};
pub use error::{Error, Result};
pub use kernel::{KernelMap, KernelRegion, KernelShape, PoolMap};
