//! Block-sparse attention with online filtering and per-block 8-bit
//! quantization.
//!
//! The engine computes softmax attention tile by tile, the way a fused GPU
//! kernel would, and skips work at two points of the pipeline:
//!
//! 1. before any score is computed, a predicted block mask drops whole
//!    query-block x key-block tiles whose contribution to the softmax is
//!    negligible, and
//! 2. inside the online-softmax loop, warp groups whose freshly computed
//!    scores sit far below the running row maximum skip their PV product.
//!
//! Both filters are controlled by a small set of hyperparameters (`tau`,
//! `theta`, `lambda`) that [`tuner`] searches per layer against a dense
//! reference, so the skipping stays inside a caller-chosen error budget.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, disk format, synthetic inputs
//! - [`blocks`]: block layout arithmetic and per-block INT8 quantization
//! - [`mask`]: compressed score map and block mask prediction
//! - [`engine`]: the tiled attention loop, dense reference, skip accounting
//! - [`permute`]: token permutations (including a Hilbert curve) that raise
//!   block self-similarity for multi-dimensional token grids
//! - [`tuner`]: two-stage hyperparameter search under an error budget
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`];
//! `f32` is the working precision and `f64` backs the reference oracle.

pub mod blocks;
pub mod engine;
pub mod error;
pub mod mask;
pub mod permute;
pub mod scalar;
pub mod tensor;
pub mod tuner;

pub use error::{Result, SpargeError};
pub use scalar::Scalar;
pub use tensor::{DenseTensor, GridDims};

/// Working-precision tensor used by the engine and the CLI.
pub type Tensor = DenseTensor<f32>;

/// Double-precision tensor produced by the dense reference oracle.
pub type Tensor64 = DenseTensor<f64>;
