//! Compact anti-aliased attention-condenser networks for surface defect
//! inspection.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense NCHW kernels with hand-written backward passes.
//! - [`blocks`]: attention condensers, anti-aliased downsampling and the
//!   dual softmax head.
//! - [`graph`]: columnar architecture graphs, the shipped reference
//!   configuration, execution, checkpoints and complexity counting.
//! - [`train`]: cross-entropy with the paired head-discrepancy term and plain
//!   SGD.
//! - [`data`]: the synthetic plate generator, directory loader and split.
//! - [`bench`]: latency measurement and comparison tables.
//! - [`explore`]: constrained architecture search.

pub mod error;
pub mod tensor;
pub mod blocks;
pub mod graph;
pub mod data;
pub mod train;
pub mod bench;
pub mod explore;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Real, Tensor};
