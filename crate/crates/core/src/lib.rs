//! Heterogeneous group super-resolution CNN built from first principles.
pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod ops;
pub mod tensor;
pub mod train;

pub use tensor::{Axis, ConvSpec, Dims, Real, Tensor4, TensorError};
