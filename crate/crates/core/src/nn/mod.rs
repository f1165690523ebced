//! Minimal double-precision neural-network kernels with explicit backward
//! passes: convolution, pooling, batch normalisation and dense layers.

pub mod conv;
pub mod dense;
pub(crate) mod gemm;
pub mod norm;
pub mod params;
pub mod pool;
pub mod tensor;

pub use conv::ConvShape;
pub use params::{Init, ParamEntry, ParamId, ParamStore};
pub use tensor::FeatureMap;
