//! A deliberately small CPU neural-network toolkit: dense tensors, a handful
//! of layers with explicit backward passes, Adam, and a binary parameter
//! format. Everything is generic over `f32`/`f64` so that gradients can be
//! checked in double precision and models trained in single precision.

pub mod blob;
pub mod layers;
pub mod optim;
pub mod param;
pub mod real;
pub mod tensor;

pub use blob::{BlobError, NamedArray};
pub use layers::{Conv2d, Linear};
pub use optim::Adam;
pub use param::{prefixed, Module, Param};
pub use real::{gemm, DType, Real};
pub use tensor::Tensor;
