//! Neural network substrate: tensors, a reverse-mode tape, kernels, the
//! trainable modules, and finite-difference gradient verification.

pub mod denoiser;
pub mod encoder;
pub mod gradcheck;
pub mod init;
pub(crate) mod kernels;
pub mod mlp;
pub mod params;
pub mod registry;
pub mod tape;
mod tensor;

pub use denoiser::Denoiser;
pub use encoder::Encoder;
pub use mlp::PointMlp;
pub use params::{GradMap, ParamLease, ParamSet};
pub use registry::{Modality, ModuleRegistry};
pub use tape::{Gradients, Tape, Value};
pub use tensor::Tensor;
