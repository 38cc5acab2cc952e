//! Minimal CPU autodiff used by the IRSTD diffusion models.
//!
//! Tensors are dense row-major arrays generic over [`Float`]; `f32` is used
//! for training and sampling, `f64` for finite-difference gradient checks.

mod float;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
mod params;
mod tensor;

pub use float::Float;
pub use graph::{BackwardFn, Gradients, Tape, Var};
pub use ops::conv::ConvGeometry;
pub use params::{Binding, Builder, Init, ParamId, ParamStore};
pub use tensor::{numel, Tensor};
