//! Dense tensors, reverse-mode autodiff, Adam, and gradient checking.

mod adam;
pub(crate) mod attention;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use attention::Normalization;
pub use gradcheck::{check_param_gradients, grad_check};
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{concat_cols, linear_attention, phi, softmax_attention, Gradients, Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::{gemm, gemm_strided, Tensor};
