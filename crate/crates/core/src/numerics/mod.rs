//! Dense linear algebra, a reverse-mode tape, and the optimizer every model
//! in the crate trains with. Everything is `f64`.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradCheckReport, Probe};
pub use optim::AdamW;
pub use params::{Gradients, Param, ParamStore};
pub use tape::{Mask, Tape, Var};
pub use tensor::{
    bce_loss, ce_from_logits, clamp_prob, dot, layer_norm, matmul, matmul_nt, matmul_tn, relu,
    sigmoid, sigmoid_scalar, softmax_rows, Tensor2D, LN_EPS, PROB_EPS,
};
