//! Dense tensors, single-vector primitives, and a reverse-mode tape.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, DEFAULT_EPS};
pub use ops::{
    attention_context, cross_entropy, dropout_mask, embed_lookup, lstm_step, masked_log_softmax,
    softmax, uniform_fill, LstmParams, INIT_RANGE, PROB_FLOOR,
};
pub use tape::{Gradients, LstmVars, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::vecmat_acc;
