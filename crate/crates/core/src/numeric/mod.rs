//! Dense tensors, a recorded-tape reverse-mode differentiator, perceptrons
//! and the AdamW optimizer.

pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use mlp::{Linear, Mlp};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{log_softmax, logsumexp, softmax, Activation, Axis, Grads, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
