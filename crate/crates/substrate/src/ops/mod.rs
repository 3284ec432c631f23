//! Operator implementations.

mod activation;
mod basic;
mod conv;
pub(crate) mod linalg;
mod lstm;
mod norm;
mod pool;

pub use activation::{sigmoid, softplus, Act, Activation};
pub use basic::{
    log_softmax_row, Add, Dense, Flatten, Gather, LogSoftmax, Mean, Mul, Pick, Scale, SliceCols, Softmax, Sub, Sum,
};
pub use conv::{Conv2d, ConvTranspose2d};
pub use lstm::LstmCell;
pub use norm::{BatchNorm, InstanceNorm, NORM_EPS, RUNNING_MOMENTUM};
pub use pool::{pool_stride, pooled_len, AvgPool, MaxPool, Unpool};
