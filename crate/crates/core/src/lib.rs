//! Channel selection for multichannel time series through learnable
//! channel-aggregation tokens (CATs) and per-head attention rollout.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the CLI and
//! multi-seed orchestration live in the companion `catsel` crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod chat;
pub mod classifier;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod prep;
pub mod rollout;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{BatchNormState, Gradients, Graph, Mode, Var};
pub use error::{Error, Result};
pub use gradcheck::{gradient_check, gradient_check_many};
pub use tensor::Tensor;
