//! Gaussian-windowed attention operators for dense optical flow.

pub mod audit;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod flow;
pub mod gaussian;
pub mod gcl;
pub mod ggam;
pub mod gradcheck;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
