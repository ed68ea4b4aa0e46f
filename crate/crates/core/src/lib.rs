//! Attention-free diffusion toolkit: a small differentiable array engine,
//! S4D state-space layers, the gated bidirectional SSM hourglass block, DDPM
//! training and sampling, and analytic parameter/FLOP accounting.

pub mod autodiff;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod flops;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod sample;
pub mod selfcheck;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
