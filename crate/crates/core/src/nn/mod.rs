//! A small differentiable engine for multi-channel 1D signals.

mod conv;
mod gemm;
pub mod gradcheck;
mod network;
mod optim;
mod precise;
mod signal;

pub use conv::{conv1d_forward, deconv1d_forward, ConvGrad, ConvLayer};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, Coverage, PiecewiseReport};
pub use network::{backprop, leaky_relu, softmax, Backprop, Layer, LossSpec, Network, ParameterGradients, Trace};
pub use precise::{squared_error_precise, PreciseSignal};
pub use optim::{sgd_momentum_step, SgdMomentum};
pub use signal::ChannelSignal;

/// Default negative slope of every leaky-ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;
