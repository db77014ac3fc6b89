use super::network::{Network, ParameterGradients};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `buf = m * buf + g; p -= lr * buf`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    buffers: ParameterGradients,
}

impl SgdMomentum {
    pub fn new(net: &Network, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            buffers: ParameterGradients::zeros_like(net),
        })
    }

    pub fn buffers(&self) -> &ParameterGradients {
        &self.buffers
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParameterGradients) -> Result<()> {
        if grads.layers.len() != self.buffers.layers.len() {
            return Err(Error::shape("gradient layer count does not match the network"));
        }
        for ((layer, grad), buf) in net
            .conv_layers_mut()
            .zip(&grads.layers)
            .zip(&mut self.buffers.layers)
        {
            sgd_momentum_step(&mut layer.weights, &grad.weights, &mut buf.weights, self.lr, self.momentum)?;
            sgd_momentum_step(&mut layer.bias, &grad.bias, &mut buf.bias, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

/// One momentum step over a flat tensor and its buffer.
pub fn sgd_momentum_step(params: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grad.len() || grad.len() != buf.len() {
        return Err(Error::shape("gradient tensor does not match parameter tensor"));
    }
    for ((p, g), b) in params.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    Ok(())
}
