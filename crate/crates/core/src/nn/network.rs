use super::conv::{ConvGrad, ConvLayer};
use super::signal::ChannelSignal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    LeakyRelu(f64),
    /// Keeps the centered `n` positions of the signal.
    CenterTrim(usize),
    /// Appends the auxiliary input as extra channels.
    ConcatAux,
    /// Averages over positions, leaving length 1.
    GlobalAvgPool,
}

/// A feed-forward chain of layers over [`ChannelSignal`]s.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Per-conv-layer gradients, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub layers: Vec<ConvGrad>,
}

impl ParameterGradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.conv_layers().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParameterGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.layers.iter_mut().for_each(|g| g.scale(factor));
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers.iter().map(ConvGrad::len).sum());
        for g in &self.layers {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn unflatten_like(net: &Network, flat: &[f64]) -> Result<Self> {
        let mut grads = Self::zeros_like(net);
        if flat.len() != net.param_count() {
            return Err(Error::shape(format!(
                "flat gradient has {} values, network has {} parameters",
                flat.len(),
                net.param_count()
            )));
        }
        let mut offset = 0;
        for g in &mut grads.layers {
            let w = g.weights.len();
            g.weights.copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            let b = g.bias.len();
            g.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        Ok(grads)
    }
}

/// Activations recorded by [`Network::forward_traced`]; `inputs[i]` feeds layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<ChannelSignal>,
    pub aux_channels: usize,
    pub output: ChannelSignal,
}

/// Scalar objectives that [`backprop`] can seed.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// `weight * ||y - target||^2` over the flattened output.
    SquaredError { target: &'a [f64], weight: f64 },
    /// Softmax cross-entropy of a `classes x 1` output against `label`.
    SoftmaxCrossEntropy { label: usize },
}

impl LossSpec<'_> {
    pub fn evaluate(&self, y: &ChannelSignal) -> Result<(f64, ChannelSignal)> {
        match *self {
            LossSpec::SquaredError { target, weight } => {
                if target.len() != y.data().len() {
                    return Err(Error::shape(format!(
                        "target has {} values, output has {}",
                        target.len(),
                        y.data().len()
                    )));
                }
                let mut loss = 0.0;
                let grad = y
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let d = a - b;
                        loss += d * d;
                        2.0 * weight * d
                    })
                    .collect();
                Ok((weight * loss, ChannelSignal::new(y.channels(), y.length(), grad)?))
            }
            LossSpec::SoftmaxCrossEntropy { label } => {
                let logits = y.data();
                if label >= logits.len() {
                    return Err(Error::shape(format!(
                        "label {label} out of range for {} logits",
                        logits.len()
                    )));
                }
                let probs = softmax(logits);
                let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
                let mut grad = probs;
                grad[label] -= 1.0;
                Ok((loss, ChannelSignal::new(y.channels(), y.length(), grad)?))
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

pub fn leaky_relu(x: &ChannelSignal, slope: f64) -> ChannelSignal {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    ChannelSignal::new(x.channels(), x.length(), data).expect("same shape")
}

fn leaky_relu_backward(x: &ChannelSignal, dy: &ChannelSignal, slope: f64) -> ChannelSignal {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect();
    ChannelSignal::new(x.channels(), x.length(), data).expect("same shape")
}

fn center_trim(x: &ChannelSignal, n: usize) -> Result<ChannelSignal> {
    if x.length() < n {
        return Err(Error::shape(format!(
            "cannot trim length {} to {n}",
            x.length()
        )));
    }
    let start = (x.length() - n) / 2;
    let mut data = Vec::with_capacity(x.channels() * n);
    for c in 0..x.channels() {
        data.extend_from_slice(&x.channel(c)[start..start + n]);
    }
    ChannelSignal::new(x.channels(), n, data)
}

fn center_trim_backward(x: &ChannelSignal, dy: &ChannelSignal) -> ChannelSignal {
    let n = dy.length();
    let start = (x.length() - n) / 2;
    let mut dx = ChannelSignal::zeros(x.channels(), x.length());
    for c in 0..x.channels() {
        dx.channel_mut(c)[start..start + n].copy_from_slice(dy.channel(c));
    }
    dx
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().map(ConvLayer::param_count).sum()
    }

    /// Parameter counts per conv layer, weights and bias together.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.conv_layers().map(ConvLayer::param_count).collect()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in self.conv_layers() {
            out.extend_from_slice(&c.weights);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "flat parameters have {} values, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for c in self.conv_layers_mut() {
            let w = c.weights.len();
            c.weights.copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            let b = c.bias.len();
            c.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    pub fn forward(&self, input: &ChannelSignal, aux: Option<&ChannelSignal>) -> Result<ChannelSignal> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = apply(layer, &x, aux).map_err(|e| e.at_layer(i))?;
        }
        Ok(x)
    }

    /// Forward pass that also appends every leaky-ReLU input to `kinks`.
    pub fn forward_recording(
        &self,
        input: &ChannelSignal,
        aux: Option<&ChannelSignal>,
        kinks: &mut Vec<f64>,
    ) -> Result<ChannelSignal> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::LeakyRelu(_) = layer {
                kinks.extend_from_slice(x.data());
            }
            x = apply(layer, &x, aux).map_err(|e| e.at_layer(i))?;
        }
        Ok(x)
    }

    pub fn forward_traced(&self, input: &ChannelSignal, aux: Option<&ChannelSignal>) -> Result<Trace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = apply(layer, &x, aux).map_err(|e| e.at_layer(i))?;
            inputs.push(std::mem::replace(&mut x, y));
        }
        Ok(Trace {
            inputs,
            aux_channels: aux.map_or(0, ChannelSignal::channels),
            output: x,
        })
    }

    /// Backpropagates `dy` through a recorded trace. Returns parameter gradients,
    /// the input gradient, and the auxiliary-input gradient when one was used.
    pub fn backward(
        &self,
        trace: &Trace,
        dy: &ChannelSignal,
    ) -> Result<(ParameterGradients, ChannelSignal, Option<ChannelSignal>)> {
        let mut conv_grads = Vec::new();
        let mut aux_grad = None;
        let mut g = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            g = match layer {
                Layer::Conv(c) => {
                    let (pg, dx) = c.backward(x, &g).map_err(|e| e.at_layer(i))?;
                    conv_grads.push(pg);
                    dx
                }
                Layer::LeakyRelu(slope) => leaky_relu_backward(x, &g, *slope),
                Layer::CenterTrim(_) => center_trim_backward(x, &g),
                Layer::ConcatAux => {
                    let (dx, da) = g.split_channels(trace.aux_channels);
                    aux_grad = Some(da);
                    dx
                }
                Layer::GlobalAvgPool => {
                    let l = x.length();
                    let mut dx = ChannelSignal::zeros(x.channels(), l);
                    for c in 0..x.channels() {
                        let v = g.channel(c)[0] / l as f64;
                        dx.channel_mut(c).iter_mut().for_each(|d| *d = v);
                    }
                    dx
                }
            };
        }
        conv_grads.reverse();
        Ok((ParameterGradients { layers: conv_grads }, g, aux_grad))
    }
}

fn apply(layer: &Layer, x: &ChannelSignal, aux: Option<&ChannelSignal>) -> Result<ChannelSignal> {
    match layer {
        Layer::Conv(c) => c.forward(x),
        Layer::LeakyRelu(slope) => Ok(leaky_relu(x, *slope)),
        Layer::CenterTrim(n) => center_trim(x, *n),
        Layer::ConcatAux => {
            let aux = aux.ok_or_else(|| Error::shape("concat layer needs an auxiliary input"))?;
            x.concat_channels(aux)
        }
        Layer::GlobalAvgPool => {
            let l = x.length() as f64;
            let data = (0..x.channels())
                .map(|c| x.channel(c).iter().sum::<f64>() / l)
                .collect();
            ChannelSignal::new(x.channels(), 1, data)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub grads: ParameterGradients,
    pub input_grad: ChannelSignal,
    pub aux_grad: Option<ChannelSignal>,
}

/// Loss plus exact gradients w.r.t. every parameter and the input(s).
pub fn backprop(
    net: &Network,
    input: &ChannelSignal,
    aux: Option<&ChannelSignal>,
    loss: &LossSpec<'_>,
) -> Result<Backprop> {
    let trace = net.forward_traced(input, aux)?;
    let (value, dy) = loss.evaluate(&trace.output)?;
    let (grads, input_grad, aux_grad) = net.backward(&trace, &dy)?;
    Ok(Backprop {
        loss: value,
        grads,
        input_grad,
        aux_grad,
    })
}
