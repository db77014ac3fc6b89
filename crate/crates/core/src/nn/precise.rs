//! Double-double forward passes, written as direct loops rather than through
//! the im2col/GEMM kernels. Used as the numeric side of finite-difference
//! checks, where f64 rounding in the forward pass would swamp small gradients.

use twofloat::TwoFloat;

use super::conv::ConvLayer;
use super::network::{Layer, Network};
use super::signal::ChannelSignal;
use crate::error::{Error, Result};

/// A channel-major signal of double-double values.
#[derive(Debug, Clone)]
pub struct PreciseSignal {
    pub channels: usize,
    pub length: usize,
    pub data: Vec<TwoFloat>,
}

impl PreciseSignal {
    pub fn from_signal(x: &ChannelSignal) -> Self {
        Self {
            channels: x.channels(),
            length: x.length(),
            data: x.data().iter().map(|&v| TwoFloat::from(v)).collect(),
        }
    }

    fn zeros(channels: usize, length: usize) -> Self {
        Self {
            channels,
            length,
            data: vec![TwoFloat::from(0.0); channels * length],
        }
    }

    fn channel(&self, c: usize) -> &[TwoFloat] {
        &self.data[c * self.length..(c + 1) * self.length]
    }

    /// Rounds every value to f64.
    pub fn to_signal(&self) -> ChannelSignal {
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        ChannelSignal::new(self.channels, self.length, data).expect("consistent shape")
    }
}

fn conv_precise(layer: &ConvLayer, x: &PreciseSignal) -> Result<PreciseSignal> {
    if x.channels != layer.in_channels {
        return Err(Error::shape(format!(
            "expected {} input channels, got {}",
            layer.in_channels, x.channels
        )));
    }
    let l_out = layer.output_length(x.length)?;
    let (k, s, p) = (layer.kernel, layer.stride, layer.padding as isize);
    let mut y = PreciseSignal::zeros(layer.out_channels, l_out);
    for o in 0..layer.out_channels {
        let out = &mut y.data[o * l_out..(o + 1) * l_out];
        out.iter_mut().for_each(|v| *v = TwoFloat::from(layer.bias[o]));
        for i in 0..layer.in_channels {
            let xs = x.channel(i);
            let w = &layer.weights[(o * layer.in_channels + i) * k..][..k];
            if layer.transposed {
                for (t, &xv) in xs.iter().enumerate() {
                    for (j, &wv) in w.iter().enumerate() {
                        let pos = (t * s + j) as isize - p;
                        if pos >= 0 && (pos as usize) < l_out {
                            out[pos as usize] += xv * wv;
                        }
                    }
                }
            } else {
                for (t, acc) in out.iter_mut().enumerate() {
                    for (j, &wv) in w.iter().enumerate() {
                        let pos = (t * s + j) as isize - p;
                        if pos >= 0 && (pos as usize) < x.length {
                            *acc += xs[pos as usize] * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

fn apply_precise(layer: &Layer, x: PreciseSignal, aux: Option<&ChannelSignal>, kinks: &mut Vec<f64>) -> Result<PreciseSignal> {
    match layer {
        Layer::Conv(c) => conv_precise(c, &x),
        Layer::LeakyRelu(slope) => {
            kinks.extend(x.data.iter().map(|&v| f64::from(v)));
            let mut x = x;
            for v in &mut x.data {
                if *v < 0.0 {
                    *v = *v * *slope;
                }
            }
            Ok(x)
        }
        Layer::CenterTrim(n) => {
            if x.length < *n {
                return Err(Error::shape(format!("cannot trim length {} to {n}", x.length)));
            }
            let start = (x.length - n) / 2;
            let data = (0..x.channels)
                .flat_map(|c| x.channel(c)[start..start + n].to_vec())
                .collect();
            Ok(PreciseSignal {
                channels: x.channels,
                length: *n,
                data,
            })
        }
        Layer::ConcatAux => {
            let aux = aux.ok_or_else(|| Error::shape("concat layer needs an auxiliary input"))?;
            if aux.length() != x.length {
                return Err(Error::shape(format!(
                    "cannot concatenate length {} with length {}",
                    x.length,
                    aux.length()
                )));
            }
            let mut x = x;
            x.data.extend(aux.data().iter().map(|&v| TwoFloat::from(v)));
            x.channels += aux.channels();
            Ok(x)
        }
        Layer::GlobalAvgPool => {
            let l = x.length as f64;
            let data = (0..x.channels)
                .map(|c| x.channel(c).iter().fold(TwoFloat::from(0.0), |a, &b| a + b) / l)
                .collect();
            Ok(PreciseSignal {
                channels: x.channels,
                length: 1,
                data,
            })
        }
    }
}

impl Network {
    /// Double-double forward pass; appends every leaky-ReLU input (rounded to
    /// f64) to `kinks`.
    pub fn forward_precise(
        &self,
        input: &PreciseSignal,
        aux: Option<&ChannelSignal>,
        kinks: &mut Vec<f64>,
    ) -> Result<PreciseSignal> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = apply_precise(layer, x, aux, kinks).map_err(|e| e.at_layer(i))?;
        }
        Ok(x)
    }
}

/// `sum (y - t)^2` in double-double.
pub fn squared_error_precise(y: &PreciseSignal, target: &[f64]) -> Result<TwoFloat> {
    if y.data.len() != target.len() {
        return Err(Error::shape(format!(
            "target has {} values, output has {}",
            target.len(),
            y.data.len()
        )));
    }
    Ok(y.data.iter().zip(target).fold(TwoFloat::from(0.0), |acc, (&a, &b)| {
        let d = a - b;
        acc + d * d
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_gemm_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut a = ConvLayer::new(2, 5, 3, 2, 1, false).unwrap();
        let mut b = ConvLayer::new(5, 3, 3, 2, 1, true).unwrap().with_output_padding(1);
        let mut c = ConvLayer::new(4, 2, 1, 1, 0, false).unwrap();
        a.init_uniform(&mut rng);
        b.init_uniform(&mut rng);
        c.init_uniform(&mut rng);
        let net = Network::new(vec![
            Layer::Conv(a),
            Layer::LeakyRelu(0.01),
            Layer::Conv(b),
            Layer::LeakyRelu(0.01),
            Layer::CenterTrim(11),
            Layer::ConcatAux,
            Layer::Conv(c),
            Layer::GlobalAvgPool,
        ]);
        let x = ChannelSignal::new(2, 11, (0..22).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let aux = ChannelSignal::new(1, 11, (0..11).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fast = net.forward(&x, Some(&aux)).unwrap();
        let mut kinks = Vec::new();
        let precise = net
            .forward_precise(&PreciseSignal::from_signal(&x), Some(&aux), &mut kinks)
            .unwrap()
            .to_signal();
        let mut kinks_fast = Vec::new();
        net.forward_recording(&x, Some(&aux), &mut kinks_fast).unwrap();
        assert_eq!(kinks.len(), kinks_fast.len());
        for (p, f) in precise.data().iter().zip(fast.data()) {
            assert!((p - f).abs() < 1e-13, "{p} vs {f}");
        }
    }
}
