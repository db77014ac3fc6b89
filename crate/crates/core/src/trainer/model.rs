use rand::Rng;

use super::config::{LayerPolicy, PolicyOverride};
use super::data::{Sample, CLASSES};
use crate::error::{Error, Result};
use crate::nn::{backprop, ConvLayer, Layer, LossSpec, Network, LEAKY_SLOPE};
use crate::sparsify::{layout, LayerSegment};

/// Conv stack `(out, kernel, stride)` of ConvNet5-mini; the head is a 1x1
/// conv after global average pooling.
pub const CONVNET5_MINI: [(usize, usize, usize); 4] = [(8, 3, 1), (32, 3, 2), (64, 3, 2), (128, 3, 2)];

/// The trained model and its flattened-gradient layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub network: Network,
    pub layers: Vec<LayerSegment>,
}

impl ModelSpec {
    pub fn convnet5_mini() -> Result<Self> {
        let mut layers = Vec::new();
        let mut channels = 1;
        for &(out, k, s) in &CONVNET5_MINI {
            layers.push(Layer::Conv(ConvLayer::new(channels, out, k, s, k / 2, false)?));
            layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
            channels = out;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Conv(ConvLayer::new(channels, CLASSES, 1, 1, 0, false)?));
        let network = Network::new(layers);
        let layers = layout(&network.layer_sizes());
        Ok(Self { network, layers })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.network.conv_layers_mut().for_each(|c| c.init_uniform(rng));
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// First layer dense, last layer top-k only, the rest top-k plus autoencoder.
pub fn layer_policy(layer_id: usize, layer_count: usize) -> Result<LayerPolicy> {
    if layer_id >= layer_count {
        return Err(Error::invalid(format!("layer {layer_id} out of range for {layer_count} layers")));
    }
    Ok(if layer_id == 0 {
        LayerPolicy::Dense
    } else if layer_id + 1 == layer_count {
        LayerPolicy::TopkOnly
    } else {
        LayerPolicy::TopkPlusAe
    })
}

/// Default policies with per-layer overrides applied.
pub fn resolve_policies(layer_count: usize, overrides: &[PolicyOverride]) -> Result<Vec<LayerPolicy>> {
    let mut out = (0..layer_count)
        .map(|l| layer_policy(l, layer_count))
        .collect::<Result<Vec<_>>>()?;
    for o in overrides {
        *out.get_mut(o.layer)
            .ok_or_else(|| Error::invalid(format!("override for missing layer {}", o.layer)))? = o.policy;
    }
    Ok(out)
}

/// Mean cross-entropy and its flattened gradient over `batch`.
pub fn batch_gradient(net: &Network, samples: &[Sample], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grad = vec![0.0; net.param_count()];
    let mut loss = 0.0;
    for &i in batch {
        let s = &samples[i];
        let bp = backprop(net, &s.input, None, &LossSpec::SoftmaxCrossEntropy { label: s.label })?;
        loss += bp.loss;
        grad.iter_mut().zip(bp.grads.flatten()).for_each(|(g, v)| *g += v);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

pub fn predict(net: &Network, sample: &Sample) -> Result<usize> {
    let y = net.forward(&sample.input, None)?;
    Ok(y.data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

/// Fraction of correctly classified samples.
pub fn accuracy(net: &Network, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        correct += usize::from(predict(net, s)? == s.label);
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::data::Dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_covers_parameters() {
        let m = ModelSpec::convnet5_mini().unwrap();
        let sizes: Vec<usize> = m.layers.iter().map(|s| s.length).collect();
        assert_eq!(sizes, vec![32, 800, 6208, 24704, 516]);
        assert_eq!(m.param_count(), 32260);
        let last = m.layers.last().unwrap();
        assert_eq!(last.start + last.length, m.param_count());
    }

    #[test]
    fn five_layer_policy() {
        assert_eq!(layer_policy(0, 5).unwrap(), LayerPolicy::Dense);
        assert_eq!(layer_policy(4, 5).unwrap(), LayerPolicy::TopkOnly);
        for l in 1..4 {
            assert_eq!(layer_policy(l, 5).unwrap(), LayerPolicy::TopkPlusAe);
        }
        assert!(layer_policy(5, 5).is_err());
        let o = [PolicyOverride {
            layer: 2,
            policy: LayerPolicy::Dense,
        }];
        assert_eq!(resolve_policies(5, &o).unwrap()[2], LayerPolicy::Dense);
    }

    #[test]
    fn batch_gradient_is_mean_of_halves() {
        let mut m = ModelSpec::convnet5_mini().unwrap();
        m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let d = Dataset::generate(8, 1, 0.3, 0);
        let (la, ga) = batch_gradient(&m.network, &d.train, &[0, 1, 2, 3]).unwrap();
        let (l1, g1) = batch_gradient(&m.network, &d.train, &[0, 1]).unwrap();
        let (l2, g2) = batch_gradient(&m.network, &d.train, &[2, 3]).unwrap();
        assert!((la - (l1 + l2) / 2.0).abs() < 1e-12);
        for ((a, b), c) in ga.iter().zip(&g1).zip(&g2) {
            assert!((a - (b + c) / 2.0).abs() < 1e-12);
        }
    }
}
