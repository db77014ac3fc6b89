use rand::Rng;

use super::gemm::gemm;
use super::signal::ChannelSignal;
use crate::error::{Error, Result};

/// A 1D convolution or transposed convolution with weights laid out
/// `[out_channels][in_channels][kernel]` in both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra trailing positions on a transposed output; zero for plain convs.
    pub output_padding: usize,
    pub transposed: bool,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Weight and bias gradients shaped like the owning [`ConvLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|v| *v *= factor);
        self.bias.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("kernel and stride must be at least 1"));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("channel counts must be at least 1"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: 0,
            transposed,
            weights: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        })
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() || bias.len() != self.bias.len() {
            return Err(Error::shape(format!(
                "expected {} weights and {} biases, got {} and {}",
                self.weights.len(),
                self.bias.len(),
                weights.len(),
                bias.len()
            )));
        }
        self.weights = weights;
        self.bias = bias;
        Ok(self)
    }

    /// Uniform init in `±1/sqrt(in_channels * kernel)` for weights and biases.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = 1.0 / ((self.in_channels * self.kernel) as f64).sqrt();
        for w in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *w = rng.random_range(-bound..=bound);
        }
    }

    /// Variance-preserving uniform init for a leaky ReLU with the given slope; zero biases.
    /// A transposed layer's fan-in counts the taps that reach one output position.
    pub fn init_he<R: Rng + ?Sized>(&mut self, slope: f64, rng: &mut R) {
        let taps = if self.transposed { self.kernel.div_ceil(self.stride) } else { self.kernel };
        let fan_in = (self.in_channels * taps) as f64;
        let bound = (3.0 * 2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        for w in self.weights.iter_mut() {
            *w = rng.random_range(-bound..=bound);
        }
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn output_length(&self, input_length: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if self.transposed {
            let span = (input_length.max(1) - 1) * s + k + self.output_padding;
            if input_length == 0 || span <= 2 * p {
                return Err(Error::DegenerateLength(format!(
                    "transposed conv maps length {input_length} below 1"
                )));
            }
            Ok(span - 2 * p)
        } else {
            let padded = input_length + 2 * p;
            if padded < k {
                return Err(Error::DegenerateLength(format!(
                    "kernel {k} exceeds padded input length {padded}"
                )));
            }
            Ok((padded - k) / s + 1)
        }
    }

    fn check_input(&self, x: &ChannelSignal) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "layer expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ChannelSignal) -> Result<ChannelSignal> {
        self.check_input(x)?;
        let l_out = self.output_length(x.length())?;
        let mut y = if self.transposed {
            let z = self.transposed_columns(x);
            let mut y = vec![0.0; self.out_channels * l_out];
            col2im(
                &z,
                self.out_channels,
                l_out,
                self.kernel,
                self.stride,
                self.padding,
                x.length(),
                &mut y,
            );
            y
        } else {
            let cols = im2col(
                x.data(),
                self.in_channels,
                x.length(),
                self.kernel,
                self.stride,
                self.padding,
                l_out,
            );
            let mut y = vec![0.0; self.out_channels * l_out];
            gemm(
                self.out_channels,
                self.in_channels * self.kernel,
                l_out,
                &self.weights,
                false,
                &cols,
                false,
                0.0,
                &mut y,
            );
            y
        };
        for (o, b) in self.bias.iter().enumerate() {
            y[o * l_out..(o + 1) * l_out]
                .iter_mut()
                .for_each(|v| *v += b);
        }
        ChannelSignal::new(self.out_channels, l_out, y)
    }

    /// Gradients of a scalar loss given `dy = dL/dy` at the output for input `x`.
    pub fn backward(&self, x: &ChannelSignal, dy: &ChannelSignal) -> Result<(ConvGrad, ChannelSignal)> {
        self.check_input(x)?;
        let l_out = self.output_length(x.length())?;
        if dy.channels() != self.out_channels || dy.length() != l_out {
            return Err(Error::shape(format!(
                "output gradient is {}x{}, expected {}x{l_out}",
                dy.channels(),
                dy.length(),
                self.out_channels
            )));
        }
        let (ic, oc, k) = (self.in_channels, self.out_channels, self.kernel);
        let l_in = x.length();
        let bias = (0..oc).map(|o| dy.channel(o).iter().sum()).collect();
        let mut dx = vec![0.0; ic * l_in];
        let mut dw = vec![0.0; self.weights.len()];
        if self.transposed {
            // dZ[(o,j), t] = dy[o, t*s + j - p]
            let dz = im2col(dy.data(), oc, l_out, k, self.stride, self.padding, l_in);
            let mut dwt = vec![0.0; oc * k * ic];
            gemm(oc * k, l_in, ic, &dz, false, x.data(), true, 0.0, &mut dwt);
            for o in 0..oc {
                for j in 0..k {
                    for i in 0..ic {
                        dw[(o * ic + i) * k + j] = dwt[(o * k + j) * ic + i];
                    }
                }
            }
            let wt = self.transposed_matrix();
            gemm(ic, oc * k, l_in, &wt, true, &dz, false, 0.0, &mut dx);
        } else {
            let cols = im2col(x.data(), ic, l_in, k, self.stride, self.padding, l_out);
            gemm(oc, l_out, ic * k, dy.data(), false, &cols, true, 0.0, &mut dw);
            let mut dcols = vec![0.0; ic * k * l_out];
            gemm(ic * k, oc, l_out, &self.weights, true, dy.data(), false, 0.0, &mut dcols);
            col2im(&dcols, ic, l_in, k, self.stride, self.padding, l_out, &mut dx);
        }
        Ok((
            ConvGrad { weights: dw, bias },
            ChannelSignal::new(ic, l_in, dx)?,
        ))
    }

    /// `Wt[(o, j), i] = w[o][i][j]`, shape `(out * kernel) x in`.
    fn transposed_matrix(&self) -> Vec<f64> {
        let (ic, oc, k) = (self.in_channels, self.out_channels, self.kernel);
        let mut wt = vec![0.0; oc * k * ic];
        for o in 0..oc {
            for i in 0..ic {
                for j in 0..k {
                    wt[(o * k + j) * ic + i] = self.weights[(o * ic + i) * k + j];
                }
            }
        }
        wt
    }

    fn transposed_columns(&self, x: &ChannelSignal) -> Vec<f64> {
        let wt = self.transposed_matrix();
        let rows = self.out_channels * self.kernel;
        let mut z = vec![0.0; rows * x.length()];
        gemm(rows, self.in_channels, x.length(), &wt, false, x.data(), false, 0.0, &mut z);
        z
    }
}

/// Gathers `cols[(c, j), t] = signal[c, t*stride + j - padding]`, zero outside the signal.
fn im2col(
    signal: &[f64],
    channels: usize,
    length: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    positions: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; channels * kernel * positions];
    for c in 0..channels {
        let src = &signal[c * length..(c + 1) * length];
        for j in 0..kernel {
            let row = &mut cols[(c * kernel + j) * positions..(c * kernel + j + 1) * positions];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < length {
                    *slot = src[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the signal.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    length: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    positions: usize,
    signal: &mut [f64],
) {
    for c in 0..channels {
        let dst = &mut signal[c * length..(c + 1) * length];
        for j in 0..kernel {
            let row = &cols[(c * kernel + j) * positions..(c * kernel + j + 1) * positions];
            for (t, v) in row.iter().enumerate() {
                let pos = (t * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < length {
                    dst[pos as usize] += v;
                }
            }
        }
    }
}

/// Plain (non-transposed) convolution.
pub fn conv1d_forward(input: &ChannelSignal, layer: &ConvLayer) -> Result<ChannelSignal> {
    if layer.transposed {
        return Err(Error::invalid("conv1d_forward called with a transposed layer"));
    }
    layer.forward(input)
}

/// Transposed convolution (overlap-add upsampling).
pub fn deconv1d_forward(input: &ChannelSignal, layer: &ConvLayer) -> Result<ChannelSignal> {
    if !layer.transposed {
        return Err(Error::invalid("deconv1d_forward called with a plain layer"));
    }
    layer.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, channels: usize, length: usize) -> ChannelSignal {
        let data = (0..channels * length).map(|_| rng.random_range(-1.0..1.0)).collect();
        ChannelSignal::new(channels, length, data).unwrap()
    }

    #[test]
    fn hand_convolution() {
        let layer = ConvLayer::new(1, 1, 3, 2, 1, false)
            .unwrap()
            .with_weights(vec![1.0, 1.0, 1.0], vec![0.0])
            .unwrap();
        let x = ChannelSignal::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let y = conv1d_forward(&x, &layer).unwrap();
        assert_eq!(y.data(), &[3.0, 9.0]);
    }

    #[test]
    fn identity_kernel() {
        let layer = ConvLayer::new(1, 1, 1, 1, 0, false)
            .unwrap()
            .with_weights(vec![1.0], vec![0.0])
            .unwrap();
        let x = ChannelSignal::from_vec(vec![0.5, -3.0, 7.25]);
        assert_eq!(conv1d_forward(&x, &layer).unwrap(), x);
        let t = ConvLayer { transposed: true, ..layer };
        assert_eq!(deconv1d_forward(&x, &t).unwrap(), x);
    }

    #[test]
    fn hand_transposed_convolution() {
        let layer = ConvLayer::new(1, 1, 3, 2, 0, true)
            .unwrap()
            .with_weights(vec![1.0, 1.0, 1.0], vec![0.0])
            .unwrap();
        let y = deconv1d_forward(&ChannelSignal::from_vec(vec![1.0, 1.0]), &layer).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let layer = ConvLayer::new(2, 1, 3, 1, 1, false).unwrap();
        let err = layer.forward(&ChannelSignal::zeros(1, 8)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn degenerate_length() {
        let layer = ConvLayer::new(1, 1, 5, 1, 0, false).unwrap();
        let err = layer.forward(&ChannelSignal::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, Error::DegenerateLength(_)));
    }

    #[test]
    fn stride_two_halves_with_ceil() {
        let layer = ConvLayer::new(1, 1, 3, 2, 1, false).unwrap();
        for l in 1..50 {
            assert_eq!(layer.output_length(l).unwrap(), l.div_ceil(2));
        }
        let up = ConvLayer::new(1, 1, 3, 2, 1, true).unwrap().with_output_padding(1);
        for l in 1..50 {
            assert_eq!(up.output_length(l).unwrap(), 2 * l);
        }
    }

    #[test]
    fn forward_and_input_gradient_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for transposed in [false, true] {
            for (k, s, p) in [(3, 2, 1), (1, 1, 0), (3, 1, 1), (5, 3, 2)] {
                let mut layer = ConvLayer::new(3, 4, k, s, p, transposed).unwrap();
                layer.init_uniform(&mut rng);
                layer.bias.iter_mut().for_each(|b| *b = 0.0);
                let x = random_signal(&mut rng, 3, 11);
                let ax = layer.forward(&x).unwrap();
                let y = random_signal(&mut rng, 4, ax.length());
                let (_, aty) = layer.backward(&x, &y).unwrap();
                let lhs = ax.dot(&y);
                let rhs = x.dot(&aty);
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
                    "{lhs} vs {rhs} (transposed={transposed}, k={k}, s={s})"
                );
            }
        }
    }

    #[test]
    fn transposed_matches_naive_overlap_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = ConvLayer::new(2, 3, 3, 2, 1, true).unwrap().with_output_padding(1);
        layer.init_uniform(&mut rng);
        let x = random_signal(&mut rng, 2, 5);
        let y = layer.forward(&x).unwrap();
        let l_out = y.length();
        let mut want = vec![0.0; 3 * l_out];
        for o in 0..3 {
            for t in 0..l_out {
                want[o * l_out + t] = layer.bias[o];
            }
            for i in 0..2 {
                for t in 0..5 {
                    for j in 0..3 {
                        let pos = (t * 2 + j) as isize - 1;
                        if pos >= 0 && (pos as usize) < l_out {
                            want[o * l_out + pos as usize] +=
                                layer.weights[(o * 2 + i) * 3 + j] * x.channel(i)[t];
                        }
                    }
                }
            }
        }
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
