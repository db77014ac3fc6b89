//! The two gradient autoencoders: a shared encoder `E_c`, and either one
//! decoder per node that also sees that node's innovation (parameter-server
//! variant) or a single decoder over the averaged code (ring variant).

use rand::Rng;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::nn::gradcheck::{check_coordinates_piecewise, coverage_coords};
use crate::nn::{squared_error_precise, ChannelSignal, Coverage, PiecewiseReport, PreciseSignal, ConvLayer, Layer, LossSpec, Network, ParameterGradients, SgdMomentum, LEAKY_SLOPE};
use crate::sparsify::SparseSelection;

pub const CODE_CHANNELS: usize = 4;
/// Length contraction of the encoder.
pub const ENCODER_STRIDE: usize = 16;

/// `(filters, kernel, stride)` of each encoder conv.
pub const ENCODER_LAYERS: [(usize, usize, usize); 5] = [(64, 3, 2), (128, 3, 2), (256, 3, 2), (64, 3, 2), (4, 1, 1)];
/// Filters of the five stride-2 decoder deconvs; a 1x1 conv to one channel follows.
pub const DECODER_DECONV_FILTERS: [usize; 5] = [4, 32, 64, 128, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AeVariant {
    /// Decoupling into common code plus per-node innovation.
    Ps,
    /// Aggregation of codes; one decoder for the mean.
    Rar,
}

pub fn code_length(input_length: usize) -> usize {
    input_length.div_ceil(ENCODER_STRIDE)
}

pub fn build_encoder() -> Result<Network> {
    let mut layers = Vec::new();
    let mut channels = 1;
    for (i, &(filters, kernel, stride)) in ENCODER_LAYERS.iter().enumerate() {
        let padding = kernel / 2;
        layers.push(Layer::Conv(ConvLayer::new(channels, filters, kernel, stride, padding, false)?));
        if i + 1 < ENCODER_LAYERS.len() {
            layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
        }
        channels = filters;
    }
    Ok(Network::new(layers))
}

pub fn build_decoder(input_length: usize, with_innovation: bool) -> Result<Network> {
    let mut layers = Vec::new();
    let mut channels = CODE_CHANNELS;
    for &filters in &DECODER_DECONV_FILTERS {
        let deconv = ConvLayer::new(channels, filters, 3, 2, 1, true)?.with_output_padding(1);
        layers.push(Layer::Conv(deconv));
        layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
        channels = filters;
    }
    layers.push(Layer::CenterTrim(input_length));
    if with_innovation {
        layers.push(Layer::ConcatAux);
        channels += 1;
    }
    layers.push(Layer::Conv(ConvLayer::new(channels, 1, 1, 1, 0, false)?));
    Ok(Network::new(layers))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub variant: AeVariant,
    pub input_length: usize,
    pub encoder: Network,
    pub decoders: Vec<Network>,
}

impl AutoencoderParams {
    /// Zero-initialized parameters. `nodes` is the decoder count for the PS
    /// variant and ignored for RAR.
    pub fn new(variant: AeVariant, input_length: usize, nodes: usize) -> Result<Self> {
        if input_length == 0 {
            return Err(Error::invalid("autoencoder input length must be positive"));
        }
        let decoders = match variant {
            AeVariant::Ps if nodes == 0 => {
                return Err(Error::invalid("the PS autoencoder needs at least one decoder"))
            }
            AeVariant::Ps => nodes,
            AeVariant::Rar => 1,
        };
        let decoder = build_decoder(input_length, variant == AeVariant::Ps)?;
        Ok(Self {
            variant,
            input_length,
            encoder: build_encoder()?,
            decoders: vec![decoder; decoders],
        })
    }

    pub fn init_random<R: Rng + ?Sized>(variant: AeVariant, input_length: usize, nodes: usize, rng: &mut R) -> Result<Self> {
        let mut params = Self::new(variant, input_length, nodes)?;
        params.networks_mut().for_each(|net| net.conv_layers_mut().for_each(|c| c.init_he(LEAKY_SLOPE, rng)));
        Ok(params)
    }

    pub fn code_length(&self) -> usize {
        code_length(self.input_length)
    }

    pub fn networks(&self) -> impl Iterator<Item = &Network> {
        std::iter::once(&self.encoder).chain(&self.decoders)
    }

    pub fn networks_mut(&mut self) -> impl Iterator<Item = &mut Network> {
        std::iter::once(&mut self.encoder).chain(&mut self.decoders)
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.networks().map(Network::param_count).sum()
    }

    /// Encoder parameters, then each decoder's.
    pub fn params_flat(&self) -> Vec<f64> {
        self.networks().flat_map(|n| n.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} autoencoder parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for net in self.networks_mut() {
            let n = net.param_count();
            net.set_params_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    /// Per-tensor sizes in [`Self::params_flat`] order.
    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.networks()
            .flat_map(|n| n.conv_layers().flat_map(|c| [c.weights.len(), c.bias.len()]).collect::<Vec<_>>())
            .collect()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_length {
            return Err(Error::shape(format!(
                "autoencoder expects length {}, got {len}",
                self.input_length
            )));
        }
        Ok(())
    }

    fn decoder(&self, k: usize) -> Result<&Network> {
        self.decoders
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no decoder {k} (have {})", self.decoders.len())))
    }
}

/// The encoder output: `CODE_CHANNELS x ceil(mu / 16)` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonCode {
    signal: ChannelSignal,
}

impl CommonCode {
    pub fn new(length: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            signal: ChannelSignal::new(CODE_CHANNELS, length, data)?,
        })
    }

    pub fn zeros(length: usize) -> Self {
        Self {
            signal: ChannelSignal::zeros(CODE_CHANNELS, length),
        }
    }

    pub fn channels(&self) -> usize {
        self.signal.channels()
    }

    pub fn length(&self) -> usize {
        self.signal.length()
    }

    pub fn data(&self) -> &[f64] {
        self.signal.data()
    }

    pub fn as_signal(&self) -> &ChannelSignal {
        &self.signal
    }

    pub fn into_data(self) -> Vec<f64> {
        self.signal.into_data()
    }
}

fn column(values: &[f64]) -> ChannelSignal {
    ChannelSignal::from_vec(values.to_vec())
}

pub fn encode_common(input: &[f64], params: &AutoencoderParams) -> Result<CommonCode> {
    params.check_input(input.len())?;
    let signal = params.encoder.forward(&column(input), None)?;
    Ok(CommonCode { signal })
}

fn check_code(code: &CommonCode, params: &AutoencoderParams) -> Result<()> {
    if code.length() != params.code_length() {
        return Err(Error::shape(format!(
            "code length {} does not match input length {}",
            code.length(),
            params.input_length
        )));
    }
    Ok(())
}

fn innovation_channel(innovation: &SparseSelection, length: usize) -> Result<ChannelSignal> {
    if let Some(&bad) = innovation.indices.iter().find(|&&i| i >= length) {
        return Err(Error::invalid(format!("innovation index {bad} out of range for length {length}")));
    }
    let mut dense = vec![0.0; length];
    for (&i, &v) in innovation.indices.iter().zip(&innovation.values) {
        dense[i] = v;
    }
    Ok(ChannelSignal::from_vec(dense))
}

/// Reconstruction `D_c^k(code, innovation)` for node `decoder_k`.
pub fn decode_ps(
    code: &CommonCode,
    innovation: &SparseSelection,
    decoder_k: usize,
    params: &AutoencoderParams,
) -> Result<Vec<f64>> {
    if params.variant != AeVariant::Ps {
        return Err(Error::invalid("decode_ps needs PS autoencoder parameters"));
    }
    check_code(code, params)?;
    let aux = innovation_channel(innovation, params.input_length)?;
    Ok(params.decoder(decoder_k)?.forward(&code.signal, Some(&aux))?.into_data())
}

pub fn decode_rar(avg_code: &CommonCode, params: &AutoencoderParams) -> Result<Vec<f64>> {
    if params.variant != AeVariant::Rar {
        return Err(Error::invalid("decode_rar needs RAR autoencoder parameters"));
    }
    check_code(avg_code, params)?;
    Ok(params.decoder(0)?.forward(&avg_code.signal, None)?.into_data())
}

pub fn average_codes(codes: &[CommonCode]) -> Result<CommonCode> {
    let first = codes.first().ok_or_else(|| Error::invalid("no codes to average"))?;
    if let Some(bad) = codes.iter().find(|c| c.length() != first.length()) {
        return Err(Error::shape(format!(
            "code lengths differ: {} vs {}",
            first.length(),
            bad.length()
        )));
    }
    let mut sum = vec![0.0; first.data().len()];
    for code in codes {
        sum.iter_mut().zip(code.data()).for_each(|(s, v)| *s += v);
    }
    let k = codes.len() as f64;
    CommonCode::new(first.length(), sum.into_iter().map(|s| s / k).collect())
}

/// Weights of the PS objective `lambda1 * L_rec + lambda2 * L_sim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for PsLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AeLosses {
    pub rec: f64,
    pub sim: f64,
}

impl AeLosses {
    pub fn total(&self, w: PsLossWeights) -> f64 {
        w.lambda1 * self.rec + w.lambda2 * self.sim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeGradients {
    pub encoder: ParameterGradients,
    pub decoders: Vec<ParameterGradients>,
}

impl AeGradients {
    pub fn zeros_like(params: &AutoencoderParams) -> Self {
        Self {
            encoder: ParameterGradients::zeros_like(&params.encoder),
            decoders: params.decoders.iter().map(ParameterGradients::zeros_like).collect(),
        }
    }

    /// Same order as [`AutoencoderParams::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        std::iter::once(&self.encoder)
            .chain(&self.decoders)
            .flat_map(ParameterGradients::flatten)
            .collect()
    }
}

/// Sum of squared distances over ordered pairs `k != m`.
fn similarity(codes: &[ChannelSignal]) -> f64 {
    let mut total = 0.0;
    for (k, a) in codes.iter().enumerate() {
        for (m, b) in codes.iter().enumerate() {
            if k != m {
                total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
    }
    total
}

fn check_ps_batch(params: &AutoencoderParams, grads: &[Vec<f64>], innovations: &[SparseSelection], chosen: usize) -> Result<()> {
    if params.variant != AeVariant::Ps {
        return Err(Error::invalid("PS training needs PS autoencoder parameters"));
    }
    if grads.len() < 2 {
        return Err(Error::invalid("the similarity loss needs at least two gradients"));
    }
    if grads.len() != params.decoders.len() || innovations.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} gradients, {} innovations, {} decoders",
            grads.len(),
            innovations.len(),
            params.decoders.len()
        )));
    }
    if chosen >= grads.len() {
        return Err(Error::invalid(format!("code node {chosen} out of range")));
    }
    grads.iter().try_for_each(|g| params.check_input(g.len()))
}

/// PS losses for one batch where node `chosen`'s code feeds every decoder.
pub fn ps_losses(
    params: &AutoencoderParams,
    grads: &[Vec<f64>],
    innovations: &[SparseSelection],
    chosen: usize,
) -> Result<AeLosses> {
    ps_losses_recording(params, grads, innovations, chosen, &mut Vec::new())
}

fn ps_losses_recording(
    params: &AutoencoderParams,
    grads: &[Vec<f64>],
    innovations: &[SparseSelection],
    chosen: usize,
    kinks: &mut Vec<f64>,
) -> Result<AeLosses> {
    check_ps_batch(params, grads, innovations, chosen)?;
    let codes = grads
        .iter()
        .map(|g| params.encoder.forward_recording(&column(g), None, kinks))
        .collect::<Result<Vec<_>>>()?;
    let mut rec = 0.0;
    for (k, (g, inn)) in grads.iter().zip(innovations).enumerate() {
        let aux = innovation_channel(inn, params.input_length)?;
        let y = params.decoders[k].forward_recording(&codes[chosen], Some(&aux), kinks)?;
        rec += y.data().iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(AeLosses {
        rec,
        sim: similarity(&codes),
    })
}

/// Losses and analytic gradients of `lambda1 * L_rec + lambda2 * L_sim`.
pub fn ps_loss_gradients(
    params: &AutoencoderParams,
    grads: &[Vec<f64>],
    innovations: &[SparseSelection],
    chosen: usize,
    weights: PsLossWeights,
) -> Result<(AeLosses, AeGradients)> {
    check_ps_batch(params, grads, innovations, chosen)?;
    let k_nodes = grads.len();
    let traces = grads
        .iter()
        .map(|g| params.encoder.forward_traced(&column(g), None))
        .collect::<Result<Vec<_>>>()?;
    let codes: Vec<ChannelSignal> = traces.iter().map(|t| t.output.clone()).collect();
    let code_len = codes[0].data().len();

    let mut out = AeGradients::zeros_like(params);
    let mut rec = 0.0;
    let mut d_chosen = vec![0.0; code_len];
    for (k, (g, inn)) in grads.iter().zip(innovations).enumerate() {
        let aux = innovation_channel(inn, params.input_length)?;
        let trace = params.decoders[k].forward_traced(&codes[chosen], Some(&aux))?;
        let (loss, dy) = LossSpec::SquaredError { target: g, weight: weights.lambda1 }.evaluate(&trace.output)?;
        rec += if weights.lambda1 != 0.0 {
            loss / weights.lambda1
        } else {
            trace.output.data().iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let (pg, dx, _) = params.decoders[k].backward(&trace, &dy)?;
        out.decoders[k] = pg;
        d_chosen.iter_mut().zip(dx.data()).for_each(|(d, v)| *d += v);
    }

    let mut code_sum = vec![0.0; code_len];
    for c in &codes {
        code_sum.iter_mut().zip(c.data()).for_each(|(s, v)| *s += v);
    }
    for (k, trace) in traces.iter().enumerate() {
        // d/dc_k of the ordered-pair sum is 4 * (K c_k - sum_m c_m)
        let mut dc: Vec<f64> = codes[k]
            .data()
            .iter()
            .zip(&code_sum)
            .map(|(c, s)| weights.lambda2 * 4.0 * (k_nodes as f64 * c - s))
            .collect();
        if k == chosen {
            dc.iter_mut().zip(&d_chosen).for_each(|(d, v)| *d += v);
        }
        let dc = ChannelSignal::new(codes[k].channels(), codes[k].length(), dc)?;
        let (pg, _, _) = params.encoder.backward(trace, &dc)?;
        out.encoder.add_assign(&pg);
    }
    Ok((
        AeLosses {
            rec,
            sim: similarity(&codes),
        },
        out,
    ))
}

fn check_rar_batch(params: &AutoencoderParams, grads: &[Vec<f64>]) -> Result<()> {
    if params.variant != AeVariant::Rar {
        return Err(Error::invalid("RAR training needs RAR autoencoder parameters"));
    }
    if grads.is_empty() {
        return Err(Error::invalid("RAR training needs at least one gradient"));
    }
    grads.iter().try_for_each(|g| params.check_input(g.len()))
}

fn mean_vector(grads: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; grads[0].len()];
    for g in grads {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    let k = grads.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    mean
}

/// `||D_c(mean_k E_c(g_k)) - mean_k g_k||^2`.
pub fn rar_loss(params: &AutoencoderParams, grads: &[Vec<f64>]) -> Result<f64> {
    rar_loss_recording(params, grads, &mut Vec::new())
}

fn rar_loss_recording(params: &AutoencoderParams, grads: &[Vec<f64>], kinks: &mut Vec<f64>) -> Result<f64> {
    check_rar_batch(params, grads)?;
    let codes = grads
        .iter()
        .map(|g| {
            params
                .encoder
                .forward_recording(&column(g), None, kinks)
                .map(|signal| CommonCode { signal })
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = average_codes(&codes)?;
    let rec = params.decoders[0].forward_recording(&avg.signal, None, kinks)?;
    Ok(rec.data().iter().zip(mean_vector(grads)).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn rar_loss_gradients(params: &AutoencoderParams, grads: &[Vec<f64>]) -> Result<(f64, AeGradients)> {
    check_rar_batch(params, grads)?;
    let traces = grads
        .iter()
        .map(|g| params.encoder.forward_traced(&column(g), None))
        .collect::<Result<Vec<_>>>()?;
    let codes: Vec<CommonCode> = traces
        .iter()
        .map(|t| CommonCode { signal: t.output.clone() })
        .collect();
    let avg = average_codes(&codes)?;
    let target = mean_vector(grads);
    let decoder = &params.decoders[0];
    let trace = decoder.forward_traced(&avg.signal, None)?;
    let (loss, dy) = LossSpec::SquaredError { target: &target, weight: 1.0 }.evaluate(&trace.output)?;
    let (dec_grad, davg, _) = decoder.backward(&trace, &dy)?;

    let mut out = AeGradients::zeros_like(params);
    out.decoders[0] = dec_grad;
    let k = grads.len() as f64;
    let dc = ChannelSignal::new(
        davg.channels(),
        davg.length(),
        davg.data().iter().map(|v| v / k).collect(),
    )?;
    for t in &traces {
        let (pg, _, _) = params.encoder.backward(t, &dc)?;
        out.encoder.add_assign(&pg);
    }
    Ok((loss, out))
}

/// Plain or momentum SGD over all autoencoder networks.
#[derive(Debug, Clone)]
pub struct AeOptimizer {
    encoder: SgdMomentum,
    decoders: Vec<SgdMomentum>,
    clip: Option<f64>,
}

impl AeOptimizer {
    pub fn new(params: &AutoencoderParams, lr: f64, momentum: f64) -> Result<Self> {
        Ok(Self {
            encoder: SgdMomentum::new(&params.encoder, lr, momentum)?,
            decoders: params
                .decoders
                .iter()
                .map(|d| SgdMomentum::new(d, lr, momentum))
                .collect::<Result<_>>()?,
            clip: None,
        })
    }

    /// Rescales each step's gradient to at most this global L2 norm.
    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Result<Self> {
        if let Some(c) = max_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid(format!("clip norm must be positive and finite, got {c}")));
            }
        }
        self.clip = max_norm;
        Ok(self)
    }

    pub fn step(&mut self, params: &mut AutoencoderParams, grads: &AeGradients) -> Result<()> {
        if grads.decoders.len() != params.decoders.len() || self.decoders.len() != params.decoders.len() {
            return Err(Error::shape("decoder count mismatch"));
        }
        let clipped;
        let grads = match self.clip {
            Some(c) => {
                let norm = grads.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > c {
                    let mut g = grads.clone();
                    g.encoder.scale(c / norm);
                    g.decoders.iter_mut().for_each(|d| d.scale(c / norm));
                    clipped = g;
                    &clipped
                } else {
                    grads
                }
            }
            None => grads,
        };
        self.encoder.step(&mut params.encoder, &grads.encoder)?;
        for ((opt, net), g) in self.decoders.iter_mut().zip(&mut params.decoders).zip(&grads.decoders) {
            opt.step(net, g)?;
        }
        Ok(())
    }
}

pub fn choose_code_node<R: Rng + ?Sized>(rng: &mut R, nodes: usize) -> usize {
    rng.random_range(0..nodes)
}

/// One SGD step on the PS objective; returns the losses before the step.
pub fn ae_train_step_ps(
    params: &mut AutoencoderParams,
    opt: &mut AeOptimizer,
    grads: &[Vec<f64>],
    innovations: &[SparseSelection],
    chosen: usize,
    weights: PsLossWeights,
) -> Result<AeLosses> {
    if weights.lambda1 < 0.0 || weights.lambda2 < 0.0 {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    let (losses, g) = ps_loss_gradients(params, grads, innovations, chosen, weights)?;
    opt.step(params, &g)?;
    Ok(losses)
}

/// One SGD step on the RAR objective; returns the loss before the step.
pub fn ae_train_step_rar(params: &mut AutoencoderParams, opt: &mut AeOptimizer, grads: &[Vec<f64>]) -> Result<f64> {
    let (loss, g) = rar_loss_gradients(params, grads)?;
    opt.step(params, &g)?;
    Ok(loss)
}

fn sq_dist(a: &[TwoFloat], b: &[TwoFloat]) -> TwoFloat {
    a.iter().zip(b).fold(TwoFloat::from(0.0), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

struct EncoderPass {
    codes: Vec<PreciseSignal>,
    kinks: Vec<f64>,
}

struct DecoderPass {
    loss: TwoFloat,
    kinks: Vec<f64>,
}

/// Double-double objective for the finite-difference checks. Only networks
/// whose parameters differ from the base point are re-run.
struct PreciseObjective<'a> {
    probe: AutoencoderParams,
    base_flat: Vec<f64>,
    offsets: Vec<usize>,
    grads: &'a [Vec<f64>],
    innovations: &'a [SparseSelection],
    chosen: usize,
    weights: PsLossWeights,
    base_encoder: EncoderPass,
    base_decoders: Vec<DecoderPass>,
}

impl<'a> PreciseObjective<'a> {
    fn new(
        params: &AutoencoderParams,
        grads: &'a [Vec<f64>],
        innovations: &'a [SparseSelection],
        chosen: usize,
        weights: PsLossWeights,
    ) -> Result<Self> {
        let mut offsets = vec![0];
        for net in params.networks() {
            offsets.push(offsets.last().unwrap() + net.param_count());
        }
        let base_encoder = Self::encoder_pass(params, grads)?;
        let mut this = Self {
            probe: params.clone(),
            base_flat: params.params_flat(),
            offsets,
            grads,
            innovations,
            chosen,
            weights,
            base_encoder,
            base_decoders: Vec::new(),
        };
        this.base_decoders = (0..params.decoders.len())
            .map(|k| this.decoder_pass(k, &this.base_encoder))
            .collect::<Result<_>>()?;
        Ok(this)
    }

    fn encoder_pass(params: &AutoencoderParams, grads: &[Vec<f64>]) -> Result<EncoderPass> {
        let mut kinks = Vec::new();
        let codes = grads
            .iter()
            .map(|g| params.encoder.forward_precise(&PreciseSignal::from_signal(&column(g)), None, &mut kinks))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderPass { codes, kinks })
    }

    fn decoder_pass(&self, k: usize, enc: &EncoderPass) -> Result<DecoderPass> {
        let params = &self.probe;
        let mut kinks = Vec::new();
        let loss = match params.variant {
            AeVariant::Ps => {
                let aux = innovation_channel(&self.innovations[k], params.input_length)?;
                let y = params.decoders[k].forward_precise(&enc.codes[self.chosen], Some(&aux), &mut kinks)?;
                squared_error_precise(&y, &self.grads[k])?
            }
            AeVariant::Rar => {
                let n = enc.codes.len() as f64;
                let mut avg = enc.codes[0].clone();
                for c in &enc.codes[1..] {
                    avg.data.iter_mut().zip(&c.data).for_each(|(a, &b)| *a += b);
                }
                avg.data.iter_mut().for_each(|a| *a = *a / n);
                let y = params.decoders[0].forward_precise(&avg, None, &mut kinks)?;
                let mut target = vec![TwoFloat::from(0.0); params.input_length];
                for g in self.grads {
                    target.iter_mut().zip(g).for_each(|(t, &v)| *t += v);
                }
                target.iter_mut().for_each(|t| *t = *t / n);
                sq_dist(&y.data, &target)
            }
        };
        Ok(DecoderPass { loss, kinks })
    }

    fn eval(&mut self, p: &[f64]) -> Result<(TwoFloat, Vec<f64>)> {
        self.probe.set_params_flat(p)?;
        let changed: Vec<bool> = self
            .offsets
            .windows(2)
            .map(|w| p[w[0]..w[1]] != self.base_flat[w[0]..w[1]])
            .collect();
        let fresh_encoder = if changed[0] {
            Some(Self::encoder_pass(&self.probe, self.grads)?)
        } else {
            None
        };
        let enc = fresh_encoder.as_ref().unwrap_or(&self.base_encoder);
        let mut kinks = enc.kinks.clone();
        let mut rec = TwoFloat::from(0.0);
        for k in 0..self.probe.decoders.len() {
            if changed[0] || changed[k + 1] {
                let pass = self.decoder_pass(k, enc)?;
                rec += pass.loss;
                kinks.extend(pass.kinks);
            } else {
                rec += self.base_decoders[k].loss;
                kinks.extend_from_slice(&self.base_decoders[k].kinks);
            }
        }
        let total = match self.probe.variant {
            AeVariant::Ps => {
                let mut sim = TwoFloat::from(0.0);
                for (k, a) in enc.codes.iter().enumerate() {
                    for (m, b) in enc.codes.iter().enumerate() {
                        if k != m {
                            sim += sq_dist(&a.data, &b.data);
                        }
                    }
                }
                rec * self.weights.lambda1 + sim * self.weights.lambda2
            }
            AeVariant::Rar => rec,
        };
        Ok((total, kinks))
    }
}

/// Settings for the autoencoder finite-difference checks.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub coverage: Coverage,
    pub max_epsilon: f64,
    pub min_epsilon: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coverage: Coverage::Sampled { per_tensor: 4, seed: 0 },
            max_epsilon: 1.0,
            min_epsilon: 1e-8,
        }
    }
}

/// Compares [`ps_loss_gradients`] with central differences of the weighted
/// PS objective over the parameters picked by `opts.coverage`. The numeric
/// side runs in double-double arithmetic through direct-loop convolutions.
pub fn gradcheck_ps(
    params: &AutoencoderParams,
    grads: &[Vec<f64>],
    innovations: &[SparseSelection],
    chosen: usize,
    weights: PsLossWeights,
    opts: GradCheckOptions,
) -> Result<PiecewiseReport> {
    let (_, analytic) = ps_loss_gradients(params, grads, innovations, chosen, weights)?;
    let mut precise = PreciseObjective::new(params, grads, innovations, chosen, weights)?;
    let mut fast = params.clone();
    check_coordinates_piecewise(
        &params.params_flat(),
        &analytic.flatten(),
        |p| precise.eval(p),
        |p| {
            fast.set_params_flat(p)?;
            let mut kinks = Vec::new();
            ps_losses_recording(&fast, grads, innovations, chosen, &mut kinks)?;
            Ok(kinks)
        },
        opts.max_epsilon,
        opts.min_epsilon,
        coverage_coords(&params.tensor_sizes(), opts.coverage),
    )
}

pub fn gradcheck_rar(params: &AutoencoderParams, grads: &[Vec<f64>], opts: GradCheckOptions) -> Result<PiecewiseReport> {
    let (_, analytic) = rar_loss_gradients(params, grads)?;
    let mut precise = PreciseObjective::new(params, grads, &[], 0, PsLossWeights::default())?;
    let mut fast = params.clone();
    check_coordinates_piecewise(
        &params.params_flat(),
        &analytic.flatten(),
        |p| precise.eval(p),
        |p| {
            fast.set_params_flat(p)?;
            let mut kinks = Vec::new();
            rar_loss_recording(&fast, grads, &mut kinks)?;
            Ok(kinks)
        },
        opts.max_epsilon,
        opts.min_epsilon,
        coverage_coords(&params.tensor_sizes(), opts.coverage),
    )
}
