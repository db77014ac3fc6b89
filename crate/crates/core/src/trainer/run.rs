use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CompressorKind, LayerPolicy, PatternKind, TrainConfig};
use super::data::{Dataset, ShardSampler};
use super::metrics::{MetricRow, MetricsSeries};
use super::model::{accuracy, batch_gradient, resolve_policies, ModelSpec};
use crate::codec::{
    ae_train_step_ps, ae_train_step_rar, decode_ps, decode_rar, encode_common, AeOptimizer, AeVariant,
    AutoencoderParams, CommonCode, CompressedPayload, PayloadKind, PsLossWeights, ValueWidth,
};
use crate::comms::{
    dual_compression_ratio, compression_ratio, ps_round, ring_allgather, ring_allreduce, ring_rounds,
    DualRatio, RateLedger, SimNetwork, Tag, Topology, DOWNLINK_ROUND,
};
use crate::error::{Error, Result};
use crate::infoplane::GradientDump;
use crate::nn::sgd_momentum_step;
use crate::sparsify::{
    extract_innovation, selection_count, topk_select, LayerSegment, ResidualMode, ResidualState, SparseSelection,
    SparsityRatio, SparsitySchedule,
};

/// Which phase an iteration belongs to and the top-k density it uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStep {
    pub phase: u8,
    pub ratio: SparsityRatio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSchedule {
    pub kind: CompressorKind,
    pub phase1_iters: u32,
    pub phase2_iters: u32,
    pub total_iters: u32,
    pub sparsity: SparsitySchedule,
}

impl PhaseSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let s = &cfg.schedule;
        let sparsity = SparsitySchedule {
            strategy: s.strategy_for(cfg.compressor.kind),
            final_ratio: cfg.compressor.ratio,
            start_ratio: s.start_ratio,
            ramp_iters: s.ramp_iters,
            warmup_iters: s.phase1_iters as u64,
        };
        Self {
            kind: cfg.compressor.kind,
            phase1_iters: s.phase1_iters,
            phase2_iters: s.phase2_iters,
            total_iters: s.total_iters,
            sparsity,
        }
    }

    pub fn step(&self, iteration: u32) -> PhaseStep {
        let ratio = SparsityRatio::Percent(self.sparsity.final_ratio);
        match self.kind {
            CompressorKind::None => PhaseStep {
                phase: 1,
                ratio: SparsityRatio::Full,
            },
            CompressorKind::SparseGd | CompressorKind::Dgc => match self.sparsity.ratio_at(iteration as u64) {
                SparsityRatio::Full => PhaseStep {
                    phase: 1,
                    ratio: SparsityRatio::Full,
                },
                r => PhaseStep { phase: 2, ratio: r },
            },
            CompressorKind::Lgc if iteration < self.phase1_iters => PhaseStep {
                phase: 1,
                ratio: SparsityRatio::Full,
            },
            CompressorKind::Lgc if iteration < self.phase1_iters + self.phase2_iters => {
                PhaseStep { phase: 2, ratio }
            }
            CompressorKind::Lgc => PhaseStep { phase: 3, ratio },
        }
    }

    /// Iterations of the last phase the run reaches.
    pub fn final_phase_range(&self) -> RangeInclusive<u32> {
        let last = self.total_iters.saturating_sub(1);
        let phase = self.step(last).phase;
        let mut first = last;
        while first > 0 && self.step(first - 1).phase == phase {
            first -= 1;
        }
        first..=last
    }
}

/// Compression ratios measured from the ledgers over the final phase.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub headline_iterations: RangeInclusive<u32>,
    pub per_node_cr: Vec<f64>,
    /// Designated versus other workers, for LGC in parameter-server mode.
    pub dual_cr: Option<DualRatio>,
    pub total_bytes: u64,
    pub autoencoder_input: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub metrics: MetricsSeries,
    pub ledger: RateLedger,
    /// What an uncompressed exchange would have sent on the same iterations.
    pub baseline: RateLedger,
    pub final_params: Vec<f64>,
    /// Parameters after every iteration, when requested.
    pub trajectory: Vec<Vec<f64>>,
    pub summary: RunSummary,
    pub gradients: Option<GradientDump>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub keep_trajectory: bool,
}

/// Per-node update: dense values for the momentum-SGD segments, and sparse
/// entries applied with plain SGD.
#[derive(Debug, Clone, Default, PartialEq)]
struct NodeUpdate {
    dense: Vec<f64>,
    sparse: Vec<(usize, f64)>,
}

struct Worker {
    params: Vec<f64>,
    momentum: Vec<f64>,
    residual: ResidualState,
    /// Autoencoder copy received over the wire.
    ae: Option<AutoencoderParams>,
}

struct AeTrainer {
    params: AutoencoderParams,
    opt: AeOptimizer,
}

struct Layout {
    n: usize,
    dense: Vec<LayerSegment>,
    topk: Vec<LayerSegment>,
    ae: Vec<LayerSegment>,
    all: Vec<LayerSegment>,
}

impl Layout {
    fn sparse(&self) -> Vec<LayerSegment> {
        let mut s: Vec<LayerSegment> = self.topk.iter().chain(&self.ae).copied().collect();
        s.sort_by_key(|x| x.start);
        s
    }

    fn in_segments(segs: &[LayerSegment], i: usize) -> bool {
        segs.iter().any(|s| (s.start..s.start + s.length).contains(&i))
    }
}

fn gather(v: &[f64], segs: &[LayerSegment]) -> Vec<f64> {
    segs.iter().flat_map(|s| v[s.start..s.start + s.length].iter().copied()).collect()
}

fn scatter(values: &[f64], segs: &[LayerSegment], n: usize) -> Result<Vec<f64>> {
    let total: usize = segs.iter().map(|s| s.length).sum();
    if values.len() != total {
        return Err(Error::protocol(format!("{} dense values for {total} positions", values.len())));
    }
    let mut out = vec![0.0; n];
    let mut at = 0;
    for s in segs {
        out[s.start..s.start + s.length].copy_from_slice(&values[at..at + s.length]);
        at += s.length;
    }
    Ok(out)
}

fn rms(values: &[f64]) -> f64 {
    let ms = values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64;
    let r = ms.sqrt();
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

fn scaled(values: &[f64], factor: f64) -> Vec<f64> {
    values.iter().map(|v| v * factor).collect()
}

/// Per-layer top-k of the residual over `segs` without removing it, global coordinates.
fn peek_selection(residual: &ResidualState, segs: &[LayerSegment], ratio: f64) -> Result<Vec<SparseSelection>> {
    segs.iter()
        .map(|s| {
            let local = topk_select(&residual.accumulated()[s.start..s.start + s.length], ratio)?;
            Ok(local.shifted(s.start, residual.accumulated().len()))
        })
        .collect()
}

fn merge_selections(parts: &[SparseSelection], n: usize) -> SparseSelection {
    let mut pairs: Vec<(usize, f64)> = parts
        .iter()
        .flat_map(|p| p.indices.iter().copied().zip(p.values.iter().copied()))
        .collect();
    pairs.sort_by_key(|p| p.0);
    SparseSelection {
        threshold: pairs.iter().map(|p| p.1.abs()).reduce(f64::min).unwrap_or(0.0),
        indices: pairs.iter().map(|p| p.0).collect(),
        values: pairs.iter().map(|p| p.1).collect(),
        source_length: n,
    }
}

/// Innovation of a global selection, computed layer by layer.
fn layer_innovations(sel: &SparseSelection, segs: &[LayerSegment], inner: f64, n: usize) -> Result<SparseSelection> {
    let mut parts = Vec::new();
    for s in segs {
        let range = s.start..s.start + s.length;
        let (idx, vals): (Vec<usize>, Vec<f64>) = sel
            .indices
            .iter()
            .zip(&sel.values)
            .filter(|(i, _)| range.contains(i))
            .map(|(&i, &v)| (i, v))
            .unzip();
        if idx.is_empty() {
            continue;
        }
        let layer = SparseSelection {
            threshold: 0.0,
            indices: idx,
            values: vals,
            source_length: n,
        };
        parts.push(extract_innovation(&layer, inner)?);
    }
    Ok(merge_selections(&parts, n))
}

/// Splits a global innovation into entries inside `frame` (as frame
/// positions, values scaled) and the raw entries outside it.
fn frame_innovation(
    inn_idx: &[usize],
    inn_val: &[f64],
    frame: &[usize],
    inv_scale: f64,
) -> (SparseSelection, Vec<(usize, f64)>) {
    let mut local_idx = Vec::new();
    let mut local_val = Vec::new();
    let mut outside = Vec::new();
    for (&i, &v) in inn_idx.iter().zip(inn_val) {
        match frame.binary_search(&i) {
            Ok(p) => {
                local_idx.push(p);
                local_val.push(v * inv_scale);
            }
            Err(_) => outside.push((i, v)),
        }
    }
    let sel = SparseSelection {
        threshold: 0.0,
        indices: local_idx,
        values: local_val,
        source_length: frame.len(),
    };
    (sel, outside)
}

/// Values of a sparse payload at the frame positions, zero where absent.
fn values_at(indices: &[usize], values: &[f64], frame: &[usize]) -> Vec<f64> {
    let map: BTreeMap<usize, f64> = indices.iter().copied().zip(values.iter().copied()).collect();
    frame.iter().map(|i| map.get(i).copied().unwrap_or(0.0)).collect()
}

fn sparse_mean(sets: &[(&[usize], &[f64])], k: usize) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (idx, val) in sets {
        for (&i, &v) in idx.iter().zip(val.iter()) {
            *acc.entry(i).or_default() += v;
        }
    }
    acc.into_iter().map(|(i, v)| (i, v / k as f64)).collect()
}

fn find_kind(set: &[CompressedPayload], kind: PayloadKind) -> Result<&CompressedPayload> {
    set.iter()
        .find(|p| p.kind == kind)
        .ok_or_else(|| Error::protocol(format!("missing {kind} payload")))
}

fn find_kinds(set: &[CompressedPayload], kind: PayloadKind) -> Vec<&CompressedPayload> {
    set.iter().filter(|p| p.kind == kind).collect()
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    width: ValueWidth,
    topo: Topology,
    net: SimNetwork,
    layout: Layout,
    workers: Vec<Worker>,
    /// Autoencoder being trained in phase 2: at the master (PS) or node 0 (RAR).
    trainer: Option<AeTrainer>,
    /// Shared seeded generator for code-node and index-node choices.
    coord: ChaCha8Rng,
    mu: usize,
    loss_weights: PsLossWeights,
}

#[derive(Debug, Clone, Copy, Default)]
struct AeStep {
    rec: Option<f64>,
    sim: Option<f64>,
}

impl<'a> Run<'a> {
    fn k(&self) -> usize {
        self.topo.nodes()
    }

    fn master(&self) -> u16 {
        self.k() as u16
    }

    fn payload(&self, kind: PayloadKind, it: u32, node: usize) -> CompressedPayload {
        CompressedPayload::new(kind, it, node as u16).with_width(self.width)
    }

    fn dense_segments(&self, phase: u8) -> Vec<LayerSegment> {
        if phase == 1 {
            self.layout.all.clone()
        } else {
            self.layout.dense.clone()
        }
    }

    fn accumulate(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        let dense = self.layout.dense.clone();
        for (w, g) in self.workers.iter_mut().zip(grads) {
            let mut fresh = g.clone();
            for s in &dense {
                fresh[s.start..s.start + s.length].iter_mut().for_each(|v| *v = 0.0);
            }
            w.residual.accumulate(&fresh)?;
        }
        Ok(())
    }

    fn iteration(&mut self, it: u32, step: PhaseStep, grads: &[Vec<f64>]) -> Result<(Vec<NodeUpdate>, AeStep)> {
        if step.phase > 1 {
            self.accumulate(grads)?;
        }
        let ratio = match step.ratio {
            SparsityRatio::Full => 100.0,
            SparsityRatio::Percent(r) => r,
        };
        let kind = self.cfg.compressor.kind;
        match (self.cfg.topology.pattern, step.phase, kind) {
            (PatternKind::Ps, 1, _) => self.ps_dense(it, grads).map(|u| (u, AeStep::default())),
            (PatternKind::Ring, 1, _) => self.ring_dense(it, grads).map(|u| (u, AeStep::default())),
            (PatternKind::Ps, 2, CompressorKind::Lgc) => self.ps_topk(it, grads, ratio, true),
            (PatternKind::Ps, _, CompressorKind::SparseGd | CompressorKind::Dgc) => {
                self.ps_topk(it, grads, ratio, false)
            }
            (PatternKind::Ps, 3, CompressorKind::Lgc) => self.ps_lgc(it, grads, ratio).map(|u| (u, AeStep::default())),
            (PatternKind::Ring, _, CompressorKind::SparseGd | CompressorKind::Dgc) => {
                self.ring_topk(it, grads, ratio).map(|u| (u, AeStep::default()))
            }
            (PatternKind::Ring, p, CompressorKind::Lgc) => self.ring_lgc(it, grads, ratio, p),
            (_, p, k) => Err(Error::invalid(format!("no flow for phase {p} with {}", k.name()))),
        }
    }

    fn ps_dense(&mut self, it: u32, grads: &[Vec<f64>]) -> Result<Vec<NodeUpdate>> {
        let up: Vec<Vec<CompressedPayload>> = grads
            .iter()
            .enumerate()
            .map(|(k, g)| vec![self.payload(PayloadKind::Dense, it, k).with_values(g.clone())])
            .collect();
        let width = self.width;
        let master = self.master();
        let reducer = move |r: &[Vec<CompressedPayload>]| {
            let n = r[0][0].values.len();
            let mut sum = vec![0.0; n];
            for set in r {
                let p = find_kind(set, PayloadKind::Dense)?;
                if p.values.len() != n {
                    return Err(Error::protocol("dense payload lengths differ"));
                }
                sum.iter_mut().zip(&p.values).for_each(|(s, v)| *s += v);
            }
            let k = r.len() as f64;
            Ok(vec![CompressedPayload::new(PayloadKind::Dense, it, master)
                .with_width(width)
                .with_values(sum.into_iter().map(|s| s / k).collect())])
        };
        let down = ps_round(&mut self.net, &self.topo, it, &up, reducer)?;
        down.into_iter()
            .map(|set| {
                Ok(NodeUpdate {
                    dense: find_kind(&set, PayloadKind::Dense)?.values.clone(),
                    sparse: Vec::new(),
                })
            })
            .collect()
    }

    fn ring_dense(&mut self, it: u32, grads: &[Vec<f64>]) -> Result<Vec<NodeUpdate>> {
        let out = ring_allreduce(&mut self.net, &self.topo, it, 0, PayloadKind::Dense, grads, self.width)?;
        Ok(out
            .into_iter()
            .map(|dense| NodeUpdate {
                dense,
                sparse: Vec::new(),
            })
            .collect())
    }

    /// Dense first layers plus per-layer top-k of everything else. With
    /// `train_ae` the master also fits the autoencoder on what it received.
    fn ps_topk(&mut self, it: u32, grads: &[Vec<f64>], ratio: f64, train_ae: bool) -> Result<(Vec<NodeUpdate>, AeStep)> {
        let dense_segs = self.layout.dense.clone();
        let sparse_segs = self.layout.sparse();
        let n = self.layout.n;
        let mut up = Vec::with_capacity(self.k());
        for (k, g) in grads.iter().enumerate() {
            let mut set = Vec::new();
            if !dense_segs.is_empty() {
                set.push(self.payload(PayloadKind::Dense, it, k).with_values(gather(g, &dense_segs)));
            }
            let sel = self.workers[k].residual.select_layers(&sparse_segs, ratio)?;
            let parts: Vec<SparseSelection> = sel.iter().map(|s| s.global(n)).collect();
            let merged = SparseSelection::concat(&parts, n);
            set.push(
                self.payload(PayloadKind::Topk, it, k)
                    .with_values(merged.values)
                    .with_indices(merged.indices),
            );
            up.push(set);
        }

        let mut ae_step = AeStep::default();
        let width = self.width;
        let master = self.master();
        let k_nodes = self.k();
        let ae_segs = self.layout.ae.clone();
        let inner = self.cfg.compressor.inner_ratio;
        let weights = self.loss_weights;
        let chosen = train_ae.then(|| self.coord.random_range(0..k_nodes));
        let trainer = &mut self.trainer;
        let has_dense = !dense_segs.is_empty();
        let reducer = |r: &[Vec<CompressedPayload>]| -> Result<Vec<CompressedPayload>> {
            let mut out = Vec::new();
            if has_dense {
                let ds: Vec<&CompressedPayload> = r.iter().map(|s| find_kind(s, PayloadKind::Dense)).collect::<Result<_>>()?;
                let len = ds[0].values.len();
                let mut sum = vec![0.0; len];
                for p in &ds {
                    sum.iter_mut().zip(&p.values).for_each(|(s, v)| *s += v);
                }
                out.push(
                    CompressedPayload::new(PayloadKind::Dense, it, master)
                        .with_width(width)
                        .with_values(sum.into_iter().map(|s| s / k_nodes as f64).collect()),
                );
            }
            let tops: Vec<&CompressedPayload> = r.iter().map(|s| find_kind(s, PayloadKind::Topk)).collect::<Result<_>>()?;
            let sets: Vec<(&[usize], &[f64])> = tops.iter().map(|p| (&p.indices[..], &p.values[..])).collect();
            let mean = sparse_mean(&sets, k_nodes);
            out.push(
                CompressedPayload::new(PayloadKind::Topk, it, master)
                    .with_width(width)
                    .with_indices(mean.iter().map(|p| p.0).collect())
                    .with_values(mean.iter().map(|p| p.1).collect()),
            );
            if let (Some(i), Some(t)) = (chosen, trainer.as_mut()) {
                let ae_part = |p: &CompressedPayload| -> SparseSelection {
                    let (idx, val): (Vec<usize>, Vec<f64>) = p
                        .indices
                        .iter()
                        .zip(&p.values)
                        .filter(|(&j, _)| Layout::in_segments(&ae_segs, j))
                        .map(|(&j, &v)| (j, v))
                        .unzip();
                    SparseSelection {
                        threshold: 0.0,
                        indices: idx,
                        values: val,
                        source_length: n,
                    }
                };
                let ae_sets: Vec<SparseSelection> = tops.iter().map(|p| ae_part(p)).collect();
                let frame = ae_sets[i].indices.clone();
                let inv = 1.0 / rms(&ae_sets[i].values);
                let mut targets = Vec::with_capacity(k_nodes);
                let mut innovations = Vec::with_capacity(k_nodes);
                for s in &ae_sets {
                    targets.push(scaled(&values_at(&s.indices, &s.values, &frame), inv));
                    let inn = layer_innovations(s, &ae_segs, inner, n)?;
                    innovations.push(frame_innovation(&inn.indices, &inn.values, &frame, inv).0);
                }
                let l = ae_train_step_ps(&mut t.params, &mut t.opt, &targets, &innovations, i, weights)?;
                ae_step = AeStep {
                    rec: Some(l.rec),
                    sim: Some(l.sim),
                };
            }
            Ok(out)
        };
        let down = ps_round(&mut self.net, &self.topo, it, &up, reducer)?;
        let updates = down
            .into_iter()
            .map(|set| {
                let dense = if has_dense {
                    scatter(&find_kind(&set, PayloadKind::Dense)?.values, &dense_segs, n)?
                } else {
                    vec![0.0; n]
                };
                let t = find_kind(&set, PayloadKind::Topk)?;
                Ok(NodeUpdate {
                    dense,
                    sparse: t.indices.iter().copied().zip(t.values.iter().copied()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((updates, ae_step))
    }

    /// Sends the trained encoder to the designated worker.
    fn ps_transfer_encoder(&mut self, it: u32) -> Result<()> {
        let t = self.trainer.as_ref().ok_or_else(|| Error::protocol("no autoencoder to transfer"))?;
        let d = self.cfg.topology.designated_node;
        let payload = self
            .payload(PayloadKind::Weights, it, self.k())
            .with_values(t.params.encoder.params_flat());
        let tag = Tag::new(it, DOWNLINK_ROUND);
        self.net.send_payload(self.k(), d, tag, &payload)?;
        let got = self.net.recv_payloads(self.k(), d, tag)?;
        let mut local = AutoencoderParams::new(AeVariant::Ps, self.mu, 1)?;
        local.encoder.set_params_flat(&find_kind(&got, PayloadKind::Weights)?.values)?;
        self.workers[d].ae = Some(local);
        Ok(())
    }

    fn ps_lgc(&mut self, it: u32, grads: &[Vec<f64>], ratio: f64) -> Result<Vec<NodeUpdate>> {
        let n = self.layout.n;
        let dense_segs = self.layout.dense.clone();
        let topk_segs = self.layout.topk.clone();
        let ae_segs = self.layout.ae.clone();
        let inner = self.cfg.compressor.inner_ratio;
        let d = self.cfg.topology.designated_node;
        let mut up = Vec::with_capacity(self.k());
        let mut sent_innovation = Vec::with_capacity(self.k());
        for (k, g) in grads.iter().enumerate() {
            let mut set = Vec::new();
            if !dense_segs.is_empty() {
                set.push(self.payload(PayloadKind::Dense, it, k).with_values(gather(g, &dense_segs)));
            }
            if !topk_segs.is_empty() {
                let sel = self.workers[k].residual.select_layers(&topk_segs, ratio)?;
                let parts: Vec<SparseSelection> = sel.iter().map(|s| s.global(n)).collect();
                let merged = SparseSelection::concat(&parts, n);
                set.push(
                    self.payload(PayloadKind::Topk, it, k)
                        .with_values(merged.values)
                        .with_indices(merged.indices),
                );
            }
            let picked = merge_selections(&peek_selection(&self.workers[k].residual, &ae_segs, ratio)?, n);
            if k == d {
                let ae = self.workers[k]
                    .ae
                    .as_ref()
                    .ok_or_else(|| Error::protocol("designated worker has no encoder"))?;
                let s = rms(&picked.values);
                let code = encode_common(&scaled(&picked.values, 1.0 / s), ae)?;
                let mut values = vec![s];
                values.extend_from_slice(code.data());
                set.push(
                    self.payload(PayloadKind::Common, it, k)
                        .with_values(values)
                        .with_indices(picked.indices.clone()),
                );
            }
            let inn = layer_innovations(&picked, &ae_segs, inner, n)?;
            self.workers[k].residual.take(&inn.indices)?;
            set.push(
                self.payload(PayloadKind::Innovation, it, k)
                    .with_values(inn.values.clone())
                    .with_indices(inn.indices.clone()),
            );
            sent_innovation.push(inn.indices);
            up.push(set);
        }

        let width = self.width;
        let master = self.master();
        let k_nodes = self.k();
        let code_len = crate::codec::code_length(self.mu);
        let trainer = self.trainer.as_ref().ok_or_else(|| Error::protocol("master has no autoencoder"))?;
        let has_dense = !dense_segs.is_empty();
        let has_topk = !topk_segs.is_empty();
        let reducer = |r: &[Vec<CompressedPayload>]| -> Result<Vec<CompressedPayload>> {
            let mut out = Vec::new();
            if has_dense {
                let mut sum: Option<Vec<f64>> = None;
                for set in r {
                    let p = find_kind(set, PayloadKind::Dense)?;
                    match &mut sum {
                        None => sum = Some(p.values.clone()),
                        Some(s) => s.iter_mut().zip(&p.values).for_each(|(a, b)| *a += b),
                    }
                }
                let mean = sum.unwrap_or_default().into_iter().map(|s| s / k_nodes as f64).collect();
                out.push(CompressedPayload::new(PayloadKind::Dense, it, master).with_width(width).with_values(mean));
            }
            let commons: Vec<&CompressedPayload> = r.iter().flat_map(|s| find_kinds(s, PayloadKind::Common)).collect();
            let [common] = commons.as_slice() else {
                return Err(Error::protocol(format!("expected one common payload, got {}", commons.len())));
            };
            if common.values.len() != 1 + crate::codec::CODE_CHANNELS * code_len {
                return Err(Error::protocol("common payload has the wrong code size"));
            }
            let frame = &common.indices;
            let s = common.values[0];
            let code = CommonCode::new(code_len, common.values[1..].to_vec())?;
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (k, set) in r.iter().enumerate() {
                if has_topk {
                    let t = find_kind(set, PayloadKind::Topk)?;
                    for (&i, &v) in t.indices.iter().zip(&t.values) {
                        *acc.entry(i).or_default() += v;
                    }
                }
                let inn = find_kind(set, PayloadKind::Innovation)?;
                let (local, outside) = frame_innovation(&inn.indices, &inn.values, frame, 1.0 / s);
                let recon = decode_ps(&code, &local, k, &trainer.params)?;
                for (&i, &v) in frame.iter().zip(&recon) {
                    *acc.entry(i).or_default() += v * s;
                }
                for (i, v) in outside {
                    *acc.entry(i).or_default() += v;
                }
            }
            out.push(
                CompressedPayload::new(PayloadKind::Topk, it, master)
                    .with_width(width)
                    .with_indices(acc.keys().copied().collect())
                    .with_values(acc.values().map(|v| v / k_nodes as f64).collect()),
            );
            out.push(
                CompressedPayload::new(PayloadKind::Common, it, master)
                    .with_width(width)
                    .with_indices(frame.clone()),
            );
            Ok(out)
        };
        let down = ps_round(&mut self.net, &self.topo, it, &up, reducer)?;
        let mut updates = Vec::with_capacity(k_nodes);
        for (k, set) in down.into_iter().enumerate() {
            let frame = &find_kind(&set, PayloadKind::Common)?.indices;
            self.workers[k].residual.take(frame)?;
            let dense = if has_dense {
                scatter(&find_kind(&set, PayloadKind::Dense)?.values, &dense_segs, n)?
            } else {
                vec![0.0; n]
            };
            let t = find_kind(&set, PayloadKind::Topk)?;
            updates.push(NodeUpdate {
                dense,
                sparse: t.indices.iter().copied().zip(t.values.iter().copied()).collect(),
            });
        }
        Ok(updates)
    }

    fn ring_dense_part(&mut self, it: u32, round: &mut u32, grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.layout.n;
        let segs = self.layout.dense.clone();
        if segs.is_empty() {
            return Ok(vec![vec![0.0; n]; self.k()]);
        }
        let parts: Vec<Vec<f64>> = grads.iter().map(|g| gather(g, &segs)).collect();
        let out = ring_allreduce(&mut self.net, &self.topo, it, *round, PayloadKind::Dense, &parts, self.width)?;
        *round += ring_rounds(self.k());
        out.iter().map(|v| scatter(v, &segs, n)).collect()
    }

    fn ring_topk(&mut self, it: u32, grads: &[Vec<f64>], ratio: f64) -> Result<Vec<NodeUpdate>> {
        let n = self.layout.n;
        let mut round = 0;
        let dense = self.ring_dense_part(it, &mut round, grads)?;
        let sparse_segs = self.layout.sparse();
        let mut sets = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let sel = self.workers[k].residual.select_layers(&sparse_segs, ratio)?;
            let parts: Vec<SparseSelection> = sel.iter().map(|s| s.global(n)).collect();
            let merged = SparseSelection::concat(&parts, n);
            let values = merged.values.iter().map(|&v| self.width.round(v)).collect();
            sets.push(vec![self
                .payload(PayloadKind::Topk, it, k)
                .with_values(values)
                .with_indices(merged.indices)]);
        }
        let gathered = ring_allgather(&mut self.net, &self.topo, it, round, &sets)?;
        let k_nodes = self.k();
        gathered
            .into_iter()
            .zip(dense)
            .map(|(all, dense)| {
                let tops: Vec<(&[usize], &[f64])> = all
                    .iter()
                    .map(|s| find_kind(s, PayloadKind::Topk).map(|p| (&p.indices[..], &p.values[..])))
                    .collect::<Result<_>>()?;
                Ok(NodeUpdate {
                    dense,
                    sparse: sparse_mean(&tops, k_nodes),
                })
            })
            .collect()
    }

    /// Ring flow of phases 2 and 3: a random node shares its top-k positions,
    /// every node contributes its residual at those positions.
    fn ring_lgc(&mut self, it: u32, grads: &[Vec<f64>], ratio: f64, phase: u8) -> Result<(Vec<NodeUpdate>, AeStep)> {
        let n = self.layout.n;
        let k_nodes = self.k();
        let r = self.coord.random_range(0..k_nodes);
        let sparse_segs = self.layout.sparse();
        let frame = merge_selections(&peek_selection(&self.workers[r].residual, &sparse_segs, ratio)?, n).indices;

        let mut round = 0;
        let tag = Tag::new(it, round);
        let index_payload = self.payload(PayloadKind::Innovation, it, r).with_indices(frame.clone());
        for peer in (0..k_nodes).filter(|&p| p != r) {
            self.net.send_payload(r, peer, tag, &index_payload)?;
        }
        for peer in (0..k_nodes).filter(|&p| p != r) {
            let got = self.net.recv_payloads(r, peer, tag)?;
            if find_kind(&got, PayloadKind::Innovation)?.indices != frame {
                return Err(Error::protocol("index broadcast altered in transit"));
            }
        }
        round += 1;

        let dense = self.ring_dense_part(it, &mut round, grads)?;
        let taken: Vec<SparseSelection> = self
            .workers
            .iter_mut()
            .map(|w| w.residual.take(&frame))
            .collect::<Result<_>>()?;
        let is_ae: Vec<bool> = frame.iter().map(|&i| Layout::in_segments(&self.layout.ae, i)).collect();
        let split = |sel: &SparseSelection, want: bool| -> Vec<f64> {
            sel.values.iter().zip(&is_ae).filter(|(_, &a)| a == want).map(|(&v, _)| v).collect()
        };
        let topk_idx: Vec<usize> = frame.iter().zip(&is_ae).filter(|(_, &a)| !a).map(|(&i, _)| i).collect();
        let ae_idx: Vec<usize> = frame.iter().zip(&is_ae).filter(|(_, &a)| a).map(|(&i, _)| i).collect();
        let mut sparse: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k_nodes];
        let mut ae_step = AeStep::default();

        if !topk_idx.is_empty() {
            let vals: Vec<Vec<f64>> = taken.iter().map(|s| split(s, false)).collect();
            let out = ring_allreduce(&mut self.net, &self.topo, it, round, PayloadKind::Topk, &vals, self.width)?;
            round += ring_rounds(k_nodes);
            for (s, v) in sparse.iter_mut().zip(out) {
                s.extend(topk_idx.iter().copied().zip(v));
            }
        }

        let ae_vals: Vec<Vec<f64>> = taken.iter().map(|s| split(s, true)).collect();
        if phase == 2 {
            let out = ring_allreduce(&mut self.net, &self.topo, it, round, PayloadKind::Topk, &ae_vals, self.width)?;
            round += ring_rounds(k_nodes);
            for (s, v) in sparse.iter_mut().zip(out) {
                s.extend(ae_idx.iter().copied().zip(v));
            }
            let tag = Tag::new(it, round);
            for k in 1..k_nodes {
                let p = self.payload(PayloadKind::Topk, it, k).with_values(ae_vals[k].clone());
                self.net.send_payload(k, 0, tag, &p)?;
            }
            let mut inputs = vec![scaled(&ae_vals[0], 1.0 / rms(&ae_vals[0]))];
            for k in 1..k_nodes {
                let got = self.net.recv_payloads(k, 0, tag)?;
                let v = &find_kind(&got, PayloadKind::Topk)?.values;
                inputs.push(scaled(v, 1.0 / rms(v)));
            }
            round += 1;
            let t = self.trainer.as_mut().ok_or_else(|| Error::protocol("node 0 has no autoencoder"))?;
            ae_step.rec = Some(ae_train_step_rar(&mut t.params, &mut t.opt, &inputs)?);
            if it + 1 == self.cfg.schedule.phase1_iters + self.cfg.schedule.phase2_iters {
                self.ring_transfer_autoencoder(it, round)?;
            }
        } else {
            let mut codes = Vec::with_capacity(k_nodes);
            for (w, v) in self.workers.iter().zip(&ae_vals) {
                let ae = w.ae.as_ref().ok_or_else(|| Error::protocol("node has no autoencoder"))?;
                let s = rms(v);
                let mut c = vec![s];
                c.extend_from_slice(encode_common(&scaled(v, 1.0 / s), ae)?.data());
                codes.push(c);
            }
            let out = ring_allreduce(&mut self.net, &self.topo, it, round, PayloadKind::Common, &codes, self.width)?;
            let code_len = crate::codec::code_length(self.mu);
            for ((s, mean), w) in sparse.iter_mut().zip(out).zip(&self.workers) {
                let ae = w.ae.as_ref().expect("checked above");
                let code = CommonCode::new(code_len, mean[1..].to_vec())?;
                let recon = decode_rar(&code, ae)?;
                s.extend(ae_idx.iter().copied().zip(recon.into_iter().map(|v| v * mean[0])));
            }
        }

        let updates = dense
            .into_iter()
            .zip(sparse)
            .map(|(dense, mut sparse)| {
                sparse.sort_by_key(|p| p.0);
                NodeUpdate { dense, sparse }
            })
            .collect();
        Ok((updates, ae_step))
    }

    /// Node 0 ships the whole autoencoder to every peer; every node, node 0
    /// included, then holds the wire-rounded copy.
    fn ring_transfer_autoencoder(&mut self, it: u32, round: u32) -> Result<()> {
        let t = self.trainer.as_ref().ok_or_else(|| Error::protocol("no autoencoder to transfer"))?;
        let flat = t.params.params_flat();
        let payload = self.payload(PayloadKind::Weights, it, 0).with_values(flat.clone());
        let tag = Tag::new(it, round);
        for peer in 1..self.k() {
            self.net.send_payload(0, peer, tag, &payload)?;
        }
        let mut template = t.params.clone();
        template.set_params_flat(&flat.iter().map(|&v| self.width.round(v)).collect::<Vec<_>>())?;
        self.workers[0].ae = Some(template.clone());
        for peer in 1..self.k() {
            let got = self.net.recv_payloads(0, peer, tag)?;
            let mut local = template.clone();
            local.set_params_flat(&find_kind(&got, PayloadKind::Weights)?.values)?;
            self.workers[peer].ae = Some(local);
        }
        Ok(())
    }

    fn apply(&mut self, it: u32, updates: &[NodeUpdate], phase: u8) -> Result<()> {
        let lr = self.cfg.optimizer.lr;
        let mom = self.cfg.optimizer.momentum;
        let dense_segs = self.dense_segments(phase);
        for (w, u) in self.workers.iter_mut().zip(updates) {
            if u.dense.len() != w.params.len() {
                return Err(Error::shape("dense update does not match the model"));
            }
            for s in &dense_segs {
                let r = s.start..s.start + s.length;
                sgd_momentum_step(&mut w.params[r.clone()], &u.dense[r.clone()], &mut w.momentum[r], lr, mom)?;
            }
            for &(i, v) in &u.sparse {
                let p = w
                    .params
                    .get_mut(i)
                    .ok_or_else(|| Error::protocol(format!("update index {i} out of range")))?;
                *p -= lr * v;
            }
        }
        if let Some(i) = self.workers[0].params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("parameter {i} is not finite after iteration {it} (phase {phase})")));
        }
        let first = &self.workers[0].params;
        if self.workers.iter().any(|w| w.params != *first) {
            return Err(Error::protocol(format!("worker weights diverged after a phase {phase} update")));
        }
        Ok(())
    }
}

/// Bytes an uncompressed exchange of `n` values sends in one iteration.
fn dense_reference(topo: &Topology, n: usize, width: ValueWidth) -> Result<RateLedger> {
    let mut net = SimNetwork::new(topo.endpoints());
    let k = topo.nodes();
    match topo.master_id() {
        Some(master) => {
            let up: Vec<Vec<CompressedPayload>> = (0..k)
                .map(|node| {
                    vec![CompressedPayload::new(PayloadKind::Dense, 0, node as u16)
                        .with_width(width)
                        .with_values(vec![0.0; n])]
                })
                .collect();
            ps_round(&mut net, topo, 0, &up, crate::comms::dense_mean_reducer(0, master as u16))?;
        }
        None => {
            let zeros = vec![vec![0.0; n]; k];
            ring_allreduce(&mut net, topo, 0, 0, PayloadKind::Dense, &zeros, width)?;
        }
    }
    Ok(net.into_ledger())
}

pub fn run_experiment(cfg: &TrainConfig) -> Result<RunOutput> {
    run_experiment_with(cfg, RunOptions::default())
}

pub fn run_experiment_with(cfg: &TrainConfig, opts: RunOptions) -> Result<RunOutput> {
    let mut model = ModelSpec::convnet5_mini()?;
    let mut violations = cfg.violations(model.layer_count());
    let policies = resolve_policies(model.layer_count(), &cfg.layer_policy)?;
    if cfg.compressor.kind == CompressorKind::Lgc && !policies.contains(&LayerPolicy::TopkPlusAe) {
        violations.push("layer_policy: lgc needs at least one topk_plus_ae layer".into());
    }
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let k = cfg.topology.nodes;
    let width: ValueWidth = cfg.compressor.wire.into();
    let schedule = PhaseSchedule::from_config(cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.init(&mut rng);
    let data = Dataset::generate(cfg.dataset.train_samples, cfg.dataset.eval_samples, cfg.dataset.noise, cfg.seed);
    let mut sampler = ShardSampler::new(data.train.len(), cfg.seed);

    let pick = |p: LayerPolicy| -> Vec<LayerSegment> {
        model
            .layers
            .iter()
            .zip(&policies)
            .filter(|(_, &q)| q == p)
            .map(|(s, _)| *s)
            .collect()
    };
    let layout = Layout {
        n: model.param_count(),
        dense: pick(LayerPolicy::Dense),
        topk: pick(LayerPolicy::TopkOnly),
        ae: pick(LayerPolicy::TopkPlusAe),
        all: model.layers.clone(),
    };
    let mu: usize = layout.ae.iter().map(|s| selection_count(s.length, cfg.compressor.ratio)).sum();

    let topo = match cfg.topology.pattern {
        PatternKind::Ps => Topology::parameter_server(k)?,
        PatternKind::Ring => Topology::ring(k)?,
    };
    let mode = match cfg.compressor.kind {
        CompressorKind::SparseGd | CompressorKind::None => ResidualMode::Plain,
        CompressorKind::Dgc | CompressorKind::Lgc => ResidualMode::Momentum {
            coefficient: cfg.compressor.momentum_correction,
        },
    };
    let init = model.network.params_flat();
    let workers = (0..k)
        .map(|_| Worker {
            params: init.clone(),
            momentum: vec![0.0; init.len()],
            residual: ResidualState::new(init.len(), mode),
            ae: None,
        })
        .collect();
    let trainer = if cfg.compressor.kind == CompressorKind::Lgc {
        let variant = match cfg.topology.pattern {
            PatternKind::Ps => AeVariant::Ps,
            PatternKind::Ring => AeVariant::Rar,
        };
        let mut ae_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xae00_0000);
        let params = AutoencoderParams::init_random(variant, mu, k, &mut ae_rng)?;
        let clip = Some(cfg.autoencoder.clip_norm).filter(|&c| c > 0.0);
        let opt = AeOptimizer::new(&params, cfg.autoencoder.lr, cfg.autoencoder.momentum)?.with_clip_norm(clip)?;
        Some(AeTrainer { params, opt })
    } else {
        None
    };
    let mut run = Run {
        cfg,
        width,
        net: SimNetwork::new(topo.endpoints()),
        topo,
        layout,
        workers,
        trainer,
        coord: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc00d),
        mu,
        loss_weights: PsLossWeights {
            lambda1: cfg.autoencoder.lambda1,
            lambda2: cfg.autoencoder.lambda2,
        },
    };

    let template = dense_reference(&run.topo, run.layout.n, width)?;
    let mut baseline = RateLedger::new();
    let mut metrics = MetricsSeries::default();
    let mut gradients = cfg
        .record_gradients
        .then(|| GradientDump::new(k, model.layers.iter().map(|s| s.length).collect()));
    let mut trajectory = Vec::new();
    let mut net = model.network.clone();
    let phase2_end = cfg.schedule.phase1_iters + cfg.schedule.phase2_iters;

    for it in 0..cfg.schedule.total_iters {
        let step = schedule.step(it);
        let shards = sampler.next_shards(k, cfg.dataset.batch_per_node);
        let mut losses = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k);
        for (w, shard) in run.workers.iter().zip(&shards) {
            net.set_params_flat(&w.params)?;
            let (l, g) = batch_gradient(&net, &data.train, shard)?;
            losses.push(l);
            grads.push(g);
        }
        if let Some(d) = gradients.as_mut() {
            d.push_flat(&grads)?;
        }
        let before = run.net.ledger().clone();
        let (updates, ae) = run.iteration(it, step, &grads)?;
        if cfg.compressor.kind == CompressorKind::Lgc
            && cfg.topology.pattern == PatternKind::Ps
            && it + 1 == phase2_end
        {
            run.ps_transfer_encoder(it)?;
        }
        run.apply(it, &updates, step.phase)?;
        baseline.merge(&template.relabeled(it));

        let eval_acc = if it % cfg.eval_every == 0 || it + 1 == cfg.schedule.total_iters {
            net.set_params_flat(&run.workers[0].params)?;
            Some(accuracy(&net, &data.eval)?)
        } else {
            None
        };
        for (node, &loss) in losses.iter().enumerate() {
            let sent = run.net.ledger().sent_by(node) - before.sent_by(node);
            metrics.rows.push(MetricRow {
                iter: it,
                phase: step.phase,
                node,
                train_loss: loss,
                eval_acc,
                uplink_bytes: sent,
                ae_rec_loss: ae.rec,
                ae_sim_loss: ae.sim,
            });
        }
        if opts.keep_trajectory {
            trajectory.push(run.workers[0].params.clone());
        }
    }

    let ledger = run.net.ledger().clone();
    let headline = schedule.final_phase_range();
    let per_node_cr = (0..k)
        .map(|node| {
            if ledger.uplink_bytes(node, &headline, None) == 0 {
                Ok(f64::INFINITY)
            } else {
                compression_ratio(&ledger, &baseline, node, headline.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let dual_cr = if cfg.compressor.kind == CompressorKind::Lgc && cfg.topology.pattern == PatternKind::Ps {
        Some(dual_compression_ratio(
            &ledger,
            &baseline,
            cfg.topology.designated_node,
            k,
            headline.clone(),
        )?)
    } else {
        None
    };
    let final_accuracy = metrics.final_eval_accuracy().unwrap_or(0.0);
    let summary = RunSummary {
        final_accuracy,
        headline_iterations: headline,
        per_node_cr,
        dual_cr,
        total_bytes: ledger.total_bytes(),
        autoencoder_input: if cfg.compressor.kind == CompressorKind::Lgc { mu } else { 0 },
    };
    Ok(RunOutput {
        metrics,
        ledger,
        baseline,
        final_params: run.workers[0].params.clone(),
        trajectory,
        summary,
        gradients,
    })
}
