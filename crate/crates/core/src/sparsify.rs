//! Top-k selection, innovation extraction, error-feedback residuals and
//! sparsity schedules.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSegment {
    pub layer_id: usize,
    pub start: usize,
    pub length: usize,
}

/// A flattened gradient with contiguous per-layer segments covering `[0, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layers: Vec<LayerSegment>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layers: Vec<LayerSegment>) -> Result<Self> {
        let mut next = 0;
        for seg in &layers {
            if seg.start != next {
                return Err(Error::shape(format!(
                    "layer {} starts at {}, expected {next}",
                    seg.layer_id, seg.start
                )));
            }
            next += seg.length;
        }
        if next != values.len() {
            return Err(Error::shape(format!(
                "layer segments cover {next} values, gradient has {}",
                values.len()
            )));
        }
        Ok(Self { values, layers })
    }

    pub fn from_layer_sizes(values: Vec<f64>, sizes: &[usize]) -> Result<Self> {
        Self::new(values, layout(sizes))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layers(&self) -> &[LayerSegment] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, index: usize) -> &[f64] {
        let seg = self.layers[index];
        &self.values[seg.start..seg.start + seg.length]
    }
}

/// Contiguous segments for layers of the given sizes, ids `0..`.
pub fn layout(sizes: &[usize]) -> Vec<LayerSegment> {
    let mut start = 0;
    sizes
        .iter()
        .enumerate()
        .map(|(layer_id, &length)| {
            let seg = LayerSegment { layer_id, start, length };
            start += length;
            seg
        })
        .collect()
}

/// Selected entries of a source vector, indices strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSelection {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub threshold: f64,
    pub source_length: usize,
}

impl SparseSelection {
    pub fn empty(source_length: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            threshold: 0.0,
            source_length,
        }
    }

    /// Builds a selection from explicit positions of `source`.
    pub fn gather(source: &[f64], indices: &[usize]) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("selection indices must be strictly increasing"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= source.len()) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for length {}",
                source.len()
            )));
        }
        let values: Vec<f64> = indices.iter().map(|&i| source[i]).collect();
        Ok(Self {
            threshold: min_magnitude(&values),
            indices: indices.to_vec(),
            values,
            source_length: source.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn densify(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.source_length];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            dense[i] = v;
        }
        dense
    }

    /// Re-bases the indices by `offset` into a source of `source_length`.
    pub fn shifted(&self, offset: usize, source_length: usize) -> Self {
        Self {
            indices: self.indices.iter().map(|i| i + offset).collect(),
            values: self.values.clone(),
            threshold: self.threshold,
            source_length,
        }
    }

    /// Concatenates selections whose index ranges are already disjoint and ordered.
    pub fn concat(parts: &[SparseSelection], source_length: usize) -> Self {
        let indices: Vec<usize> = parts.iter().flat_map(|p| p.indices.iter().copied()).collect();
        let values: Vec<f64> = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        Self {
            threshold: min_magnitude(&values),
            indices,
            values,
            source_length,
        }
    }
}

fn min_magnitude(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).reduce(f64::min).unwrap_or(0.0)
}

/// `max(1, floor(ratio/100 * len))`, capped at `len`.
pub fn selection_count(len: usize, ratio_percent: f64) -> usize {
    let m = (ratio_percent / 100.0 * len as f64).floor() as usize;
    m.clamp(1, len.max(1))
}

fn check_ratio(ratio_percent: f64) -> Result<()> {
    if !(ratio_percent > 0.0 && ratio_percent <= 100.0) {
        return Err(Error::invalid(format!(
            "ratio must lie in (0, 100], got {ratio_percent}"
        )));
    }
    Ok(())
}

/// Positions of the `m` largest magnitudes; ties go to the lower index.
fn top_positions(values: &[f64], m: usize) -> Vec<usize> {
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    if m < order.len() {
        order.select_nth_unstable_by(m, by_rank);
        order.truncate(m);
    }
    order.sort_unstable();
    order
}

/// The `ratio_percent`% largest-magnitude entries of `segment`.
pub fn topk_select(segment: &[f64], ratio_percent: f64) -> Result<SparseSelection> {
    check_ratio(ratio_percent)?;
    if segment.is_empty() {
        return Err(Error::invalid("cannot select from an empty segment"));
    }
    let m = selection_count(segment.len(), ratio_percent);
    SparseSelection::gather(segment, &top_positions(segment, m))
}

/// The top `inner_ratio_percent`% of an existing selection, in the original coordinates.
pub fn extract_innovation(selection: &SparseSelection, inner_ratio_percent: f64) -> Result<SparseSelection> {
    check_ratio(inner_ratio_percent)?;
    if selection.is_empty() {
        return Err(Error::invalid("cannot extract innovation from an empty selection"));
    }
    let m = selection_count(selection.len(), inner_ratio_percent);
    let keep = top_positions(&selection.values, m);
    let values: Vec<f64> = keep.iter().map(|&k| selection.values[k]).collect();
    Ok(SparseSelection {
        indices: keep.iter().map(|&k| selection.indices[k]).collect(),
        threshold: min_magnitude(&values),
        values,
        source_length: selection.source_length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidualMode {
    Plain,
    /// Momentum correction: `u = c*u + g; acc += u`, selection reads `acc`.
    Momentum { coefficient: f64 },
}

/// Per-node error-feedback state over the flattened model gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    accumulated: Vec<f64>,
    momentum_buffer: Vec<f64>,
    mode: ResidualMode,
}

/// One layer's selection from [`ResidualState::error_feedback_step`], indices local to the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    pub segment: LayerSegment,
    pub selection: SparseSelection,
}

impl LayerSelection {
    pub fn global(&self, total: usize) -> SparseSelection {
        self.selection.shifted(self.segment.start, total)
    }
}

impl ResidualState {
    pub fn new(length: usize, mode: ResidualMode) -> Self {
        Self {
            accumulated: vec![0.0; length],
            momentum_buffer: vec![0.0; length],
            mode,
        }
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum_buffer
    }

    pub fn mode(&self) -> ResidualMode {
        self.mode
    }

    /// Folds a fresh gradient into the residual.
    pub fn accumulate(&mut self, fresh: &[f64]) -> Result<()> {
        if fresh.len() != self.accumulated.len() {
            return Err(Error::shape(format!(
                "gradient has {} values, residual has {}",
                fresh.len(),
                self.accumulated.len()
            )));
        }
        match self.mode {
            ResidualMode::Plain => {
                for (a, g) in self.accumulated.iter_mut().zip(fresh) {
                    *a = g + *a;
                }
            }
            ResidualMode::Momentum { coefficient } => {
                for ((a, u), g) in self
                    .accumulated
                    .iter_mut()
                    .zip(self.momentum_buffer.iter_mut())
                    .zip(fresh)
                {
                    *u = coefficient * *u + g;
                    *a += *u;
                }
            }
        }
        Ok(())
    }

    /// Removes and returns the accumulated values at `indices` (global, ascending).
    pub fn take(&mut self, indices: &[usize]) -> Result<SparseSelection> {
        let sel = SparseSelection::gather(&self.accumulated, indices)?;
        for &i in indices {
            self.accumulated[i] = 0.0;
            self.momentum_buffer[i] = 0.0;
        }
        Ok(sel)
    }

    /// Adds `values` back at `indices`, e.g. what a lossy stage failed to deliver.
    pub fn restore(&mut self, indices: &[usize], values: &[f64]) -> Result<()> {
        if indices.len() != values.len() {
            return Err(Error::shape(format!("{} indices for {} values", indices.len(), values.len())));
        }
        for (&i, &v) in indices.iter().zip(values) {
            let slot = self
                .accumulated
                .get_mut(i)
                .ok_or_else(|| Error::shape(format!("index {i} out of range")))?;
            *slot += v;
        }
        Ok(())
    }

    /// Removes and returns everything that has accumulated.
    pub fn take_all(&mut self) -> Vec<f64> {
        std::mem::replace(&mut self.accumulated, vec![0.0; self.momentum_buffer.len()])
    }

    /// Per-layer top-k over `fresh + residual`; unsent mass stays in the residual.
    pub fn error_feedback_step(
        &mut self,
        fresh: &GradientVector,
        ratio_percent: f64,
    ) -> Result<Vec<LayerSelection>> {
        check_ratio(ratio_percent)?;
        self.accumulate(fresh.values())?;
        self.select_layers(fresh.layers(), ratio_percent)
    }

    /// Top-k on the listed layers of the current residual, then removes what was selected.
    pub fn select_layers(
        &mut self,
        segments: &[LayerSegment],
        ratio_percent: f64,
    ) -> Result<Vec<LayerSelection>> {
        let mut out = Vec::with_capacity(segments.len());
        for &segment in segments {
            let slice = &self.accumulated[segment.start..segment.start + segment.length];
            let local = topk_select(slice, ratio_percent)?;
            for &i in &local.indices {
                self.accumulated[segment.start + i] = 0.0;
                self.momentum_buffer[segment.start + i] = 0.0;
            }
            out.push(LayerSelection { segment, selection: local });
        }
        Ok(out)
    }

    /// Top-k indices of the listed layers without modifying the residual (global coordinates).
    pub fn peek_top_indices(&self, segments: &[LayerSegment], ratio_percent: f64) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for seg in segments {
            let slice = &self.accumulated[seg.start..seg.start + seg.length];
            let local = topk_select(slice, ratio_percent)?;
            out.extend(local.indices.iter().map(|i| i + seg.start));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleStrategy {
    Fixed,
    ExponentialRampup,
    WarmupThenFixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub strategy: ScheduleStrategy,
    /// Target density in percent.
    pub final_ratio: f64,
    /// Density at iteration 0 for the exponential ramp.
    pub start_ratio: f64,
    pub ramp_iters: u64,
    pub warmup_iters: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityRatio {
    /// No sparsification.
    Full,
    Percent(f64),
}

impl SparsitySchedule {
    pub fn fixed(final_ratio: f64) -> Self {
        Self {
            strategy: ScheduleStrategy::Fixed,
            final_ratio,
            start_ratio: final_ratio,
            ramp_iters: 0,
            warmup_iters: 0,
        }
    }

    pub fn warmup(warmup_iters: u64, final_ratio: f64) -> Self {
        Self {
            strategy: ScheduleStrategy::WarmupThenFixed,
            warmup_iters,
            ..Self::fixed(final_ratio)
        }
    }

    pub fn exponential(start_ratio: f64, final_ratio: f64, ramp_iters: u64) -> Self {
        Self {
            strategy: ScheduleStrategy::ExponentialRampup,
            start_ratio,
            ramp_iters,
            ..Self::fixed(final_ratio)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let valid = |r: f64| r > 0.0 && r <= 100.0;
        if !valid(self.final_ratio) {
            return Err(Error::config(format!(
                "final_ratio must lie in (0, 100], got {}",
                self.final_ratio
            )));
        }
        if self.strategy == ScheduleStrategy::ExponentialRampup && !valid(self.start_ratio) {
            return Err(Error::config(format!(
                "start_ratio must lie in (0, 100], got {}",
                self.start_ratio
            )));
        }
        Ok(())
    }

    pub fn ratio_at(&self, iteration: u64) -> SparsityRatio {
        match self.strategy {
            ScheduleStrategy::Fixed => SparsityRatio::Percent(self.final_ratio),
            ScheduleStrategy::WarmupThenFixed if iteration < self.warmup_iters => SparsityRatio::Full,
            ScheduleStrategy::WarmupThenFixed => SparsityRatio::Percent(self.final_ratio),
            ScheduleStrategy::ExponentialRampup => {
                if iteration >= self.ramp_iters {
                    return SparsityRatio::Percent(self.final_ratio);
                }
                let t = iteration as f64 / self.ramp_iters as f64;
                let r = self.start_ratio * (self.final_ratio / self.start_ratio).powf(t);
                SparsityRatio::Percent(r)
            }
        }
    }
}

pub fn sparsity_schedule(iteration: u64, schedule: &SparsitySchedule) -> Result<SparsityRatio> {
    schedule.validate()?;
    Ok(schedule.ratio_at(iteration))
}
