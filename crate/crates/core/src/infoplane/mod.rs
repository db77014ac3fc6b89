//! Histogram entropy and mutual information between gradient streams.

pub mod dump;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub use dump::GradientDump;

pub const DEFAULT_BITS: u32 = 8;

/// Quantizer depth used per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Fixed(u32),
    /// About `sqrt(n)` levels for an `n`-value stream, capped at `max` bits,
    /// so the joint histogram has roughly one sample per cell or more.
    Adaptive { max: u32 },
}

impl BitDepth {
    pub fn for_length(self, n: usize) -> u32 {
        match self {
            BitDepth::Fixed(b) => b,
            BitDepth::Adaptive { max } => {
                let half_log = (usize::BITS - 1).saturating_sub(n.max(1).leading_zeros()) / 2;
                half_log.clamp(1, max.max(1))
            }
        }
    }

    fn check(self) -> Result<()> {
        match self {
            BitDepth::Fixed(b) | BitDepth::Adaptive { max: b } => check_bits(b),
        }
    }
}

impl From<u32> for BitDepth {
    fn from(bits: u32) -> Self {
        BitDepth::Fixed(bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedStream {
    pub symbols: Vec<u32>,
    pub bits: u32,
    pub min: f64,
    pub max: f64,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=32).contains(&bits) {
        return Err(Error::invalid(format!("quantizer depth must lie in 1..=32, got {bits}")));
    }
    Ok(())
}

fn bin(x: f64, min: f64, max: f64, bits: u32) -> u32 {
    let levels = (1u64 << bits) as f64;
    let top = ((1u64 << bits) - 1) as u32;
    if !(max > min) {
        return 0;
    }
    let b = ((x - min) / (max - min) * levels).floor();
    if b <= 0.0 {
        0
    } else if b >= top as f64 {
        top
    } else {
        b as u32
    }
}

/// Uniform `2^bits`-level binning over `[min, max]` of the given range.
pub fn quantize_in_range(values: &[f64], bits: u32, min: f64, max: f64) -> Result<QuantizedStream> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::invalid("cannot quantize an empty stream"));
    }
    Ok(QuantizedStream {
        symbols: values.iter().map(|&x| bin(x, min, max, bits)).collect(),
        bits,
        min,
        max,
    })
}

fn range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub fn quantize_uniform(values: &[f64], bits: u32) -> Result<QuantizedStream> {
    let (min, max) = range(values);
    quantize_in_range(values, bits, min, max)
}

/// Quantizes both streams over the union of their ranges.
pub fn quantize_pair(x: &[f64], y: &[f64], bits: u32) -> Result<(QuantizedStream, QuantizedStream)> {
    let (a, b) = range(x);
    let (c, d) = range(y);
    let (min, max) = (a.min(c), b.max(d));
    Ok((quantize_in_range(x, bits, min, max)?, quantize_in_range(y, bits, min, max)?))
}

/// Plug-in entropy in bits of the sorted-and-counted occurrences of `keys`.
fn entropy_of<T: Ord + Copy>(mut keys: Vec<T>) -> f64 {
    let n = keys.len();
    if n == 0 {
        return 0.0;
    }
    keys.sort_unstable();
    let mut counts = Vec::new();
    let mut run = 1usize;
    for w in keys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            counts.push(run);
            run = 1;
        }
    }
    counts.push(run);
    counts.sort_unstable();
    let n = n as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn entropy(stream: &QuantizedStream) -> f64 {
    entropy_of(stream.symbols.clone())
}

fn check_aligned(x: &QuantizedStream, y: &QuantizedStream) -> Result<()> {
    if x.symbols.len() != y.symbols.len() {
        return Err(Error::shape(format!(
            "streams of lengths {} and {}",
            x.symbols.len(),
            y.symbols.len()
        )));
    }
    Ok(())
}

pub fn joint_entropy(x: &QuantizedStream, y: &QuantizedStream) -> Result<f64> {
    check_aligned(x, y)?;
    let keys = x.symbols.iter().zip(&y.symbols).map(|(&a, &b)| (a, b)).collect();
    Ok(entropy_of::<(u32, u32)>(keys))
}

/// `H(y | x)`, clamped to `[0, H(y)]`.
pub fn conditional_entropy(y: &QuantizedStream, x: &QuantizedStream) -> Result<f64> {
    let i = mutual_information(x, y)?;
    Ok((entropy(y) - i).max(0.0))
}

/// `H(x) + H(y) - H(x, y)`, clamped to `[0, min(H(x), H(y))]`.
pub fn mutual_information(x: &QuantizedStream, y: &QuantizedStream) -> Result<f64> {
    let hxy = joint_entropy(x, y)?;
    let (hx, hy) = (entropy(x), entropy(y));
    Ok((hx + hy - hxy).clamp(0.0, hx.min(hy)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InfoRecord {
    pub layer: usize,
    pub iteration: usize,
    #[serde(rename = "H_marginal_bits")]
    pub h_marginal: f64,
    #[serde(rename = "H_conditional_bits")]
    pub h_conditional: f64,
    #[serde(rename = "MI_bits")]
    pub mi: f64,
    #[serde(rename = "MI_over_H")]
    pub mi_over_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMean {
    pub layer: usize,
    pub h_marginal: f64,
    pub h_conditional: f64,
    pub mi: f64,
    pub mi_over_h: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InfoSummary {
    pub records: Vec<InfoRecord>,
    pub layers: Vec<LayerMean>,
}

fn share(mi: f64, h: f64) -> f64 {
    if h > 0.0 {
        mi / h
    } else {
        1.0
    }
}

pub fn pair_record(layer: usize, iteration: usize, x: &[f64], y: &[f64], bits: u32) -> Result<InfoRecord> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "layer {layer} iteration {iteration}: node streams of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (qx, qy) = quantize_pair(x, y, bits)?;
    let h = entropy(&qy);
    let mi = mutual_information(&qx, &qy)?;
    Ok(InfoRecord {
        layer,
        iteration,
        h_marginal: h,
        h_conditional: (h - mi).max(0.0),
        mi,
        mi_over_h: share(mi, h),
    })
}

/// Per-iteration and per-layer mean statistics of `streams[layer][iteration] = (node1, node2)`.
pub fn layer_summary(streams: &[Vec<(Vec<f64>, Vec<f64>)>], depth: impl Into<BitDepth>) -> Result<InfoSummary> {
    let depth = depth.into();
    depth.check()?;
    let iterations = streams.first().map_or(0, Vec::len);
    if iterations == 0 {
        return Err(Error::invalid("no iterations to summarize"));
    }
    let mut summary = InfoSummary::default();
    for (layer, per_iter) in streams.iter().enumerate() {
        if per_iter.len() != iterations {
            return Err(Error::shape(format!(
                "layer {layer} has {} iterations, layer 0 has {iterations}",
                per_iter.len()
            )));
        }
        let mut acc = (0.0, 0.0, 0.0);
        let bits = depth.for_length(per_iter.first().map_or(0, |p| p.0.len()));
        for (t, (x, y)) in per_iter.iter().enumerate() {
            let r = pair_record(layer, t, x, y, bits)?;
            acc.0 += r.h_marginal;
            acc.1 += r.h_conditional;
            acc.2 += r.mi;
            summary.records.push(r);
        }
        let n = iterations as f64;
        let (h, hc, mi) = (acc.0 / n, acc.1 / n, acc.2 / n);
        summary.layers.push(LayerMean {
            layer,
            h_marginal: h,
            h_conditional: hc,
            mi,
            mi_over_h: share(mi, h),
        });
    }
    Ok(summary)
}

/// Same streams with each second-node vector independently shuffled.
pub fn shuffled_pairs(streams: &[Vec<(Vec<f64>, Vec<f64>)>], seed: u64) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    streams
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|(x, y)| {
                    let mut y = y.clone();
                    y.shuffle(&mut rng);
                    (x.clone(), y)
                })
                .collect()
        })
        .collect()
}

impl InfoSummary {
    pub fn mean_share(&self) -> f64 {
        self.layers.iter().map(|l| l.mi_over_h).sum::<f64>() / self.layers.len().max(1) as f64
    }

    /// CSV with columns `layer, iteration, H_marginal_bits, H_conditional_bits, MI_bits, MI_over_H`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(symbols: Vec<u32>, bits: u32) -> QuantizedStream {
        QuantizedStream {
            symbols,
            bits,
            min: 0.0,
            max: 1.0,
        }
    }

    #[test]
    fn hand_binning() {
        assert_eq!(quantize_uniform(&[0.0, 0.5, 1.0], 1).unwrap().symbols, vec![0, 1, 1]);
        assert_eq!(quantize_uniform(&[0.0, 0.3, 0.6, 0.9], 2).unwrap().symbols, vec![0, 1, 2, 3]);
        assert_eq!(quantize_uniform(&[2.5; 4], 8).unwrap().symbols, vec![0; 4]);
        assert!(quantize_uniform(&[], 8).is_err());
        assert!(quantize_uniform(&[1.0], 0).is_err());
        assert!(quantize_uniform(&[1.0], 33).is_err());
    }

    #[test]
    fn uniform_entropies() {
        assert_eq!(entropy(&stream(vec![3; 10], 2)), 0.0);
        assert_eq!(entropy(&stream(vec![0, 1, 0, 1], 1)), 1.0);
        assert_eq!(entropy(&stream(vec![0, 1, 2, 3, 3, 2, 1, 0], 2)), 2.0);
    }

    #[test]
    fn self_information() {
        let x = stream(vec![0, 1, 1, 2, 3, 3, 3, 0], 2);
        assert_eq!(mutual_information(&x, &x).unwrap(), entropy(&x));
        assert!(mutual_information(&x, &stream(vec![0], 2)).is_err());
    }

    #[test]
    fn identical_streams_share_everything() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let streams = vec![vec![(v.clone(), v.clone()); 3]; 2];
        let s = layer_summary(&streams, 8).unwrap();
        assert!(s.records.iter().all(|r| r.mi_over_h == 1.0));
        assert!(s.layers.iter().all(|l| l.mi_over_h == 1.0));
        let text = s.to_csv_string().unwrap();
        assert!(text.starts_with("layer,iteration,H_marginal_bits,H_conditional_bits,MI_bits,MI_over_H\n"));
    }

    #[test]
    fn adaptive_depth() {
        let d = BitDepth::Adaptive { max: 8 };
        assert_eq!(d.for_length(32), 2);
        assert_eq!(d.for_length(800), 4);
        assert_eq!(d.for_length(24704), 7);
        assert_eq!(d.for_length(1 << 30), 8);
        assert_eq!(d.for_length(1), 1);
        assert_eq!(BitDepth::from(5).for_length(3), 5);
    }

    #[test]
    fn misaligned_streams_rejected() {
        let streams = vec![vec![(vec![1.0, 2.0], vec![1.0])]];
        assert!(layer_summary(&streams, 8).is_err());
        let ragged = vec![vec![(vec![1.0], vec![1.0])], vec![]];
        assert!(layer_summary(&ragged, 8).is_err());
    }
}
