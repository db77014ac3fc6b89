use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use lgc::codec::{pack_payload, unpack_payload, CompressedPayload, PayloadKind, ValueWidth};
use lgc::infoplane::{layer_summary, shuffled_pairs, BitDepth, GradientDump, InfoSummary};
use lgc::trainer::{run_experiment, CompressorKind, PatternKind, RunOutput, RunSummary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;

/// Writes `bytes` to `dir/name` through a temporary file in the same directory.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
    let path = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(path)
}

fn ratio(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.1}x")
    } else {
        "inf".into()
    }
}

/// One line: final accuracy, per-node uplink CR, total traffic.
pub fn summary_line(cfg: &ExperimentConfig, s: &RunSummary) -> String {
    let cr = if cfg.train.compressor.kind == CompressorKind::None {
        "CR 1x".to_string()
    } else if let Some(d) = s.dual_cr {
        format!("CR {} / {} (designated / others)", ratio(d.designated), ratio(d.others))
    } else {
        let first = s.per_node_cr.first().copied().unwrap_or(1.0);
        if s.per_node_cr.iter().all(|&c| (c - first).abs() <= 1e-9 * first.abs()) {
            format!("CR {}", ratio(first))
        } else {
            let parts: Vec<_> = s.per_node_cr.iter().map(|&c| ratio(c)).collect();
            format!("CR per node {}", parts.join(" / "))
        }
    };
    format!(
        "final accuracy {:.4} | {} over iterations {}..={} | {:.3} MB transferred",
        s.final_accuracy,
        cr,
        s.headline_iterations.start(),
        s.headline_iterations.end(),
        s.total_bytes as f64 / 1e6
    )
}

/// Per-layer means as CSV.
pub fn layers_csv(summary: &InfoSummary) -> String {
    let mut out = String::from("layer,H_marginal_bits,H_conditional_bits,MI_bits,MI_over_H\n");
    for l in &summary.layers {
        let _ = writeln!(out, "{},{},{},{},{}", l.layer, l.h_marginal, l.h_conditional, l.mi, l.mi_over_h);
    }
    out
}

/// Whitespace-separated per-layer columns for gnuplot, with the shuffled baseline alongside when given.
pub fn layers_gnuplot(summary: &InfoSummary, shuffled: Option<&InfoSummary>) -> String {
    let mut out = String::from("# layer H_marginal H_conditional MI MI_over_H");
    if shuffled.is_some() {
        out.push_str(" MI_over_H_shuffled");
    }
    out.push('\n');
    for (i, l) in summary.layers.iter().enumerate() {
        let _ = write!(out, "{} {} {} {} {}", l.layer, l.h_marginal, l.h_conditional, l.mi, l.mi_over_h);
        if let Some(s) = shuffled {
            let _ = write!(out, " {}", s.layers[i].mi_over_h);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct InfoplaneOptions {
    pub depth: BitDepth,
    pub node_a: usize,
    pub node_b: usize,
    pub shuffled_baseline: bool,
    pub shuffle_seed: u64,
    pub gnuplot: bool,
}

impl InfoplaneOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let a = &cfg.analysis;
        Self {
            depth: a.depth(),
            node_a: a.node_a,
            node_b: a.node_b,
            shuffled_baseline: a.shuffled_baseline,
            shuffle_seed: a.shuffle_seed,
            gnuplot: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InfoplaneReport {
    pub summary: InfoSummary,
    pub shuffled: Option<InfoSummary>,
    pub files: Vec<PathBuf>,
}

impl InfoplaneReport {
    pub fn line(&self) -> String {
        let real = self.summary.mean_share();
        match &self.shuffled {
            Some(s) => {
                let base = s.mean_share();
                let lift = if base > 0.0 { format!("{:.1}x", real / base) } else { "inf".into() };
                format!("mean I/H {real:.4} | shuffled {base:.4} | ratio {lift}")
            }
            None => format!("mean I/H {real:.4}"),
        }
    }
}

/// Summarizes a dump and writes `infoplane.csv` and `infoplane_layers.csv` (plus `.dat` when asked).
pub fn infoplane_from_dump(dump: &GradientDump, opts: &InfoplaneOptions, dir: &Path) -> anyhow::Result<InfoplaneReport> {
    let pairs = dump.pairs(opts.node_a, opts.node_b)?;
    let summary = layer_summary(&pairs, opts.depth)?;
    let shuffled = if opts.shuffled_baseline {
        Some(layer_summary(&shuffled_pairs(&pairs, opts.shuffle_seed), opts.depth)?)
    } else {
        None
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = vec![
        write_atomic(dir, "infoplane.csv", summary.to_csv_string()?.as_bytes())?,
        write_atomic(dir, "infoplane_layers.csv", layers_csv(&summary).as_bytes())?,
    ];
    if let Some(s) = &shuffled {
        files.push(write_atomic(dir, "infoplane_layers_shuffled.csv", layers_csv(s).as_bytes())?);
    }
    if opts.gnuplot {
        files.push(write_atomic(dir, "infoplane.dat", layers_gnuplot(&summary, shuffled.as_ref()).as_bytes())?);
    }
    Ok(InfoplaneReport { summary, shuffled, files })
}

pub fn read_dump(path: &Path) -> anyhow::Result<GradientDump> {
    let bytes = std::fs::read(path).with_context(|| format!("reading dump {}", path.display()))?;
    GradientDump::parse(&bytes).with_context(|| format!("parsing dump {}", path.display()))
}

#[derive(Debug)]
pub struct TrainReport {
    pub output: RunOutput,
    pub line: String,
    pub files: Vec<PathBuf>,
    pub infoplane: Option<InfoplaneReport>,
}

/// Runs training and writes every artifact into `cfg.output.dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> anyhow::Result<TrainReport> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        bail!("invalid config:\n  {}", violations.join("\n  "));
    }
    let cfg = cfg.resolved();
    let mut train = cfg.train.clone();
    if cfg.analysis.infoplane {
        train.record_gradients = true;
    }
    let output = run_experiment(&train)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let line = summary_line(&cfg, &output.summary);
    let mut files = vec![
        write_atomic(dir, "config.toml", cfg.to_toml_string()?.as_bytes())?,
        write_atomic(dir, "metrics.csv", output.metrics.to_csv_string()?.as_bytes())?,
        write_atomic(dir, "ledger.csv", output.ledger.to_csv_string()?.as_bytes())?,
        write_atomic(dir, "baseline_ledger.csv", output.baseline.to_csv_string()?.as_bytes())?,
    ];
    let mut infoplane = None;
    if let Some(dump) = &output.gradients {
        files.push(write_atomic(dir, "gradients.lgcd", &dump.to_bytes())?);
        if cfg.analysis.infoplane {
            let report = infoplane_from_dump(dump, &InfoplaneOptions::from_config(&cfg), dir)?;
            files.extend(report.files.iter().cloned());
            infoplane = Some(report);
        }
    }
    let mut text = line.clone();
    text.push('\n');
    if let Some(r) = &infoplane {
        text.push_str(&r.line());
        text.push('\n');
    }
    files.push(write_atomic(dir, "summary.txt", text.as_bytes())?);
    Ok(TrainReport { output, line, files, infoplane })
}

/// Short label for the summary header.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let p = match cfg.train.topology.pattern {
        PatternKind::Ps => "ps",
        PatternKind::Ring => "ring",
    };
    format!("{} {} K={} seed {}", cfg.train.compressor.kind.name(), p, cfg.train.topology.nodes, cfg.train.seed)
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub kind: PayloadKind,
    pub width: ValueWidth,
    pub payloads: usize,
    pub mean_bytes: f64,
    pub pack_us: f64,
    pub unpack_us: f64,
    pub mismatches: usize,
}

pub fn random_payload<R: Rng>(rng: &mut R, kind: PayloadKind, width: ValueWidth, max_len: usize) -> CompressedPayload {
    let source = rng.random_range(1..=max_len.max(1));
    let mut p = CompressedPayload::new(kind, rng.random(), rng.random()).with_width(width);
    if kind.is_dense() {
        let n = rng.random_range(0..=source);
        p.values = (0..n).map(|_| width.round(rng.random_range(-1.0..1.0))).collect();
    } else {
        let mut indices: Vec<usize> = (0..source).filter(|_| rng.random_bool(0.05)).collect();
        if indices.is_empty() {
            indices.push(rng.random_range(0..source));
        }
        p.values = if kind == PayloadKind::Innovation && rng.random_bool(0.3) {
            Vec::new()
        } else {
            indices.iter().map(|_| width.round(rng.random_range(-1.0..1.0))).collect()
        };
        p.indices = indices;
    }
    p
}

/// Random pack/unpack round trips of every kind and wire width, with timings.
pub fn bench_codec(per_kind: usize, max_len: usize, seed: u64) -> anyhow::Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for width in [ValueWidth::F32, ValueWidth::F64] {
        for kind in PayloadKind::ALL {
            let payloads: Vec<_> = (0..per_kind).map(|_| random_payload(&mut rng, kind, width, max_len)).collect();
            let t = Instant::now();
            let packed = payloads.iter().map(pack_payload).collect::<Result<Vec<_>, _>>()?;
            let pack = t.elapsed();
            let t = Instant::now();
            let unpacked: Vec<_> = packed.iter().map(|b| unpack_payload(b)).collect();
            let unpack = t.elapsed();
            let mismatches = unpacked
                .iter()
                .zip(&payloads)
                .filter(|(u, p)| u.as_ref().ok() != Some(*p))
                .count();
            let n = per_kind.max(1) as f64;
            rows.push(BenchRow {
                kind,
                width,
                payloads: per_kind,
                mean_bytes: packed.iter().map(Vec::len).sum::<usize>() as f64 / n,
                pack_us: pack.as_secs_f64() * 1e6 / n,
                unpack_us: unpack.as_secs_f64() * 1e6 / n,
                mismatches,
            });
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<11} {:>5} {:>8} {:>12} {:>10} {:>10} {:>10}\n",
        "kind", "width", "payloads", "mean bytes", "pack us", "unpack us", "mismatch"
    );
    for r in rows {
        let w = match r.width {
            ValueWidth::F32 => "f32",
            ValueWidth::F64 => "f64",
        };
        let _ = writeln!(
            out,
            "{:<11} {:>5} {:>8} {:>12.1} {:>10.2} {:>10.2} {:>10}",
            r.kind.name(),
            w,
            r.payloads,
            r.mean_bytes,
            r.pack_us,
            r.unpack_us,
            r.mismatches
        );
    }
    out
}
