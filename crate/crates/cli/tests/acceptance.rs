//! One test per acceptance criterion; each prints a PASS/FAIL line with its measurements.
//! The tests hold a shared lock so wall-clock bounds are measured one at a time.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Read;
use std::sync::Mutex;
use std::time::Instant;

use flate2::read::DeflateDecoder;
use lgc::codec::autoencoder::{gradcheck_ps, gradcheck_rar, GradCheckOptions};
use lgc::codec::payload::{decode_index_block, encode_index_block};
use lgc::codec::{
    ae_train_step_ps, ae_train_step_rar, pack_payload, unpack_payload, AeOptimizer, AeVariant, AutoencoderParams,
    PayloadKind, PsLossWeights, ValueWidth,
};
use lgc::comms::{compression_ratio, CellKey, ring_allreduce, RateLedger, SimNetwork, Topology};
use lgc::infoplane::{entropy, joint_entropy, layer_summary, mutual_information, quantize_pair, quantize_uniform, shuffled_pairs, BitDepth};
use lgc::nn::Coverage;
use lgc::sparsify::{topk_select, GradientVector, ResidualMode, ResidualState, SparseSelection};
use lgc::trainer::{run_experiment, run_experiment_with, CompressorKind, PatternKind, RunOptions, TrainConfig, WireWidth};
use lgc_cli::commands::random_payload;
use lgc_cli::{cmd_train, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, passed: bool, detail: &str, started: Instant) {
    println!(
        "criterion {id:>2} {:<32} {} {detail} ({:.1}s)",
        name,
        if passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

const TOY_MU: usize = 256;
const TOY_STEPS: usize = 300;
const TOY_FRAMES: usize = 4;
const TOY_CLIP: f64 = 10.0;

/// Frozen toy frames: a smooth shared component plus per-node noise, unit RMS.
fn toy_frames(seed: u64, count: usize, nodes: usize) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.random_range(1.0..6.0), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.5)))
                .collect();
            let common: Vec<f64> = (0..TOY_MU)
                .map(|i| waves.iter().map(|(f, p, a)| a * (2.0 * PI * f * i as f64 / TOY_MU as f64 + p).sin()).sum())
                .collect();
            (0..nodes)
                .map(|_| {
                    let g: Vec<f64> = common.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect();
                    let rms = (g.iter().map(|v| v * v).sum::<f64>() / TOY_MU as f64).sqrt();
                    g.into_iter().map(|v| v / rms).collect()
                })
                .collect()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ps_curve(seed: u64, weights: PsLossWeights) -> Vec<f64> {
    let frames = toy_frames(seed, TOY_FRAMES, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = AutoencoderParams::init_random(AeVariant::Ps, TOY_MU, 2, &mut rng).unwrap();
    let mut opt = AeOptimizer::new(&params, 1e-3, 0.9).unwrap().with_clip_norm(Some(TOY_CLIP)).unwrap();
    (0..TOY_STEPS)
        .map(|t| {
            let grads = &frames[t % frames.len()];
            let inn: Vec<SparseSelection> = grads.iter().map(|g| topk_select(g, 10.0).unwrap()).collect();
            let chosen = rng.random_range(0..2);
            ae_train_step_ps(&mut params, &mut opt, grads, &inn, chosen, weights).unwrap().rec
        })
        .collect()
}

fn rar_curve(seed: u64) -> Vec<f64> {
    let frames = toy_frames(seed, TOY_FRAMES, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = AutoencoderParams::init_random(AeVariant::Rar, TOY_MU, 1, &mut rng).unwrap();
    let mut opt = AeOptimizer::new(&params, 1e-3, 0.9).unwrap().with_clip_norm(Some(TOY_CLIP)).unwrap();
    (0..TOY_STEPS)
        .map(|t| ae_train_step_rar(&mut params, &mut opt, &frames[t % frames.len()]).unwrap())
        .collect()
}

#[test]
fn criterion_07_autoencoder_convergence() {
    let _g = serial();
    let t = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, curve) in [("ps", ps_curve(0, PsLossWeights::default())), ("rar", rar_curve(0))] {
        let (lead, trail) = (mean(&curve[..50]), mean(&curve[curve.len() - 50..]));
        ok &= trail < 0.5 * lead;
        detail.push(format!("{name} L_rec {lead:.3} -> {trail:.3} ({:.2}x)", trail / lead));
    }
    report(7, "autoencoder convergence", ok, &detail.join(", "), t);
    assert!(ok && t.elapsed().as_secs() < 120);
}

#[test]
fn criterion_08_similarity_loss_ablation() {
    let _g = serial();
    let t = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let with = ps_curve(seed, PsLossWeights { lambda1: 1.0, lambda2: 0.5 });
        let without = ps_curve(seed, PsLossWeights { lambda1: 1.0, lambda2: 0.0 });
        let (a, b) = (mean(&with[with.len() - 50..]), mean(&without[without.len() - 50..]));
        if a <= b {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {a:.4} vs {b:.4}"));
    }
    report(8, "lambda2 ablation direction", wins >= 2, &format!("{wins}/3 seeds; {}", detail.join(", ")), t);
    assert!(wins >= 2);
    assert!(t.elapsed().as_secs() < 120);
}

/// Indices of the `max(1, floor(r/100 * n))` largest magnitudes, lower index first on ties.
fn brute_force_topk(v: &[f64], ratio: f64) -> Vec<usize> {
    let m = ((ratio / 100.0 * v.len() as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut picked = order[..m].to_vec();
    picked.sort_unstable();
    picked
}

#[test]
fn criterion_01_topk_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut bad = 0;
    let mut tied = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=10_000);
        let v: Vec<f64> = if trial % 3 == 0 {
            (0..n).map(|_| rng.random_range(-4i32..=4) as f64 * 0.25).collect()
        } else {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let ratio = [0.1, 1.0, 25.0, 100.0][trial % 4];
        let got = topk_select(&v, ratio).unwrap();
        let want = brute_force_topk(&v, ratio);
        if trial % 3 == 0 {
            tied += 1;
        }
        if got.indices != want || got.indices.iter().zip(&got.values).any(|(&i, &x)| v[i] != x) {
            bad += 1;
        }
    }
    let ok = bad == 0 && t.elapsed().as_secs() < 10;
    report(1, "top-k oracle equivalence", ok, &format!("1000 vectors ({tied} with duplicated magnitudes), {bad} mismatches"), t);
    assert!(ok);
}

#[test]
fn criterion_02_error_feedback_conservation() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let sizes = [300, 17, 1, 2048];
    let n: usize = sizes.iter().sum();
    let mut state = ResidualState::new(n, ResidualMode::Plain);
    let mut bad = 0;
    for _ in 0..1000 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-3..3))).collect();
        let before = state.accumulated().to_vec();
        let fresh = GradientVector::from_layer_sizes(g.clone(), &sizes).unwrap();
        let picked = state.error_feedback_step(&fresh, rng.random_range(0.1..50.0)).unwrap();
        let mut sent = vec![0.0; n];
        for sel in picked.iter().map(|p| p.global(n)) {
            for (&i, &x) in sel.indices.iter().zip(&sel.values) {
                sent[i] += x;
            }
        }
        let after = state.accumulated();
        if (0..n).any(|i| sent[i] + after[i] != g[i] + before[i]) {
            bad += 1;
        }
    }
    report(2, "error-feedback conservation", bad == 0, &format!("1000 steps over {n} coordinates, {bad} inexact"), t);
    assert_eq!(bad, 0);
}

#[test]
fn criterion_03_ring_allreduce() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    let mut round_errors = Vec::new();
    for k in 1..=8usize {
        for n in [1usize, 7, 1024, 10_000] {
            let vectors: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut net = SimNetwork::new(k);
            let out = ring_allreduce(&mut net, &Topology::ring(k).unwrap(), 0, 0, PayloadKind::Dense, &vectors, ValueWidth::F32).unwrap();
            for i in 0..n {
                let mean = vectors.iter().map(|v| v[i]).sum::<f64>() / k as f64;
                let scale = vectors.iter().map(|v| v[i].abs()).sum::<f64>() / k as f64;
                for node in &out {
                    worst = worst.max((node[i] - mean).abs() / scale);
                }
            }
            let expected = 2 * (k - 1);
            for node in 0..k {
                let rounds: BTreeSet<u32> = net.log().iter().filter(|e| e.sender == node).map(|e| e.tag.round).collect();
                let sends = net.log().iter().filter(|e| e.sender == node).count();
                let logged: usize = net.log().iter().filter(|e| e.sender == node).map(|e| e.bytes).sum();
                if rounds.len() != expected || sends != expected || net.ledger().sent_by(node) != logged as u64 {
                    round_errors.push(format!("K={k} n={n} node {node}"));
                }
            }
            if net.ledger().send_count() != (k * expected) as u64 {
                round_errors.push(format!("K={k} n={n} send count"));
            }
        }
    }
    let ok = worst <= 1e-6 && round_errors.is_empty();
    report(
        3,
        "ring-allreduce correctness",
        ok,
        &format!("K 1..=8 x n {{1, 7, 1024, 10^4}}, worst relative error {worst:.2e}, round mismatches {round_errors:?}"),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_04_autoencoder_gradient_check() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for mu in [64usize, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(104 + mu as u64);
        let opts = GradCheckOptions {
            coverage: Coverage::Sampled { per_tensor: 2, seed: mu as u64 },
            ..Default::default()
        };
        let grads: Vec<Vec<f64>> = (0..2).map(|_| (0..mu).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let innovations: Vec<SparseSelection> = grads.iter().map(|g| topk_select(g, 10.0).unwrap()).collect();
        let ps = AutoencoderParams::init_random(AeVariant::Ps, mu, 2, &mut rng).unwrap();
        let a = gradcheck_ps(&ps, &grads, &innovations, 1, PsLossWeights::default(), opts).unwrap();
        let rar = AutoencoderParams::init_random(AeVariant::Rar, mu, 1, &mut rng).unwrap();
        let b = gradcheck_rar(&rar, &grads, opts).unwrap();
        worst = worst.max(a.max_relative_error).max(b.max_relative_error);
        coords += a.coordinates + b.coordinates;
    }
    let ok = worst <= 1e-4 && t.elapsed().as_secs() < 60;
    report(4, "autoencoder gradient check", ok, &format!("mu 64 and 256, PS with innovation and RAR, {coords} coordinates, worst relative error {worst:.2e}"), t);
    assert!(ok);
}

fn reference_indices(block: &[u8]) -> Vec<usize> {
    let mut raw = Vec::new();
    DeflateDecoder::new(block).read_to_end(&mut raw).expect("reference inflate");
    let mut out = Vec::new();
    let (mut acc, mut shift) = (0u64, 0);
    for b in raw {
        acc |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            out.push(match out.last() {
                None => acc as usize,
                Some(&p) => p + 1 + acc as usize,
            });
            acc = 0;
            shift = 0;
        } else {
            shift += 7;
        }
    }
    out
}

#[test]
fn criterion_05_codec_round_trips() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let kinds = [PayloadKind::Topk, PayloadKind::Common, PayloadKind::Innovation, PayloadKind::Dense, PayloadKind::Weights];
    let mut bad = 0;
    for i in 0..1000 {
        let width = if i % 2 == 0 { ValueWidth::F32 } else { ValueWidth::F64 };
        let p = random_payload(&mut rng, kinds[i % kinds.len()], width, 5000);
        if unpack_payload(&pack_payload(&p).unwrap()).ok().as_ref() != Some(&p) {
            bad += 1;
        }
    }
    let mut bad_blocks = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..100_000usize);
        let density = [0.001, 0.05, 0.5, 1.0][rng.random_range(0..4)];
        let idx: Vec<usize> = (0..n).filter(|_| rng.random_bool(density)).collect();
        let block = encode_index_block(&idx).unwrap();
        if reference_indices(&block) != idx || decode_index_block(&block).unwrap() != idx {
            bad_blocks += 1;
        }
    }
    let ok = bad == 0 && bad_blocks == 0;
    report(5, "codec round-trips", ok, &format!("1000 payloads over 5 kinds, {bad} mismatches; 100 index blocks through flate2, {bad_blocks} mismatches"), t);
    assert!(ok);
}

#[test]
fn criterion_06_compression_ratio_arithmetic() {
    let _g = serial();
    let t = Instant::now();
    let key = |kind| CellKey { iteration: 0, sender: 0, receiver: 1, kind };
    let mut baseline = RateLedger::new();
    baseline.record(key(PayloadKind::Dense), 170_000_000);
    let mut ledger = RateLedger::new();
    ledger.record(key(PayloadKind::Topk), 21_000);
    let r = compression_ratio(&ledger, &baseline, 0, 0..=0).unwrap();
    let ok = (r.round() - 8095.0).abs() <= 1.0;
    report(6, "compression-ratio arithmetic", ok, &format!("170 MB dense over 0.021 MB gives {r:.2}x"), t);
    assert!(ok);
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn desk(kind: CompressorKind, pattern: PatternKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.compressor.kind = kind;
    cfg.topology.pattern = pattern;
    cfg.seed = seed;
    cfg
}

#[test]
fn criterion_09_end_to_end_training() {
    let _g = serial();
    let t = Instant::now();
    let base = desk(CompressorKind::None, PatternKind::Ps, 0);
    assert!(base.dataset.train_samples <= 10_000 && base.topology.nodes == 4 && base.schedule.total_iters <= 3000);

    let mut dense = base.clone();
    dense.compressor.wire = WireWidth::F64;
    let opts = RunOptions { keep_trajectory: true };
    let ps = run_experiment_with(&dense, opts).unwrap().trajectory;
    dense.topology.pattern = PatternKind::Ring;
    let ring = run_experiment_with(&dense, opts).unwrap().trajectory;
    let drift = ps.iter().zip(&ring).map(|(a, b)| rel_diff(a, b)).fold(0.0, f64::max);
    let a_ok = drift <= 1e-6 && ps.len() == ring.len() && ps.len() == base.schedule.total_iters as usize;
    drop((ps, ring));

    let mut b_ok = true;
    let mut c_ok = true;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let reference = run_experiment(&desk(CompressorKind::None, PatternKind::Ps, seed)).unwrap().summary;
        let lgc = run_experiment(&desk(CompressorKind::Lgc, PatternKind::Ps, seed)).unwrap().summary;
        let gap = (lgc.final_accuracy - reference.final_accuracy) * 100.0;
        b_ok &= gap.abs() <= 2.0;
        let min_cr = lgc.per_node_cr.iter().cloned().fold(f64::INFINITY, f64::min);
        c_ok &= min_cr >= 100.0;
        rows.push(format!(
            "seed {seed}: dense {:.4} lgc {:.4} ({gap:+.2} pts), min per-node CR {min_cr:.1}x over {:?}",
            reference.final_accuracy, lgc.final_accuracy, lgc.headline_iterations
        ));
    }
    let ok = a_ok && b_ok && c_ok && t.elapsed().as_secs() < 600;
    report(
        9,
        "end-to-end desk-scale training",
        ok,
        &format!(
            "(a) PS vs ring worst relative drift {drift:.2e} {}; (b) {}; (c) {}; {}",
            if a_ok { "ok" } else { "fail" },
            if b_ok { "ok" } else { "fail" },
            if c_ok { "ok" } else { "fail" },
            rows.join("; ")
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_10_information_plane() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut self_bad = 0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..rng.random_range(1..500)).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q = quantize_uniform(&x, rng.random_range(1..=10)).unwrap();
        if mutual_information(&q, &q).unwrap() != entropy(&q) {
            self_bad += 1;
        }
    }
    let mut bound_bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.random_range(-1.0..1.0) + rng.random_range(-0.5..0.5)).collect();
        let (qx, qy) = quantize_pair(&x, &y, rng.random_range(1..=6)).unwrap();
        let (hx, hy) = (entropy(&qx), entropy(&qy));
        let mi = mutual_information(&qx, &qy).unwrap();
        let via_joint = hx + hy - joint_entropy(&qx, &qy).unwrap();
        if mi < -1e-12 || mi > hx.min(hy) + 1e-12 || (mi - via_joint).abs() > 1e-9 {
            bound_bad += 1;
        }
    }

    let mut cfg = desk(CompressorKind::None, PatternKind::Ps, 0);
    cfg.topology.nodes = 2;
    cfg.schedule.total_iters = 600;
    cfg.record_gradients = true;
    let dump = run_experiment(&cfg).unwrap().gradients.expect("gradients recorded");
    let pairs = dump.pairs(0, 1).unwrap();
    let depth = BitDepth::Adaptive { max: 8 };
    let real = layer_summary(&pairs, depth).unwrap().mean_share();
    let base = layer_summary(&shuffled_pairs(&pairs, 7), depth).unwrap().mean_share();
    let ratio = real / base;
    let ok = self_bad == 0 && bound_bad == 0 && ratio >= 5.0;
    report(
        10,
        "information-plane sanity",
        ok,
        &format!(
            "I(X;X)=H misses {self_bad}/100, bound violations {bound_bad}/1000; 2-node run mean I/H {real:.4} vs shuffled {base:.4} ({ratio:.1}x)"
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_11_determinism() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let mut runs = 0;
    for kind in [CompressorKind::None, CompressorKind::SparseGd, CompressorKind::Dgc, CompressorKind::Lgc] {
        for pattern in [PatternKind::Ps, PatternKind::Ring] {
            let mut cfg = ExperimentConfig::default();
            cfg.train = desk(kind, pattern, 5);
            cfg.train.schedule.phase1_iters = 4;
            cfg.train.schedule.phase2_iters = 6;
            cfg.train.schedule.total_iters = 16;
            cfg.train.eval_every = 4;
            cfg.train.dataset.train_samples = 256;
            cfg.train.dataset.eval_samples = 64;
            let mut bytes = Vec::new();
            for rep in 0..2 {
                cfg.output.dir = dir.path().join(format!("{kind:?}-{pattern:?}-{rep}"));
                cmd_train(&cfg).unwrap();
                let read = |f: &str| std::fs::read(cfg.output.dir.join(f)).unwrap();
                bytes.push((read("metrics.csv"), read("ledger.csv")));
                runs += 1;
            }
            if bytes[0] != bytes[1] {
                differing.push(format!("{kind:?}/{pattern:?}"));
            }
        }
    }
    let ok = differing.is_empty();
    report(11, "determinism", ok, &format!("{runs} runs over 4 compressors x 2 patterns, differing: {differing:?}"), t);
    assert!(ok);
}
