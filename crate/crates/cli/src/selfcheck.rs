use std::time::Instant;

use lgc::codec::autoencoder::{gradcheck_ps, gradcheck_rar, GradCheckOptions};
use lgc::codec::{AeVariant, AutoencoderParams, PayloadKind, PsLossWeights, ValueWidth};
use lgc::comms::{ratio_from_sizes, ring_allreduce, ring_rounds, SimNetwork, Topology};
use lgc::nn::Coverage;
use lgc::sparsify::{selection_count, topk_select, GradientVector, ResidualMode, ResidualState, SparseSelection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commands::bench_codec;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} {:<22} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn run(name: &'static str, f: impl FnOnce() -> anyhow::Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e:#}")));
    Check {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn sorted_topk(v: &[f64], ratio: f64) -> Vec<usize> {
    let m = selection_count(v.len(), ratio);
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
    let mut top = order[..m].to_vec();
    top.sort();
    top
}

fn topk_oracle(trials: usize) -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for t in 0..trials {
        let n = rng.random_range(1..=2000);
        let levels = if t % 2 == 0 { 5 } else { 1 << 20 };
        let v: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let ratio = [0.1, 1.0, 25.0, 100.0][t % 4];
        let got = topk_select(&v, ratio)?;
        let want = sorted_topk(&v, ratio);
        let values_ok = got.indices.iter().zip(&got.values).all(|(&i, &x)| v[i] == x);
        if got.indices != want || !values_ok {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{trials} vectors, {bad} mismatches against a full sort")))
}

fn ef_conservation(steps: usize) -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sizes = [37, 5, 300];
    let n: usize = sizes.iter().sum();
    let mut state = ResidualState::new(n, ResidualMode::Plain);
    let mut bad = 0;
    for _ in 0..steps {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let before = state.accumulated().to_vec();
        let fresh = GradientVector::from_layer_sizes(g.clone(), &sizes)?;
        let picked = state.error_feedback_step(&fresh, rng.random_range(0.5..30.0))?;
        let sent = SparseSelection::concat(&picked.iter().map(|p| p.global(n)).collect::<Vec<_>>(), n).densify();
        let after = state.accumulated();
        if (0..n).any(|i| sent[i] + after[i] != g[i] + before[i]) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{steps} steps, {bad} violating sent + residual = grad + previous")))
}

fn ring_mean() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut round_errors = 0;
    for k in 1..=8usize {
        for n in [1usize, 7, 1024] {
            let vectors: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let topo = Topology::ring(k)?;
            let mut net = SimNetwork::new(k);
            let out = ring_allreduce(&mut net, &topo, 0, 0, PayloadKind::Dense, &vectors, ValueWidth::F32)?;
            for i in 0..n {
                let mean = vectors.iter().map(|v| v[i]).sum::<f64>() / k as f64;
                let scale = vectors.iter().map(|v| v[i].abs()).sum::<f64>() / k as f64;
                for node in &out {
                    worst = worst.max((node[i] - mean).abs() / scale);
                }
            }
            for node in 0..k {
                if net.log().iter().filter(|e| e.sender == node).count() as u32 != ring_rounds(k) {
                    round_errors += 1;
                }
            }
        }
    }
    Ok((
        worst <= 1e-6 && round_errors == 0,
        format!("K 1..=8, worst relative error {worst:.2e}, {round_errors} nodes with a wrong round count"),
    ))
}

fn ae_gradcheck(mu: usize) -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let opts = GradCheckOptions {
        coverage: Coverage::Sampled { per_tensor: 2, seed: 1 },
        ..Default::default()
    };
    let grads: Vec<Vec<f64>> = (0..2).map(|_| (0..mu).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let innovations = grads
        .iter()
        .map(|g| SparseSelection::gather(g, &[1, mu / 2]))
        .collect::<Result<Vec<_>, _>>()?;
    let ps = AutoencoderParams::init_random(AeVariant::Ps, mu, 2, &mut rng)?;
    let a = gradcheck_ps(&ps, &grads, &innovations, 0, PsLossWeights::default(), opts)?;
    let rar = AutoencoderParams::init_random(AeVariant::Rar, mu, 1, &mut rng)?;
    let b = gradcheck_rar(&rar, &grads, opts)?;
    let worst = a.max_relative_error.max(b.max_relative_error);
    Ok((
        worst <= 1e-4,
        format!("mu {mu}, {} coordinates, worst relative error {worst:.2e}", a.coordinates + b.coordinates),
    ))
}

fn codec_round_trips() -> anyhow::Result<(bool, String)> {
    let rows = bench_codec(100, 4000, 15)?;
    let bad: usize = rows.iter().map(|r| r.mismatches).sum();
    let total: usize = rows.iter().map(|r| r.payloads).sum();
    Ok((bad == 0, format!("{total} payloads over every kind and width, {bad} mismatches")))
}

fn ratio_arithmetic() -> anyhow::Result<(bool, String)> {
    let r = ratio_from_sizes(170e6, 0.021e6)?;
    Ok(((r.round() - 8095.0).abs() <= 1.0, format!("170 MB over 0.021 MB gives {r:.1}x")))
}

/// Quick gradient checks and protocol properties.
pub fn selfcheck() -> Vec<Check> {
    vec![
        run("topk-oracle", || topk_oracle(400)),
        run("error-feedback", || ef_conservation(400)),
        run("ring-allreduce", ring_mean),
        run("ae-gradcheck", || ae_gradcheck(64)),
        run("codec-round-trip", codec_round_trips),
        run("ratio-arithmetic", ratio_arithmetic),
    ]
}
