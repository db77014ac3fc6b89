use lgc::codec::{CompressedPayload, PayloadKind, ValueWidth};
use lgc::comms::{
    compression_ratio, dense_mean_reducer, ps_round, ratio_from_sizes, ring_allgather, ring_allreduce, ring_rounds,
    RateLedger, SimNetwork, Topology,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vectors(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Worst `|got - mean| / mean(|v_k|)` over elements and nodes.
fn worst_error(inputs: &[Vec<f64>], out: &[Vec<f64>]) -> f64 {
    let k = inputs.len() as f64;
    let mut worst = 0.0f64;
    for i in 0..inputs[0].len() {
        let mean = inputs.iter().map(|v| v[i]).sum::<f64>() / k;
        let scale = inputs.iter().map(|v| v[i].abs()).sum::<f64>() / k;
        for o in out {
            worst = worst.max((o[i] - mean).abs() / scale.max(f64::MIN_POSITIVE));
        }
    }
    worst
}

#[test]
fn ring_mean_for_every_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for k in 1..=8 {
        for n in [1, 7, 1024, 10_000] {
            let v = vectors(&mut rng, k, n);
            let topo = Topology::ring(k).unwrap();
            let mut net = SimNetwork::new(k);
            let out = ring_allreduce(&mut net, &topo, 3, 0, PayloadKind::Dense, &v, ValueWidth::F32).unwrap();
            let err = worst_error(&v, &out);
            assert!(err <= 1e-6, "K={k} n={n}: {err:e}");
            for node in 0..k {
                assert_eq!(net.send_rounds(node, 3) as u32, ring_rounds(k), "K={k} n={n} node {node}");
                assert_eq!(net.recv_rounds(node, 3) as u32, ring_rounds(k));
                let logged: usize = net.log().iter().filter(|e| e.sender == node).map(|e| e.bytes).sum();
                assert_eq!(net.ledger().sent_by(node), logged as u64);
            }
            assert_eq!(net.ledger().send_count(), (k as u64) * 2 * (k as u64 - 1));
            assert_eq!(net.pending(), 0);
            for o in &out[1..] {
                assert_eq!(o, &out[0], "replicas differ");
            }
        }
    }
}

#[test]
fn ring_mean_in_f64_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for k in [2, 5, 8] {
        let v = vectors(&mut rng, k, 333);
        let mut net = SimNetwork::new(k);
        let out = ring_allreduce(&mut net, &Topology::ring(k).unwrap(), 0, 0, PayloadKind::Dense, &v, ValueWidth::F64).unwrap();
        assert!(worst_error(&v, &out) < 1e-14);
    }
}

#[test]
fn permuted_ring_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let v = vectors(&mut rng, 5, 101);
    let mut a = SimNetwork::new(5);
    let mut b = SimNetwork::new(5);
    let x = ring_allreduce(&mut a, &Topology::ring(5).unwrap(), 0, 0, PayloadKind::Dense, &v, ValueWidth::F64).unwrap();
    let y = ring_allreduce(&mut b, &Topology::ring_with_order(vec![2, 0, 4, 1, 3]).unwrap(), 0, 0, PayloadKind::Dense, &v, ValueWidth::F64)
        .unwrap();
    for (p, q) in x.iter().zip(&y) {
        for (s, t) in p.iter().zip(q) {
            assert!((s - t).abs() < 1e-14);
        }
    }
}

#[test]
fn ps_mean_and_accounting() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for k in 1..=6 {
        let v = vectors(&mut rng, k, 50);
        let topo = Topology::parameter_server(k).unwrap();
        let mut net = SimNetwork::new(topo.endpoints());
        let up: Vec<_> = v
            .iter()
            .enumerate()
            .map(|(i, x)| vec![CompressedPayload::new(PayloadKind::Dense, 0, i as u16).with_values(x.clone())])
            .collect();
        let out = ps_round(&mut net, &topo, 0, &up, dense_mean_reducer(0, k as u16)).unwrap();
        let got: Vec<Vec<f64>> = out.iter().map(|o| o[0].values.clone()).collect();
        assert!(worst_error(&v, &got) < 1e-6);
        let l = net.ledger();
        for w in 0..k {
            assert_eq!(l.sent_by(w), 24 + 50 * 4);
            assert_eq!(l.received_by(w), 24 + 50 * 4);
        }
        assert_eq!(l.sent_by(k), (k * (24 + 200)) as u64);
        assert_eq!(l.total_sent(), l.total_received());
    }
}

#[test]
fn allgather_over_tcp_loopback_matches() {
    let topo = Topology::ring(4).unwrap();
    let sets: Vec<Vec<CompressedPayload>> = (0..4u16)
        .map(|n| vec![CompressedPayload::new(PayloadKind::Topk, 1, n).with_values(vec![n as f64]).with_indices(vec![n as usize])])
        .collect();
    let mut sim = SimNetwork::new(4);
    let mut tcp = SimNetwork::with_tcp_loopback(4).unwrap();
    let a = ring_allgather(&mut sim, &topo, 1, 0, &sets).unwrap();
    let b = ring_allgather(&mut tcp, &topo, 1, 0, &sets).unwrap();
    assert_eq!(a, b);
    assert_eq!(sim.ledger(), tcp.ledger());
}

#[test]
fn table_ratio_arithmetic() {
    let r = ratio_from_sizes(170e6, 0.021e6).unwrap();
    assert!((r - 8095.0).abs() <= 1.0, "{r}");
    assert!(ratio_from_sizes(1.0, 0.0).is_err());
}

#[test]
fn ledger_csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let v = vectors(&mut rng, 3, 40);
    let mut net = SimNetwork::new(3);
    ring_allreduce(&mut net, &Topology::ring(3).unwrap(), 7, 0, PayloadKind::Dense, &v, ValueWidth::F32).unwrap();
    let csv = net.ledger().to_csv_string().unwrap();
    let back = RateLedger::read_csv(csv.as_bytes()).unwrap();
    assert_eq!(back.to_csv_string().unwrap(), csv);
    assert_eq!(compression_ratio(net.ledger(), &back, 0, 7..=7).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ring_mean_property(k in 1usize..=8, n in 1usize..300, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vectors(&mut rng, k, n);
        let mut net = SimNetwork::new(k);
        let out = ring_allreduce(&mut net, &Topology::ring(k).unwrap(), 0, 0, PayloadKind::Dense, &v, ValueWidth::F32).unwrap();
        prop_assert!(worst_error(&v, &out) <= 1e-6);
        prop_assert_eq!(net.pending(), 0);
    }
}
