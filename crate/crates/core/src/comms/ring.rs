use super::topology::{Pattern, Topology};
use super::transport::{SimNetwork, Tag};
use crate::codec::{CompressedPayload, PayloadKind, ValueWidth};
use crate::error::{Error, Result};

/// Contiguous chunk bounds; the last chunk absorbs the remainder.
pub fn chunk_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / parts;
    (0..parts)
        .map(|c| {
            let start = c * base;
            let end = if c + 1 == parts { n } else { start + base };
            start..end
        })
        .collect()
}

/// Rounds used by one allreduce over `nodes` nodes.
pub fn ring_rounds(nodes: usize) -> u32 {
    2 * (nodes as u32).saturating_sub(1)
}

/// Ring allreduce of `vectors` (indexed by node id) to their elementwise mean.
///
/// Uses tags `(iteration, first_round ..first_round + ring_rounds(K))`. Every
/// hop carries `width` values; the chunk owner divides by K and rounds before
/// the allgather. Returns the vector each node holds at the end.
pub fn ring_allreduce(
    net: &mut SimNetwork,
    topo: &Topology,
    iteration: u32,
    first_round: u32,
    kind: PayloadKind,
    vectors: &[Vec<f64>],
    width: ValueWidth,
) -> Result<Vec<Vec<f64>>> {
    if topo.pattern() != Pattern::Ring {
        return Err(Error::invalid("ring allreduce needs a ring topology"));
    }
    let k = topo.nodes();
    if vectors.len() != k {
        return Err(Error::shape(format!("{} vectors for {k} nodes", vectors.len())));
    }
    let n = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != n) {
        return Err(Error::shape(format!("vector of length {} among length {n}", bad.len())));
    }
    if k == 1 {
        return Ok(vectors.to_vec());
    }
    let order = topo.ring_order();
    let chunks = chunk_ranges(n, k);
    let mut state: Vec<Vec<f64>> = order.iter().map(|&id| vectors[id].clone()).collect();

    let mut round = first_round;
    let mut exchange = |net: &mut SimNetwork, state: &mut [Vec<f64>], step: usize, gather: bool| -> Result<()> {
        let tag = Tag::new(iteration, round);
        let chunk_of = |p: usize| {
            if gather {
                (p + 1 + k - step) % k
            } else {
                (p + k - step) % k
            }
        };
        for p in 0..k {
            let mut body = Vec::with_capacity(chunks[chunk_of(p)].len() * width.bytes());
            width.encode_into(&state[p][chunks[chunk_of(p)].clone()], &mut body);
            net.send(order[p], order[(p + 1) % k], tag, kind, body)?;
        }
        for p in 0..k {
            let from = (p + k - 1) % k;
            let range = chunks[chunk_of(from)].clone();
            let msg = net.recv(order[from], order[p], tag)?;
            let values = width.decode(&msg.body)?;
            if values.len() != range.len() {
                return Err(Error::protocol(format!(
                    "chunk of {} values where {} expected",
                    values.len(),
                    range.len()
                )));
            }
            let dst = &mut state[p][range];
            if gather {
                dst.copy_from_slice(&values);
            } else {
                dst.iter_mut().zip(&values).for_each(|(d, v)| *d += v);
            }
        }
        round += 1;
        Ok(())
    };

    for step in 0..k - 1 {
        exchange(net, &mut state, step, false)?;
    }
    let scale = k as f64;
    for (p, s) in state.iter_mut().enumerate() {
        for v in &mut s[chunks[(p + 1) % k].clone()] {
            *v = width.round(*v / scale);
        }
    }
    for step in 0..k - 1 {
        exchange(net, &mut state, step, true)?;
    }

    let mut out = vec![Vec::new(); k];
    for (p, s) in state.into_iter().enumerate() {
        out[order[p]] = s;
    }
    Ok(out)
}

/// Circulates each node's payloads around the ring for `K - 1` rounds, after
/// which every node holds every other node's payloads. Returns, per node id,
/// the payload sets of all nodes indexed by originating node id.
pub fn ring_allgather(
    net: &mut SimNetwork,
    topo: &Topology,
    iteration: u32,
    first_round: u32,
    payloads: &[Vec<CompressedPayload>],
) -> Result<Vec<Vec<Vec<CompressedPayload>>>> {
    if topo.pattern() != Pattern::Ring {
        return Err(Error::invalid("ring allgather needs a ring topology"));
    }
    let k = topo.nodes();
    if payloads.len() != k {
        return Err(Error::shape(format!("{} payload sets for {k} nodes", payloads.len())));
    }
    let order = topo.ring_order();
    let mut held: Vec<Vec<Option<Vec<CompressedPayload>>>> = vec![vec![None; k]; k];
    for (id, set) in payloads.iter().enumerate() {
        held[id][id] = Some(set.clone());
    }
    for step in 0..k.saturating_sub(1) {
        let tag = Tag::new(iteration, first_round + step as u32);
        for p in 0..k {
            let origin = order[(p + k - step) % k];
            let set = held[order[p]][origin].as_ref().expect("forwarded set present");
            for payload in set {
                net.send_payload(order[p], order[(p + 1) % k], tag, payload)?;
            }
        }
        for p in 0..k {
            let from = (p + k - 1) % k;
            let origin = order[(from + k - step) % k];
            let set = net.recv_payloads(order[from], order[p], tag)?;
            held[order[p]][origin] = Some(set);
        }
    }
    Ok(held
        .into_iter()
        .map(|row| row.into_iter().map(|s| s.expect("every set gathered")).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allgather_delivers_every_set() {
        let topo = Topology::ring_with_order(vec![1, 3, 0, 2]).unwrap();
        let mut net = SimNetwork::new(4);
        let sets: Vec<Vec<CompressedPayload>> = (0..4u16)
            .map(|n| {
                vec![CompressedPayload::new(PayloadKind::Topk, 2, n)
                    .with_values(vec![n as f64])
                    .with_indices(vec![n as usize * 3])]
            })
            .collect();
        let out = ring_allgather(&mut net, &topo, 2, 5, &sets).unwrap();
        for row in &out {
            assert_eq!(row, &sets);
        }
        for node in 0..4 {
            assert_eq!(net.send_rounds(node, 2), 3);
        }
        assert_eq!(net.pending(), 0);
    }

    #[test]
    fn chunks_cover_range() {
        assert_eq!(chunk_ranges(10, 3), vec![0..3, 3..6, 6..10]);
        assert_eq!(chunk_ranges(2, 3), vec![0..0, 0..0, 0..2]);
    }

    #[test]
    fn three_node_mean() {
        let topo = Topology::ring(3).unwrap();
        let mut net = SimNetwork::new(3);
        let v = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        let out = ring_allreduce(&mut net, &topo, 0, 0, PayloadKind::Dense, &v, ValueWidth::F32).unwrap();
        for o in &out {
            assert_eq!(o, &vec![4.0, 5.0, 6.0]);
        }
        for node in 0..3 {
            assert_eq!(net.send_rounds(node, 0), 4);
            assert_eq!(net.recv_rounds(node, 0), 4);
        }
        assert_eq!(net.pending(), 0);
    }

    #[test]
    fn single_node_is_identity() {
        let topo = Topology::ring(1).unwrap();
        let mut net = SimNetwork::new(1);
        let v = vec![vec![0.1, 0.2]];
        let out = ring_allreduce(&mut net, &topo, 0, 0, PayloadKind::Dense, &v, ValueWidth::F32).unwrap();
        assert_eq!(out, v);
        assert_eq!(net.ledger().total_bytes(), 0);
    }

    #[test]
    fn bytes_follow_chunk_arithmetic() {
        for k in [2usize, 3, 4, 5, 8] {
            let n = 40 * k;
            let topo = Topology::ring(k).unwrap();
            let mut net = SimNetwork::new(k);
            let v: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64; n]).collect();
            ring_allreduce(&mut net, &topo, 0, 0, PayloadKind::Dense, &v, ValueWidth::F32).unwrap();
            let expected = 2 * (k - 1) * n * 4 / k;
            for node in 0..k {
                assert_eq!(net.ledger().sent_by(node) as usize, expected);
            }
        }
    }

    #[test]
    fn permuted_order_and_mismatch() {
        let topo = Topology::ring_with_order(vec![2, 0, 3, 1]).unwrap();
        let mut net = SimNetwork::new(4);
        let v: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, -(i as f64), 0.5, 1.0, 2.0]).collect();
        let out = ring_allreduce(&mut net, &topo, 3, 0, PayloadKind::Topk, &v, ValueWidth::F64).unwrap();
        for o in &out {
            assert_eq!(o, &vec![1.5, -1.5, 0.5, 1.0, 2.0]);
        }
        let bad = vec![vec![1.0], vec![1.0, 2.0], vec![0.0], vec![0.0]];
        assert!(ring_allreduce(&mut net, &topo, 4, 0, PayloadKind::Dense, &bad, ValueWidth::F32).is_err());
    }
}
