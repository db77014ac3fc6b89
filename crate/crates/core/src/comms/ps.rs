use super::topology::{Pattern, Topology};
use super::transport::{SimNetwork, Tag};
use crate::codec::{CompressedPayload, PayloadKind};
use crate::error::{Error, Result};

pub const UPLINK_ROUND: u32 = 0;
pub const DOWNLINK_ROUND: u32 = 1;

/// One parameter-server exchange.
///
/// Worker `k` sends every payload in `uplink[k]` to the master under the
/// uplink tag. The master checks iterations, applies `reducer` to the
/// received payloads and broadcasts its output to all workers under the
/// downlink tag. Returns what each worker received.
pub fn ps_round<F>(
    net: &mut SimNetwork,
    topo: &Topology,
    iteration: u32,
    uplink: &[Vec<CompressedPayload>],
    reducer: F,
) -> Result<Vec<Vec<CompressedPayload>>>
where
    F: FnOnce(&[Vec<CompressedPayload>]) -> Result<Vec<CompressedPayload>>,
{
    if topo.pattern() != Pattern::ParameterServer {
        return Err(Error::invalid("parameter-server round needs a parameter-server topology"));
    }
    let k = topo.nodes();
    let master = topo.nodes();
    if uplink.len() != k {
        return Err(Error::shape(format!("{} uplink sets for {k} workers", uplink.len())));
    }
    let up = Tag::new(iteration, UPLINK_ROUND);
    for (worker, payloads) in uplink.iter().enumerate() {
        if payloads.is_empty() {
            return Err(Error::protocol(format!("worker {worker} has nothing to send")));
        }
        for p in payloads {
            net.send_payload(worker, master, up, p)?;
        }
    }

    let mut received = Vec::with_capacity(k);
    for worker in 0..k {
        let payloads = net.recv_payloads(worker, master, up)?;
        if let Some(p) = payloads.iter().find(|p| p.iteration != iteration) {
            return Err(Error::protocol(format!(
                "worker {worker} sent a payload for iteration {} during iteration {iteration}",
                p.iteration
            )));
        }
        received.push(payloads);
    }

    let broadcast = reducer(&received)?;
    let down = Tag::new(iteration, DOWNLINK_ROUND);
    for worker in 0..k {
        for p in &broadcast {
            net.send_payload(master, worker, down, p)?;
        }
    }
    (0..k).map(|w| net.recv_payloads(master, w, down)).collect()
}

/// Elementwise mean of each worker's single dense payload.
pub fn dense_mean_reducer(
    iteration: u32,
    master: u16,
) -> impl FnOnce(&[Vec<CompressedPayload>]) -> Result<Vec<CompressedPayload>> {
    move |received| {
        let mut sum: Option<Vec<f64>> = None;
        for set in received {
            let [p] = set.as_slice() else {
                return Err(Error::protocol(format!("expected one dense payload, got {}", set.len())));
            };
            if p.kind != PayloadKind::Dense {
                return Err(Error::protocol(format!("expected DENSE, got {}", p.kind)));
            }
            match &mut sum {
                None => sum = Some(p.values.clone()),
                Some(s) if s.len() == p.values.len() => {
                    s.iter_mut().zip(&p.values).for_each(|(a, b)| *a += b);
                }
                Some(s) => {
                    return Err(Error::shape(format!(
                        "dense payloads of lengths {} and {}",
                        s.len(),
                        p.values.len()
                    )))
                }
            }
        }
        let k = received.len() as f64;
        let mean = sum.unwrap_or_default().into_iter().map(|v| v / k).collect();
        Ok(vec![CompressedPayload::new(PayloadKind::Dense, iteration, master).with_values(mean)])
    }
}
