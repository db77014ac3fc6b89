use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::RangeInclusive;

use crate::codec::PayloadKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub iteration: u32,
    pub sender: usize,
    pub receiver: usize,
    pub kind: PayloadKind,
}

/// Byte counts per `(iteration, sender, receiver, kind)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RateLedger {
    cells: BTreeMap<CellKey, u64>,
    sent: BTreeMap<usize, u64>,
    received: BTreeMap<usize, u64>,
    sends: u64,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CsvRow {
    iteration: u32,
    sender: usize,
    receiver: usize,
    kind: String,
    bytes: u64,
}

impl RateLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// One transport send; increments exactly one cell.
    pub fn record(&mut self, key: CellKey, bytes: u64) {
        *self.cells.entry(key).or_default() += bytes;
        *self.sent.entry(key.sender).or_default() += bytes;
        self.sends += 1;
    }

    pub fn record_delivery(&mut self, receiver: usize, bytes: u64) {
        *self.received.entry(receiver).or_default() += bytes;
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, &u64)> {
        self.cells.iter()
    }

    pub fn send_count(&self) -> u64 {
        self.sends
    }

    pub fn total_bytes(&self) -> u64 {
        self.cells.values().sum()
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.values().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.received.values().sum()
    }

    pub fn sent_by(&self, node: usize) -> u64 {
        self.sent.get(&node).copied().unwrap_or(0)
    }

    pub fn received_by(&self, node: usize) -> u64 {
        self.received.get(&node).copied().unwrap_or(0)
    }

    pub fn iterations(&self) -> BTreeSet<u32> {
        self.cells.keys().map(|k| k.iteration).collect()
    }

    /// Bytes sent by `node` over the given iterations, optionally restricted to one kind.
    pub fn uplink_bytes(&self, node: usize, iterations: &RangeInclusive<u32>, kind: Option<PayloadKind>) -> u64 {
        self.cells
            .iter()
            .filter(|(k, _)| k.sender == node && iterations.contains(&k.iteration))
            .filter(|(k, _)| kind.is_none_or(|want| k.kind == want))
            .map(|(_, b)| b)
            .sum()
    }

    pub fn bytes_in_iteration(&self, iteration: u32) -> u64 {
        self.cells
            .iter()
            .filter(|(k, _)| k.iteration == iteration)
            .map(|(_, b)| b)
            .sum()
    }

    pub fn kinds_in(&self, iterations: &RangeInclusive<u32>) -> BTreeSet<PayloadKind> {
        self.cells
            .keys()
            .filter(|k| iterations.contains(&k.iteration))
            .map(|k| k.kind)
            .collect()
    }

    /// Copy of this ledger with every cell moved to `iteration`.
    pub fn relabeled(&self, iteration: u32) -> RateLedger {
        let mut out = RateLedger::new();
        for (k, &b) in &self.cells {
            out.record(CellKey { iteration, ..*k }, b);
            out.record_delivery(k.receiver, b);
        }
        out
    }

    pub fn merge(&mut self, other: &RateLedger) {
        for (k, &b) in &other.cells {
            *self.cells.entry(*k).or_default() += b;
        }
        for (&n, &b) in &other.sent {
            *self.sent.entry(n).or_default() += b;
        }
        for (&n, &b) in &other.received {
            *self.received.entry(n).or_default() += b;
        }
        self.sends += other.sends;
    }

    /// CSV with columns `iteration,sender,receiver,kind,bytes`, rows in key order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (k, &bytes) in &self.cells {
            w.serialize(CsvRow {
                iteration: k.iteration,
                sender: k.sender,
                receiver: k.receiver,
                kind: k.kind.name().to_string(),
                bytes,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::format(e.to_string()))
    }

    /// Rebuilds cell totals from CSV. Delivery counters are set to match the
    /// sends, since the CSV records only the latter.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut ledger = RateLedger::new();
        for row in csv::Reader::from_reader(input).deserialize::<CsvRow>() {
            let row = row?;
            let key = CellKey {
                iteration: row.iteration,
                sender: row.sender,
                receiver: row.receiver,
                kind: PayloadKind::parse(&row.kind)?,
            };
            ledger.record(key, row.bytes);
            ledger.record_delivery(row.receiver, row.bytes);
        }
        Ok(ledger)
    }
}

/// `original / compressed`.
pub fn ratio_from_sizes(original: f64, compressed: f64) -> Result<f64> {
    if !(compressed > 0.0) {
        return Err(Error::invalid("compressed size must be positive"));
    }
    Ok(original / compressed)
}

/// Per-node uplink ratio of `baseline` over `ledger` across `iterations`.
pub fn compression_ratio(
    ledger: &RateLedger,
    baseline: &RateLedger,
    node: usize,
    iterations: RangeInclusive<u32>,
) -> Result<f64> {
    let covered = |l: &RateLedger| -> BTreeSet<u32> {
        l.iterations().into_iter().filter(|i| iterations.contains(i)).collect()
    };
    let (a, b) = (covered(ledger), covered(baseline));
    if a != b {
        return Err(Error::invalid(format!(
            "ledgers cover different iterations ({} vs {} in range)",
            a.len(),
            b.len()
        )));
    }
    let compressed = ledger.uplink_bytes(node, &iterations, None);
    if compressed == 0 {
        return Err(Error::invalid(format!("node {node} sent no bytes in the range")));
    }
    ratio_from_sizes(baseline.uplink_bytes(node, &iterations, None) as f64, compressed as f64)
}

/// The two per-node ratios of a parameter-server run: the designated
/// common-code sender, and the mean over the remaining workers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualRatio {
    pub designated: f64,
    pub others: f64,
}

pub fn dual_compression_ratio(
    ledger: &RateLedger,
    baseline: &RateLedger,
    designated: usize,
    workers: usize,
    iterations: RangeInclusive<u32>,
) -> Result<DualRatio> {
    let d = compression_ratio(ledger, baseline, designated, iterations.clone())?;
    let others = (0..workers)
        .filter(|&n| n != designated)
        .map(|n| compression_ratio(ledger, baseline, n, iterations.clone()))
        .collect::<Result<Vec<_>>>()?;
    let others = if others.is_empty() {
        d
    } else {
        others.iter().sum::<f64>() / others.len() as f64
    };
    Ok(DualRatio { designated: d, others })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(iteration: u32, sender: usize, receiver: usize, kind: PayloadKind) -> CellKey {
        CellKey { iteration, sender, receiver, kind }
    }

    #[test]
    fn totals_equal_cell_sums() {
        let mut l = RateLedger::new();
        l.record(key(0, 0, 2, PayloadKind::Dense), 100);
        l.record(key(0, 1, 2, PayloadKind::Dense), 50);
        l.record(key(0, 0, 2, PayloadKind::Dense), 10);
        assert_eq!(l.total_bytes(), 160);
        assert_eq!(l.total_sent(), 160);
        assert_eq!(l.sent_by(0), 110);
        assert_eq!(l.send_count(), 3);
        assert_eq!(l.cells().count(), 2);
    }

    #[test]
    fn reference_ratio_arithmetic() {
        let mb = 1_000_000.0;
        assert_eq!(ratio_from_sizes(170.0 * mb, 0.021 * mb).unwrap().round(), 8095.0);
        assert_eq!(ratio_from_sizes(170.0 * mb, 0.01 * mb).unwrap().round(), 17000.0);
        assert!(ratio_from_sizes(1.0, 0.0).is_err());
    }

    #[test]
    fn self_ratio_is_one() {
        let mut l = RateLedger::new();
        l.record(key(3, 1, 0, PayloadKind::Topk), 77);
        assert_eq!(compression_ratio(&l, &l, 1, 0..=10).unwrap(), 1.0);
        assert!(compression_ratio(&l, &l, 0, 0..=10).is_err());
        let empty = RateLedger::new();
        assert!(compression_ratio(&l, &empty, 1, 0..=10).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut l = RateLedger::new();
        l.record(key(1, 0, 1, PayloadKind::Common), 12);
        l.record(key(0, 2, 1, PayloadKind::Innovation), 30);
        l.record_delivery(1, 42);
        let text = l.to_csv_string().unwrap();
        assert_eq!(text, "iteration,sender,receiver,kind,bytes\n0,2,1,INNOVATION,30\n1,0,1,COMMON,12\n");
        assert_eq!(RateLedger::read_csv(text.as_bytes()).unwrap(), l);
    }
}
