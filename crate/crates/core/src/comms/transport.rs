use std::collections::{BTreeMap, VecDeque};
use std::net::{TcpListener, TcpStream};
use std::thread::JoinHandle;

use super::frame::{read_frame, write_frame, DEFAULT_MAX_FRAME};
use super::ledger::{CellKey, RateLedger};
use crate::codec::{pack_payload, unpack_payload, CompressedPayload, PayloadKind};
use crate::error::{Error, Result};

/// Message tag: iteration plus a protocol round within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub iteration: u32,
    pub round: u32,
}

impl Tag {
    pub fn new(iteration: u32, round: u32) -> Self {
        Self { iteration, round }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub sender: usize,
    pub receiver: usize,
    pub tag: Tag,
    pub kind: PayloadKind,
    pub body: Vec<u8>,
    pub sent_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub sender: usize,
    pub receiver: usize,
    pub tag: Tag,
    pub kind: PayloadKind,
    pub bytes: usize,
    pub clock: u64,
}

/// Echoes every body through a loopback TCP connection before queueing it.
struct TcpRelay {
    stream: TcpStream,
    server: Option<JoinHandle<()>>,
}

impl TcpRelay {
    fn start() -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let server = std::thread::spawn(move || {
            let Ok((mut conn, _)) = listener.accept() else {
                return;
            };
            while let Ok(body) = read_frame(&mut conn, DEFAULT_MAX_FRAME) {
                if write_frame(&mut conn, &body).is_err() {
                    break;
                }
            }
        });
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            server: Some(server),
        })
    }

    fn relay(&mut self, body: &[u8]) -> Result<Vec<u8>> {
        write_frame(&mut self.stream, body)?;
        read_frame(&mut self.stream, DEFAULT_MAX_FRAME)
    }
}

impl Drop for TcpRelay {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        if let Some(h) = self.server.take() {
            let _ = h.join();
        }
    }
}

/// In-process deterministic transport with a logical clock and byte ledger.
pub struct SimNetwork {
    endpoints: usize,
    clock: u64,
    queues: BTreeMap<(usize, usize, Tag), VecDeque<Message>>,
    ledger: RateLedger,
    log: Vec<LogEntry>,
    relay: Option<TcpRelay>,
}

impl SimNetwork {
    pub fn new(endpoints: usize) -> Self {
        Self {
            endpoints,
            clock: 0,
            queues: BTreeMap::new(),
            ledger: RateLedger::new(),
            log: Vec::new(),
            relay: None,
        }
    }

    /// Same as `new`, but every message body crosses a loopback TCP socket
    /// as a length-prefixed frame.
    pub fn with_tcp_loopback(endpoints: usize) -> Result<Self> {
        let mut net = Self::new(endpoints);
        net.relay = Some(TcpRelay::start()?);
        Ok(net)
    }

    pub fn endpoints(&self) -> usize {
        self.endpoints
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn ledger(&self) -> &RateLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> RateLedger {
        self.ledger
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    fn check_endpoint(&self, id: usize) -> Result<()> {
        if id >= self.endpoints {
            return Err(Error::protocol(format!(
                "endpoint {id} out of range for {} endpoints",
                self.endpoints
            )));
        }
        Ok(())
    }

    pub fn send(&mut self, sender: usize, receiver: usize, tag: Tag, kind: PayloadKind, body: Vec<u8>) -> Result<()> {
        self.check_endpoint(sender)?;
        self.check_endpoint(receiver)?;
        if sender == receiver {
            return Err(Error::protocol(format!("node {sender} sending to itself")));
        }
        let body = match &mut self.relay {
            Some(relay) => relay.relay(&body)?,
            None => body,
        };
        self.clock += 1;
        let bytes = body.len();
        self.ledger.record(
            CellKey {
                iteration: tag.iteration,
                sender,
                receiver,
                kind,
            },
            bytes as u64,
        );
        self.log.push(LogEntry {
            sender,
            receiver,
            tag,
            kind,
            bytes,
            clock: self.clock,
        });
        self.queues.entry((sender, receiver, tag)).or_default().push_back(Message {
            sender,
            receiver,
            tag,
            kind,
            body,
            sent_at: self.clock,
        });
        Ok(())
    }

    pub fn send_payload(&mut self, sender: usize, receiver: usize, tag: Tag, payload: &CompressedPayload) -> Result<()> {
        self.send(sender, receiver, tag, payload.kind, pack_payload(payload)?)
    }

    fn deliver(&mut self, m: &Message) {
        self.ledger.record_delivery(m.receiver, m.body.len() as u64);
    }

    /// Oldest pending message on `(sender, receiver, tag)`.
    pub fn recv(&mut self, sender: usize, receiver: usize, tag: Tag) -> Result<Message> {
        let key = (sender, receiver, tag);
        let queue = self.queues.get_mut(&key);
        let m = queue.and_then(|q| q.pop_front()).ok_or_else(|| {
            Error::protocol(format!(
                "no message from {sender} to {receiver} at iteration {} round {}",
                tag.iteration, tag.round
            ))
        })?;
        if self.queues.get(&key).is_some_and(|q| q.is_empty()) {
            self.queues.remove(&key);
        }
        self.deliver(&m);
        Ok(m)
    }

    /// Drains every pending message on `(sender, receiver, tag)` in FIFO order.
    pub fn recv_all(&mut self, sender: usize, receiver: usize, tag: Tag) -> Vec<Message> {
        let msgs: Vec<Message> = self
            .queues
            .remove(&(sender, receiver, tag))
            .map(Vec::from)
            .unwrap_or_default();
        for m in &msgs {
            self.deliver(m);
        }
        msgs
    }

    pub fn recv_payloads(&mut self, sender: usize, receiver: usize, tag: Tag) -> Result<Vec<CompressedPayload>> {
        self.recv_all(sender, receiver, tag)
            .iter()
            .map(|m| {
                let p = unpack_payload(&m.body)?;
                if p.kind != m.kind {
                    return Err(Error::protocol(format!("{} payload sent as {}", p.kind, m.kind)));
                }
                Ok(p)
            })
            .collect()
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    /// Distinct `(iteration, round)` tags on which `node` sent something.
    pub fn send_rounds(&self, node: usize, iteration: u32) -> usize {
        let mut rounds: Vec<u32> = self
            .log
            .iter()
            .filter(|e| e.sender == node && e.tag.iteration == iteration)
            .map(|e| e.tag.round)
            .collect();
        rounds.sort_unstable();
        rounds.dedup();
        rounds.len()
    }

    pub fn recv_rounds(&self, node: usize, iteration: u32) -> usize {
        let mut rounds: Vec<u32> = self
            .log
            .iter()
            .filter(|e| e.receiver == node && e.tag.iteration == iteration)
            .map(|e| e.tag.round)
            .collect();
        rounds.sort_unstable();
        rounds.dedup();
        rounds.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_per_tag_and_exactly_once() {
        let mut net = SimNetwork::new(3);
        let t0 = Tag::new(0, 0);
        let t1 = Tag::new(0, 1);
        net.send(0, 1, t0, PayloadKind::Dense, vec![1]).unwrap();
        net.send(0, 1, t1, PayloadKind::Dense, vec![9]).unwrap();
        net.send(0, 1, t0, PayloadKind::Dense, vec![2, 2]).unwrap();
        assert_eq!(net.recv(0, 1, t0).unwrap().body, vec![1]);
        assert_eq!(net.recv(0, 1, t0).unwrap().body, vec![2, 2]);
        assert!(net.recv(0, 1, t0).is_err());
        assert_eq!(net.recv(0, 1, t1).unwrap().body, vec![9]);
        assert_eq!(net.pending(), 0);
        assert_eq!(net.ledger().total_sent(), 4);
        assert_eq!(net.ledger().total_received(), 4);
        assert_eq!(net.clock(), 3);
    }

    #[test]
    fn rejects_bad_endpoints() {
        let mut net = SimNetwork::new(2);
        assert!(net.send(0, 2, Tag::new(0, 0), PayloadKind::Dense, vec![]).is_err());
        assert!(net.send(1, 1, Tag::new(0, 0), PayloadKind::Dense, vec![]).is_err());
        assert_eq!(net.ledger().send_count(), 0);
    }

    #[test]
    fn tcp_loopback_carries_same_bytes() {
        let payload = CompressedPayload::new(PayloadKind::Topk, 7, 1)
            .with_values(vec![0.5, -1.25])
            .with_indices(vec![3, 40]);
        let mut sim = SimNetwork::new(2);
        let mut tcp = SimNetwork::with_tcp_loopback(2).unwrap();
        for net in [&mut sim, &mut tcp] {
            net.send_payload(1, 0, Tag::new(7, 0), &payload).unwrap();
        }
        assert_eq!(sim.ledger(), tcp.ledger());
        let a = sim.recv_payloads(1, 0, Tag::new(7, 0)).unwrap();
        let b = tcp.recv_payloads(1, 0, Tag::new(7, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], payload);
    }
}
