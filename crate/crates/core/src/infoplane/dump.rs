use std::io::Write;

use crate::error::{Error, Result};

pub const DUMP_MAGIC: [u8; 4] = *b"LGCD";
pub const DUMP_VERSION: u8 = 1;
const DUMP_HEADER_LEN: usize = 13;

/// Raw per-layer gradients, `iterations[t][node][layer]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientDump {
    pub nodes: usize,
    pub layer_lengths: Vec<usize>,
    pub iterations: Vec<Vec<Vec<Vec<f32>>>>,
}

impl GradientDump {
    pub fn new(nodes: usize, layer_lengths: Vec<usize>) -> Self {
        Self {
            nodes,
            layer_lengths,
            iterations: Vec::new(),
        }
    }

    /// Appends one iteration of flat per-node gradients, split by layer.
    pub fn push_flat(&mut self, per_node: &[Vec<f64>]) -> Result<()> {
        if per_node.len() != self.nodes {
            return Err(Error::shape(format!("{} gradients for {} nodes", per_node.len(), self.nodes)));
        }
        let total: usize = self.layer_lengths.iter().sum();
        let mut it = Vec::with_capacity(self.nodes);
        for g in per_node {
            if g.len() != total {
                return Err(Error::shape(format!("gradient of {} values, layout covers {total}", g.len())));
            }
            let mut start = 0;
            let layers = self
                .layer_lengths
                .iter()
                .map(|&len| {
                    let seg = g[start..start + len].iter().map(|&v| v as f32).collect();
                    start += len;
                    seg
                })
                .collect();
            it.push(layers);
        }
        self.iterations.push(it);
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let nodes = u32::try_from(self.nodes).map_err(|_| Error::invalid("too many nodes"))?;
        let layers = u32::try_from(self.layer_lengths.len()).map_err(|_| Error::invalid("too many layers"))?;
        out.write_all(&DUMP_MAGIC)?;
        out.write_all(&[DUMP_VERSION])?;
        out.write_all(&nodes.to_le_bytes())?;
        out.write_all(&layers.to_le_bytes())?;
        let mut buf = Vec::new();
        for it in &self.iterations {
            for node in it {
                for (id, layer) in node.iter().enumerate() {
                    buf.clear();
                    buf.extend_from_slice(&(id as u32).to_le_bytes());
                    buf.extend_from_slice(&(layer.len() as u32).to_le_bytes());
                    layer.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
                    out.write_all(&buf)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DUMP_HEADER_LEN {
            return Err(Error::format("truncated dump header"));
        }
        if bytes[..4] != DUMP_MAGIC {
            return Err(Error::format("bad dump magic"));
        }
        if bytes[4] != DUMP_VERSION {
            return Err(Error::format(format!("unsupported dump version {}", bytes[4])));
        }
        let u32_at = |b: &[u8], at: usize| u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"));
        let nodes = u32_at(bytes, 5) as usize;
        let layer_count = u32_at(bytes, 9) as usize;
        if nodes == 0 || layer_count == 0 {
            return Err(Error::format("dump declares no nodes or no layers"));
        }
        let mut rest = &bytes[DUMP_HEADER_LEN..];
        if rest.is_empty() {
            return Err(Error::format("dump contains no iterations"));
        }
        if nodes.checked_mul(layer_count).and_then(|r| r.checked_mul(8)).is_none_or(|b| b > rest.len()) {
            return Err(Error::format(format!(
                "header declares {nodes} nodes x {layer_count} layers, more records than {} bytes hold",
                rest.len()
            )));
        }
        let mut dump = GradientDump::new(nodes, Vec::new());
        while !rest.is_empty() {
            let mut it = Vec::with_capacity(nodes);
            for node in 0..nodes {
                let mut layers = Vec::with_capacity(layer_count);
                for layer in 0..layer_count {
                    if rest.len() < 8 {
                        return Err(Error::format("truncated record header"));
                    }
                    let id = u32_at(rest, 0) as usize;
                    let len = u32_at(rest, 4) as usize;
                    if id != layer {
                        return Err(Error::format(format!(
                            "record for layer {id} where layer {layer} of node {node} expected"
                        )));
                    }
                    let body = len
                        .checked_mul(4)
                        .filter(|&b| b <= rest.len() - 8)
                        .ok_or_else(|| Error::format("truncated record body"))?;
                    match dump.layer_lengths.get(layer) {
                        Some(&want) if want != len => {
                            return Err(Error::format(format!(
                                "layer {layer} has length {len}, earlier records had {want}"
                            )))
                        }
                        Some(_) => {}
                        None => dump.layer_lengths.push(len),
                    }
                    layers.push(
                        rest[8..8 + body]
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    );
                    rest = &rest[8 + body..];
                }
                it.push(layers);
            }
            dump.iterations.push(it);
        }
        Ok(dump)
    }

    /// Streams of `(node_a, node_b)` per layer per iteration.
    pub fn pairs(&self, node_a: usize, node_b: usize) -> Result<Vec<Vec<(Vec<f64>, Vec<f64>)>>> {
        if node_a >= self.nodes || node_b >= self.nodes {
            return Err(Error::invalid(format!("dump has {} nodes", self.nodes)));
        }
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok((0..self.layer_lengths.len())
            .map(|l| {
                self.iterations
                    .iter()
                    .map(|it| (widen(&it[node_a][l]), widen(&it[node_b][l])))
                    .collect()
            })
            .collect())
    }
}
