//! Wire format for everything a node transmits.
//!
//! ```text
//! offset size field
//!      0    4 magic "LGC1"
//!      4    1 version (0x01: f32 values, 0x02: f64 values)
//!      5    4 iteration        u32 LE
//!      9    2 node_id          u16 LE
//!     11    1 kind             u8
//!     12    4 value_count      u32 LE
//!     16    4 index_block_len  u32 LE
//!     20    4 crc32(body)      u32 LE
//!     24    . body: value block, then index block
//! ```
//!
//! The index block is a raw DEFLATE stream over unsigned LEB128 deltas
//! (first index absolute, then `gap - 1`). DENSE payloads carry no index block.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LGC1";
pub const VERSION_F32: u8 = 0x01;
pub const VERSION_F64: u8 = 0x02;
pub const HEADER_LEN: usize = 24;

const DEFLATE_LEVEL: u8 = 9;
/// Upper bound on the DEFLATE expansion ratio, used to cap inflation.
const MAX_INFLATE_RATIO: usize = 1040;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum PayloadKind {
    Topk = 1,
    Common = 2,
    Innovation = 3,
    Dense = 4,
    /// Autoencoder parameters shipped once between training phases.
    Weights = 5,
}

impl PayloadKind {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => PayloadKind::Topk,
            2 => PayloadKind::Common,
            3 => PayloadKind::Innovation,
            4 => PayloadKind::Dense,
            5 => PayloadKind::Weights,
            other => return Err(Error::format(format!("unknown payload kind {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PayloadKind::Topk => "TOPK",
            PayloadKind::Common => "COMMON",
            PayloadKind::Innovation => "INNOVATION",
            PayloadKind::Dense => "DENSE",
            PayloadKind::Weights => "WEIGHTS",
        }
    }

    pub const ALL: [PayloadKind; 5] = [
        PayloadKind::Topk,
        PayloadKind::Common,
        PayloadKind::Innovation,
        PayloadKind::Dense,
        PayloadKind::Weights,
    ];

    /// Kinds whose payloads carry no index block.
    pub fn is_dense(self) -> bool {
        matches!(self, PayloadKind::Dense | PayloadKind::Weights)
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::format(format!("unknown payload kind {name:?}")))
    }
}

impl std::fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueWidth {
    #[default]
    F32,
    F64,
}

impl ValueWidth {
    pub fn bytes(self) -> usize {
        match self {
            ValueWidth::F32 => 4,
            ValueWidth::F64 => 8,
        }
    }

    /// Rounds a value the way the wire would.
    pub fn round(self, v: f64) -> f64 {
        match self {
            ValueWidth::F32 => v as f32 as f64,
            ValueWidth::F64 => v,
        }
    }

    fn version(self) -> u8 {
        match self {
            ValueWidth::F32 => VERSION_F32,
            ValueWidth::F64 => VERSION_F64,
        }
    }

    pub fn encode_into(self, values: &[f64], out: &mut Vec<u8>) {
        match self {
            ValueWidth::F32 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            ValueWidth::F64 => values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Result<Vec<f64>> {
        if bytes.len() % self.bytes() != 0 {
            return Err(Error::format(format!(
                "value block of {} bytes is not a multiple of {}",
                bytes.len(),
                self.bytes()
            )));
        }
        Ok(match self {
            ValueWidth::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            ValueWidth::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedPayload {
    pub iteration: u32,
    pub node_id: u16,
    pub kind: PayloadKind,
    pub width: ValueWidth,
    pub values: Vec<f64>,
    pub indices: Vec<usize>,
}

impl CompressedPayload {
    pub fn new(kind: PayloadKind, iteration: u32, node_id: u16) -> Self {
        Self {
            iteration,
            node_id,
            kind,
            width: ValueWidth::F32,
            values: Vec::new(),
            indices: Vec::new(),
        }
    }

    pub fn with_values(mut self, values: Vec<f64>) -> Self {
        self.values = values;
        self
    }

    pub fn with_indices(mut self, indices: Vec<usize>) -> Self {
        self.indices = indices;
        self
    }

    pub fn with_width(mut self, width: ValueWidth) -> Self {
        self.width = width;
        self
    }
}

/// Block sizes of a serialized payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadSizes {
    pub header: usize,
    pub values: usize,
    pub index: usize,
}

impl PayloadSizes {
    pub fn total(&self) -> usize {
        self.header + self.values + self.index
    }
}

pub fn delta_encode(indices: &[usize]) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(indices.len());
    let mut prev: Option<usize> = None;
    for &i in indices {
        match prev {
            None => out.push(i as u64),
            Some(p) if i > p => out.push((i - p - 1) as u64),
            Some(p) => {
                return Err(Error::invalid(format!(
                    "indices must be strictly increasing ({p} then {i})"
                )))
            }
        }
        prev = Some(i);
    }
    Ok(out)
}

pub fn delta_decode(deltas: &[u64]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(deltas.len());
    let mut next: u64 = 0;
    for (n, &d) in deltas.iter().enumerate() {
        let value = if n == 0 { Some(d) } else { next.checked_add(d) }
            .ok_or_else(|| Error::format("index delta overflow"))?;
        if value > u32::MAX as u64 {
            return Err(Error::format(format!("index {value} exceeds u32 range")));
        }
        out.push(value as usize);
        next = value + 1;
    }
    Ok(out)
}

pub fn leb128_encode(values: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for &v in values {
        let mut v = v;
        loop {
            let byte = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                out.push(byte);
                break;
            }
            out.push(byte | 0x80);
        }
    }
    out
}

pub fn leb128_decode(bytes: &[u8]) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    let mut acc: u64 = 0;
    let mut shift = 0u32;
    let mut pending = false;
    for &b in bytes {
        if shift >= 64 || (shift == 63 && (b & 0x7f) > 1) {
            return Err(Error::format("LEB128 value overflows u64"));
        }
        acc |= ((b & 0x7f) as u64) << shift;
        pending = true;
        if b & 0x80 == 0 {
            out.push(acc);
            acc = 0;
            shift = 0;
            pending = false;
        } else {
            shift += 7;
        }
    }
    if pending {
        return Err(Error::format("truncated LEB128 value"));
    }
    Ok(out)
}

/// DEFLATE-coded index block for `indices`.
pub fn encode_index_block(indices: &[usize]) -> Result<Vec<u8>> {
    let raw = leb128_encode(&delta_encode(indices)?);
    Ok(miniz_oxide::deflate::compress_to_vec(&raw, DEFLATE_LEVEL))
}

pub fn decode_index_block(block: &[u8]) -> Result<Vec<usize>> {
    let limit = block.len().saturating_mul(MAX_INFLATE_RATIO).max(64);
    let raw = miniz_oxide::inflate::decompress_to_vec_with_limit(block, limit)
        .map_err(|e| Error::format(format!("index block is not valid DEFLATE: {e:?}")))?;
    delta_decode(&leb128_decode(&raw)?)
}

pub fn pack_payload(payload: &CompressedPayload) -> Result<Vec<u8>> {
    let index_block = if payload.kind.is_dense() {
        if !payload.indices.is_empty() {
            return Err(Error::invalid(format!("{} payloads carry no indices", payload.kind)));
        }
        Vec::new()
    } else {
        encode_index_block(&payload.indices)?
    };
    let value_count = u32::try_from(payload.values.len())
        .map_err(|_| Error::invalid("too many values for one payload"))?;
    let index_len = u32::try_from(index_block.len())
        .map_err(|_| Error::invalid("index block too large"))?;

    let mut body = Vec::with_capacity(payload.values.len() * payload.width.bytes() + index_block.len());
    payload.width.encode_into(&payload.values, &mut body);
    body.extend_from_slice(&index_block);
    let crc = crc32fast::hash(&body);

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(payload.width.version());
    out.extend_from_slice(&payload.iteration.to_le_bytes());
    out.extend_from_slice(&payload.node_id.to_le_bytes());
    out.push(payload.kind as u8);
    out.extend_from_slice(&value_count.to_le_bytes());
    out.extend_from_slice(&index_len.to_le_bytes());
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn payload_sizes(payload: &CompressedPayload) -> Result<PayloadSizes> {
    let index = if payload.kind.is_dense() {
        0
    } else {
        encode_index_block(&payload.indices)?.len()
    };
    Ok(PayloadSizes {
        header: HEADER_LEN,
        values: payload.values.len() * payload.width.bytes(),
        index,
    })
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

/// Parses one payload from the front of `bytes`, returning it and the bytes consumed.
pub fn unpack_payload_prefix(bytes: &[u8]) -> Result<(CompressedPayload, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format("bad magic"));
    }
    let width = match bytes[4] {
        VERSION_F32 => ValueWidth::F32,
        VERSION_F64 => ValueWidth::F64,
        v => return Err(Error::format(format!("unsupported version {v:#04x}"))),
    };
    let iteration = le_u32(&bytes[5..9]);
    let node_id = u16::from_le_bytes([bytes[9], bytes[10]]);
    let kind = PayloadKind::from_byte(bytes[11])?;
    let value_count = le_u32(&bytes[12..16]) as usize;
    let index_len = le_u32(&bytes[16..20]) as usize;
    let crc = le_u32(&bytes[20..24]);

    let value_len = value_count
        .checked_mul(width.bytes())
        .ok_or_else(|| Error::format("value block length overflows"))?;
    let body_len = value_len
        .checked_add(index_len)
        .ok_or_else(|| Error::format("body length overflows"))?;
    let end = HEADER_LEN
        .checked_add(body_len)
        .ok_or_else(|| Error::format("body length overflows"))?;
    if bytes.len() < end {
        return Err(Error::format(format!(
            "truncated body: {} of {body_len} bytes",
            bytes.len() - HEADER_LEN
        )));
    }
    let body = &bytes[HEADER_LEN..end];
    let actual = crc32fast::hash(body);
    if actual != crc {
        return Err(Error::Corruption {
            expected: crc,
            actual,
        });
    }
    if kind.is_dense() && index_len != 0 {
        return Err(Error::format(format!("{kind} payload with an index block")));
    }
    let values = width.decode(&body[..value_len])?;
    let indices = if kind.is_dense() {
        Vec::new()
    } else {
        decode_index_block(&body[value_len..])?
    };
    Ok((
        CompressedPayload {
            iteration,
            node_id,
            kind,
            width,
            values,
            indices,
        },
        end,
    ))
}

/// Parses exactly one payload; trailing bytes are an error.
pub fn unpack_payload(bytes: &[u8]) -> Result<CompressedPayload> {
    let (payload, used) = unpack_payload_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(payload)
}

/// Parses a back-to-back sequence of payloads.
pub fn unpack_bundle(mut bytes: &[u8]) -> Result<Vec<CompressedPayload>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (p, used) = unpack_payload_prefix(bytes)?;
        out.push(p);
        bytes = &bytes[used..];
    }
    Ok(out)
}
