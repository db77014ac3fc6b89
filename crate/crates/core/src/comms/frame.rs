use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_FRAME: usize = 1 << 28;

/// Writes `body` with a u32 LE length prefix.
pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| Error::invalid("frame larger than 4 GiB"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one length-prefixed frame, rejecting lengths above `max_len`.
pub fn read_frame<R: Read>(r: &mut R, max_len: usize) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > max_len {
        return Err(Error::format(format!("frame of {len} bytes exceeds limit {max_len}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

/// Splits a buffer of back-to-back frames.
pub fn split_frames(mut bytes: &[u8], max_len: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        out.push(read_frame(&mut bytes, max_len).map_err(|e| match e {
            Error::Io(_) => Error::format("truncated frame"),
            other => other,
        })?);
    }
    Ok(out)
}
