//! Length-prefixed request/response framing between the orchestrator and
//! device workers.
//!
//! A frame is `{u32 big-endian header length}{JSON header}{binary payload}`.
//! The JSON header is `{"payload_len": n, "message": ...}` and the payload is
//! exactly `n` bytes.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_HEADER_BYTES: u32 = 16 << 20;
pub const MAX_PAYLOAD_BYTES: u64 = 4 << 30;

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("frame header of {0} bytes exceeds limit")]
    HeaderTooLarge(u32),
    #[error("payload of {0} bytes exceeds limit")]
    PayloadTooLarge(u64),
    #[error("bad frame header: {0}")]
    BadHeader(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct HeaderOut<'a, T> {
    payload_len: u64,
    message: &'a T,
}

#[derive(Deserialize)]
struct HeaderIn<T> {
    payload_len: u64,
    message: T,
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, message: &T, payload: &[u8]) -> Result<(), WireError> {
    let header = serde_json::to_vec(&HeaderOut {
        payload_len: payload.len() as u64,
        message,
    })?;
    let len = u32::try_from(header.len()).map_err(|_| WireError::HeaderTooLarge(u32::MAX))?;
    if len > MAX_HEADER_BYTES {
        return Err(WireError::HeaderTooLarge(len));
    }
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before any
/// header byte.
pub fn read_frame<R: Read, T: DeserializeOwned>(
    r: &mut R,
    max_payload: u64,
) -> Result<Option<(T, Vec<u8>)>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(WireError::HeaderTooLarge(len));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    let header: HeaderIn<T> = serde_json::from_slice(&header)?;
    if header.payload_len > max_payload.min(MAX_PAYLOAD_BYTES) {
        return Err(WireError::PayloadTooLarge(header.payload_len));
    }
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some((header.message, payload)))
}
