//! Binary wire protocol between learners and parameter machines.
//!
//! Every frame is `u32 payload_len` (little-endian), `u8 opcode`, then
//! `payload_len` bytes of payload. Requests: GET_BATCH (0x01), PUT_BATCH
//! (0x02), STATS (0x03). Replies mirror them at 0x81/0x82/0x83; 0x7F is the
//! error reply. Batches carry at most [`MAX_BATCH`] entries.

use std::io::{Read, Write};

use thiserror::Error;

pub const OP_GET_BATCH: u8 = 0x01;
pub const OP_PUT_BATCH: u8 = 0x02;
pub const OP_STATS: u8 = 0x03;
pub const OP_GET_REPLY: u8 = 0x81;
pub const OP_PUT_REPLY: u8 = 0x82;
pub const OP_STATS_REPLY: u8 = 0x83;
pub const OP_ERROR: u8 = 0x7F;

/// Maximum entries per GET/PUT batch.
pub const MAX_BATCH: usize = 4096;

/// Error codes carried in 0x7F frames.
pub mod error_code {
    pub const MALFORMED: u16 = 1;
    pub const BATCH_TOO_LARGE: u16 = 2;
    pub const WIDTH_MISMATCH: u16 = 3;
    pub const UNKNOWN_OPCODE: u16 = 4;
    pub const FRAME_TOO_LARGE: u16 = 5;
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame payload of {len} bytes exceeds limit {max}")]
    FrameTooLarge { len: u32, max: u32 },
    #[error("malformed frame (code {code}): {detail}")]
    Malformed { code: u16, detail: String },
    #[error("unexpected opcode 0x{0:02x}")]
    UnexpectedOpcode(u8),
    #[error("server error (code {code}): {detail}")]
    Remote { code: u16, detail: String },
}

impl ProtocolError {
    fn malformed(detail: impl Into<String>) -> Self {
        ProtocolError::Malformed {
            code: error_code::MALFORMED,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    GetBatch { keys: Vec<u64> },
    PutBatch { entries: Vec<(u64, Vec<f32>)> },
    Stats,
}

/// Server counter snapshot carried by STATS replies, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub gets: u64,
    pub puts: u64,
    pub lazy_inits: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    GetReply { entries: Vec<(u64, Vec<f32>)> },
    PutReply { acked: u32 },
    StatsReply { counters: CounterSnapshot },
    Error { code: u16, detail: String },
}

/// Writes one frame; returns bytes put on the wire.
pub fn write_frame(w: &mut impl Write, opcode: u8, payload: &[u8]) -> std::io::Result<u64> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(&[opcode])?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(5 + payload.len() as u64)
}

/// Reads one frame, enforcing `max_payload`. A `FrameTooLarge` result means
/// the stream cannot be resynchronized and the connection should be closed.
pub fn read_frame(r: &mut impl Read, max_payload: u32) -> Result<(u8, Vec<u8>), ProtocolError> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]);
    if len > max_payload {
        return Err(ProtocolError::FrameTooLarge {
            len,
            max: max_payload,
        });
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok((head[4], payload))
}

/// Payload limit for a given vector width, with room for the largest legal
/// batch plus header slack.
pub fn max_payload_for_width(width: usize) -> u32 {
    (16 + MAX_BATCH * (8 + 4 * width)) as u32
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::malformed(format!("truncated {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ProtocolError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ProtocolError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ProtocolError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, ProtocolError> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self, what: &str) -> Result<(), ProtocolError> {
        if self.pos != self.buf.len() {
            return Err(ProtocolError::malformed(format!(
                "{} trailing bytes after {what}",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_request(req: &Request) -> (u8, Vec<u8>) {
    match req {
        Request::GetBatch { keys } => {
            let mut payload = Vec::with_capacity(4 + keys.len() * 8);
            payload.extend_from_slice(&(keys.len() as u32).to_le_bytes());
            for key in keys {
                payload.extend_from_slice(&key.to_le_bytes());
            }
            (OP_GET_BATCH, payload)
        }
        Request::PutBatch { entries } => {
            let width = entries.first().map_or(0, |(_, v)| v.len());
            let mut payload = Vec::with_capacity(4 + entries.len() * (8 + 4 * width));
            payload.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for (key, vector) in entries {
                payload.extend_from_slice(&key.to_le_bytes());
                for &x in vector {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
            (OP_PUT_BATCH, payload)
        }
        Request::Stats => (OP_STATS, Vec::new()),
    }
}

/// Decodes a request frame. `width` is the server's configured vector width,
/// used to slice PUT entries.
pub fn decode_request(opcode: u8, payload: &[u8], width: usize) -> Result<Request, ProtocolError> {
    match opcode {
        OP_GET_BATCH => {
            let mut c = Cursor::new(payload);
            let n = c.u32("batch size")? as usize;
            check_batch(n)?;
            let mut keys = Vec::with_capacity(n);
            for _ in 0..n {
                keys.push(c.u64("key")?);
            }
            c.finish("GET_BATCH")?;
            Ok(Request::GetBatch { keys })
        }
        OP_PUT_BATCH => {
            let mut c = Cursor::new(payload);
            let n = c.u32("batch size")? as usize;
            check_batch(n)?;
            let body = payload.len() - 4;
            let per_entry = 8 + 4 * width;
            if n != 0 && body != n * per_entry {
                // distinguish a consistent-but-wrong width from garbage
                if body.is_multiple_of(n) && body / n >= 8 && (body / n - 8).is_multiple_of(4) {
                    return Err(ProtocolError::Malformed {
                        code: error_code::WIDTH_MISMATCH,
                        detail: format!(
                            "put vectors have {} slots, server width is {width}",
                            (body / n - 8) / 4
                        ),
                    });
                }
                return Err(ProtocolError::malformed("put payload size mismatch"));
            }
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let key = c.u64("key")?;
                let mut vector = vec![0.0f32; width];
                for slot in vector.iter_mut() {
                    *slot = c.f32("factor value")?;
                }
                entries.push((key, vector));
            }
            c.finish("PUT_BATCH")?;
            Ok(Request::PutBatch { entries })
        }
        OP_STATS => {
            Cursor::new(payload).finish("STATS")?;
            Ok(Request::Stats)
        }
        other => Err(ProtocolError::Malformed {
            code: error_code::UNKNOWN_OPCODE,
            detail: format!("unknown opcode 0x{other:02x}"),
        }),
    }
}

pub fn encode_response(resp: &Response) -> (u8, Vec<u8>) {
    match resp {
        Response::GetReply { entries } => {
            let width = entries.first().map_or(0, |(_, v)| v.len());
            let mut payload = Vec::with_capacity(4 + entries.len() * (8 + 4 * width));
            payload.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for (key, vector) in entries {
                payload.extend_from_slice(&key.to_le_bytes());
                for &x in vector {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
            (OP_GET_REPLY, payload)
        }
        Response::PutReply { acked } => (OP_PUT_REPLY, acked.to_le_bytes().to_vec()),
        Response::StatsReply { counters } => {
            let mut payload = Vec::with_capacity(40);
            for v in [
                counters.gets,
                counters.puts,
                counters.lazy_inits,
                counters.bytes_in,
                counters.bytes_out,
            ] {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            (OP_STATS_REPLY, payload)
        }
        Response::Error { code, detail } => {
            let bytes = detail.as_bytes();
            let mut payload = Vec::with_capacity(4 + bytes.len());
            payload.extend_from_slice(&code.to_le_bytes());
            payload.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            payload.extend_from_slice(bytes);
            (OP_ERROR, payload)
        }
    }
}

/// Decodes a response frame. `width` is the client's configured vector width.
pub fn decode_response(opcode: u8, payload: &[u8], width: usize) -> Result<Response, ProtocolError> {
    match opcode {
        OP_GET_REPLY => {
            let mut c = Cursor::new(payload);
            let n = c.u32("batch size")? as usize;
            check_batch(n)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let key = c.u64("key")?;
                let mut vector = vec![0.0f32; width];
                for slot in vector.iter_mut() {
                    *slot = c.f32("factor value")?;
                }
                entries.push((key, vector));
            }
            c.finish("GET reply")?;
            Ok(Response::GetReply { entries })
        }
        OP_PUT_REPLY => {
            let mut c = Cursor::new(payload);
            let acked = c.u32("ack count")?;
            c.finish("PUT reply")?;
            Ok(Response::PutReply { acked })
        }
        OP_STATS_REPLY => {
            let mut c = Cursor::new(payload);
            let counters = CounterSnapshot {
                gets: c.u64("gets")?,
                puts: c.u64("puts")?,
                lazy_inits: c.u64("lazy_inits")?,
                bytes_in: c.u64("bytes_in")?,
                bytes_out: c.u64("bytes_out")?,
            };
            c.finish("STATS reply")?;
            Ok(Response::StatsReply { counters })
        }
        OP_ERROR => {
            let mut c = Cursor::new(payload);
            let code = c.u16("error code")?;
            let len = c.u16("detail length")? as usize;
            let detail = String::from_utf8_lossy(c.take(len, "error detail")?).into_owned();
            c.finish("error reply")?;
            Ok(Response::Error { code, detail })
        }
        other => Err(ProtocolError::UnexpectedOpcode(other)),
    }
}

fn check_batch(n: usize) -> Result<(), ProtocolError> {
    if n > MAX_BATCH {
        return Err(ProtocolError::Malformed {
            code: error_code::BATCH_TOO_LARGE,
            detail: format!("batch of {n} exceeds maximum {MAX_BATCH}"),
        });
    }
    Ok(())
}
