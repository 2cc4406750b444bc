//! Byte-oriented run-length coding for delta payloads.
//!
//! XOR deltas between a log entry and its cache reference are mostly zero
//! bytes with short literal islands where variable fields differ. The coder
//! exploits exactly that shape:
//!
//! * control byte `0x00..=0x7F`: a run of `control + 1` zero bytes (1..=128);
//! * control byte `0x80..=0xFF`: `control - 0x7F` literal bytes follow
//!   verbatim (1..=128).
//!
//! Encoding is greedy left to right, so every input has exactly one encoding
//! and runs longer than 128 split into maximal chunks.

use crate::error::{Error, Result};

/// Longest run or literal group a single control byte can describe.
const MAX_GROUP: usize = 128;

/// Encode `payload` into the run-length token stream.
pub fn rle_encode(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() / 4 + 4);
    let mut i = 0;
    while i < payload.len() {
        let zero = payload[i] == 0;
        let mut n = 1;
        while n < MAX_GROUP && i + n < payload.len() && (payload[i + n] == 0) == zero {
            n += 1;
        }
        if zero {
            out.push((n - 1) as u8);
        } else {
            out.push((0x7F + n) as u8);
            out.extend_from_slice(&payload[i..i + n]);
        }
        i += n;
    }
    out
}

/// Decode a complete token stream, checking that it reproduces exactly
/// `expected_len` bytes and leaves no trailing tokens.
pub fn rle_decode(tokens: &[u8], expected_len: usize) -> Result<Vec<u8>> {
    let (payload, used) = rle_decode_prefix(tokens, expected_len)?;
    if used != tokens.len() {
        return Err(Error::Format(format!(
            "run-length stream has {} trailing byte(s) after decoding {} bytes",
            tokens.len() - used,
            expected_len
        )));
    }
    Ok(payload)
}

/// Decode tokens from the front of `tokens` until exactly `expected_len`
/// payload bytes have been produced. Returns the payload and the number of
/// token bytes consumed, so callers can keep parsing a larger stream.
pub fn rle_decode_prefix(tokens: &[u8], expected_len: usize) -> Result<(Vec<u8>, usize)> {
    let mut out = Vec::with_capacity(expected_len);
    let mut i = 0;
    while out.len() < expected_len {
        let Some(&control) = tokens.get(i) else {
            return Err(Error::Format(format!(
                "run-length stream truncated: got {} of {} payload bytes",
                out.len(),
                expected_len
            )));
        };
        i += 1;
        if control <= 0x7F {
            let n = control as usize + 1;
            if out.len() + n > expected_len {
                return Err(Error::Format(format!(
                    "zero run of {} overshoots payload length {}",
                    n, expected_len
                )));
            }
            out.resize(out.len() + n, 0);
        } else {
            let n = control as usize - 0x7F;
            if out.len() + n > expected_len {
                return Err(Error::Format(format!(
                    "literal group of {} overshoots payload length {}",
                    n, expected_len
                )));
            }
            let Some(bytes) = tokens.get(i..i + n) else {
                return Err(Error::Format(format!(
                    "literal group truncated: need {} byte(s) at offset {}",
                    n, i
                )));
            };
            out.extend_from_slice(bytes);
            i += n;
        }
    }
    Ok((out, i))
}
