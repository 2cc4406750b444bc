//! Streaming window-block compressor (CWBS-1) and its lossless inverse.
//!
//! Log windows compress entry by entry against a 256-slot reference cache.
//! An entry that shares a long prefix with a cached line becomes a *delta
//! record*: the XOR against the reference, run-length coded, plus a 1-byte
//! slot id. Anything else becomes a *literal record* and is inserted into the
//! cache round-robin. Repetitive windows therefore shrink to a handful of
//! literals plus tiny deltas, while novel lines surface as long literal runs —
//! the signal the downstream detector reads.
//!
//! Record grammar (all lengths big-endian `u16`):
//!
//! ```text
//! literal: 0x00 ‖ len ‖ payload              (payload cached at next_slot)
//! delta:   0x01 ‖ slot ‖ len ‖ rle(entry ⊕ reference[..len], zero-padded)
//! ```
//!
//! By default the cache resets at every window boundary so each compressed
//! window is a self-contained sample; a carry-state mode exists for callers
//! that want one continuous stream.

mod container;
mod rle;

pub use container::{read_container, write_container, CONTAINER_MAGIC};
pub use rle::{rle_decode, rle_decode_prefix, rle_encode};

use crate::error::{Error, Result};

/// Number of reference slots in the compressor cache.
pub const CACHE_SLOTS: usize = 256;
/// Shortest shared prefix that makes a cached line usable as a reference.
pub const MIN_REFERENCE_PREFIX: usize = 8;
/// Largest payload a single record can carry (`u16` length field).
pub const MAX_PAYLOAD: usize = u16::MAX as usize;

const HEADER_LITERAL: u8 = 0x00;
const HEADER_DELTA: u8 = 0x01;

/// One log line: raw payload bytes plus its position in the source stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    payload: Vec<u8>,
    ordinal: u64,
}

impl LogEntry {
    /// Build an entry, rejecting embedded newlines and over-long payloads.
    pub fn new(payload: Vec<u8>, ordinal: u64) -> Result<Self> {
        if payload.len() > MAX_PAYLOAD {
            return Err(Error::Input(format!(
                "entry {} payload is {} bytes, max {}",
                ordinal,
                payload.len(),
                MAX_PAYLOAD
            )));
        }
        if payload.contains(&b'\n') {
            return Err(Error::Input(format!(
                "entry {} payload contains a raw newline",
                ordinal
            )));
        }
        Ok(LogEntry { payload, ordinal })
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn ordinal(&self) -> u64 {
        self.ordinal
    }
}

/// A fixed slice of consecutive entries with a window-level anomaly label
/// (0 = normal, 1 = anomalous).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogWindow {
    pub window_id: u64,
    pub entries: Vec<LogEntry>,
    pub label: u8,
}

impl LogWindow {
    /// Build a window, enforcing non-emptiness, strictly increasing entry
    /// ordinals, and a binary label.
    pub fn new(window_id: u64, entries: Vec<LogEntry>, label: u8) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Input(format!("window {} has no entries", window_id)));
        }
        if label > 1 {
            return Err(Error::Input(format!(
                "window {} label must be 0 or 1, got {}",
                window_id, label
            )));
        }
        for pair in entries.windows(2) {
            if pair[1].ordinal <= pair[0].ordinal {
                return Err(Error::Input(format!(
                    "window {} ordinals not strictly increasing ({} then {})",
                    window_id, pair[0].ordinal, pair[1].ordinal
                )));
            }
        }
        Ok(LogWindow { window_id, entries, label })
    }

    /// Entry payloads in order, for content comparisons that should ignore
    /// source ordinals.
    pub fn payloads(&self) -> Vec<&[u8]> {
        self.entries.iter().map(|e| e.payload()).collect()
    }
}

/// The compressor's reference cache: 256 slots filled round-robin.
#[derive(Debug, Clone)]
pub struct CompressorState {
    slots: Vec<Option<Vec<u8>>>,
    next_slot: usize,
}

impl CompressorState {
    pub fn new() -> Self {
        CompressorState { slots: vec![None; CACHE_SLOTS], next_slot: 0 }
    }

    /// Drop all cached references and rewind the insertion cursor.
    pub fn reset(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
        self.next_slot = 0;
    }

    fn insert(&mut self, payload: &[u8]) {
        self.slots[self.next_slot] = Some(payload.to_vec());
        self.next_slot = (self.next_slot + 1) % CACHE_SLOTS;
    }
}

impl Default for CompressorState {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of compressing one window: the record stream plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedWindow {
    pub window_id: u64,
    pub label: u8,
    pub stream: Vec<u8>,
    /// Total payload bytes before compression. Zero when the window was read
    /// back from a container, which does not persist this figure.
    pub original_byte_count: u64,
}

fn common_prefix_len(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Pick the cached reference for `candidate`: the occupied slot with the
/// longest common prefix, provided that prefix reaches
/// [`MIN_REFERENCE_PREFIX`] bytes or the lines are byte-identical. Ties go to
/// the lowest slot id; no eligible slot yields `None`.
pub fn select_reference<'a>(
    state: &'a CompressorState,
    candidate: &[u8],
) -> Option<(u8, &'a [u8])> {
    let mut best: Option<(u8, &[u8], usize)> = None;
    for (slot, entry) in state.slots.iter().enumerate() {
        let Some(reference) = entry else { continue };
        let prefix = common_prefix_len(candidate, reference);
        let eligible = prefix >= MIN_REFERENCE_PREFIX
            || (prefix == candidate.len() && prefix == reference.len());
        if !eligible {
            continue;
        }
        if best.is_none_or(|(_, _, best_prefix)| prefix > best_prefix) {
            best = Some((slot as u8, reference.as_slice(), prefix));
        }
    }
    best.map(|(slot, reference, _)| (slot, reference))
}

/// Compress one entry against the cache, appending its record to `out`.
///
/// The cache mutates only in the literal branch, where the payload is
/// inserted at the round-robin cursor.
pub fn compress_entry(state: &mut CompressorState, entry: &LogEntry, out: &mut Vec<u8>) {
    let payload = entry.payload();
    let len = payload.len() as u16;
    match select_reference(state, payload) {
        Some((slot, reference)) => {
            let delta: Vec<u8> = payload
                .iter()
                .enumerate()
                .map(|(i, &b)| b ^ reference.get(i).copied().unwrap_or(0))
                .collect();
            out.push(HEADER_DELTA);
            out.push(slot);
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&rle_encode(&delta));
        }
        None => {
            out.push(HEADER_LITERAL);
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(payload);
            state.insert(payload);
        }
    }
}

/// Compress a whole window with a fresh cache (the default per-window mode).
pub fn compress_window(window: &LogWindow) -> CompressedWindow {
    let mut state = CompressorState::new();
    compress_window_with(&mut state, window)
}

/// Compress a window against caller-owned state, for carry-state streaming.
/// The caller decides whether to [`CompressorState::reset`] between windows.
pub fn compress_window_with(state: &mut CompressorState, window: &LogWindow) -> CompressedWindow {
    let mut stream = Vec::new();
    let mut original = 0u64;
    for entry in &window.entries {
        original += entry.payload().len() as u64;
        compress_entry(state, entry, &mut stream);
    }
    CompressedWindow {
        window_id: window.window_id,
        label: window.label,
        stream,
        original_byte_count: original,
    }
}

/// Decompress a window that was compressed with a fresh cache.
///
/// Entry payloads come back byte-exact and in order; ordinals are positional
/// (0..n) because the stream does not carry source positions.
pub fn decompress_window(cw: &CompressedWindow) -> Result<LogWindow> {
    let mut state = CompressorState::new();
    decompress_window_with(&mut state, cw)
}

/// Decompress against caller-owned state, mirroring carry-state compression.
pub fn decompress_window_with(
    state: &mut CompressorState,
    cw: &CompressedWindow,
) -> Result<LogWindow> {
    let stream = &cw.stream;
    let mut pos = 0usize;
    let mut entries = Vec::new();
    while pos < stream.len() {
        let header = stream[pos];
        pos += 1;
        match header {
            HEADER_LITERAL => {
                let len = read_len(stream, &mut pos)?;
                let Some(payload) = stream.get(pos..pos + len) else {
                    return Err(Error::Format(format!(
                        "literal record truncated at offset {} (need {} bytes)",
                        pos, len
                    )));
                };
                pos += len;
                state.insert(payload);
                entries.push(payload.to_vec());
            }
            HEADER_DELTA => {
                let Some(&slot) = stream.get(pos) else {
                    return Err(Error::Format("delta record truncated before slot id".into()));
                };
                pos += 1;
                let len = read_len(stream, &mut pos)?;
                let (delta, used) = rle_decode_prefix(&stream[pos..], len)?;
                pos += used;
                let Some(reference) = &state.slots[slot as usize] else {
                    return Err(Error::Format(format!(
                        "delta record references empty cache slot {}",
                        slot
                    )));
                };
                let payload: Vec<u8> = delta
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| b ^ reference.get(i).copied().unwrap_or(0))
                    .collect();
                entries.push(payload);
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown record header 0x{:02X} at offset {}",
                    other,
                    pos - 1
                )));
            }
        }
    }
    let entries = entries
        .into_iter()
        .enumerate()
        .map(|(i, payload)| LogEntry::new(payload, i as u64))
        .collect::<Result<Vec<_>>>()?;
    LogWindow::new(cw.window_id, entries, cw.label)
}

fn read_len(stream: &[u8], pos: &mut usize) -> Result<usize> {
    let Some(bytes) = stream.get(*pos..*pos + 2) else {
        return Err(Error::Format(format!(
            "record truncated in length field at offset {}",
            pos
        )));
    };
    *pos += 2;
    Ok(u16::from_be_bytes([bytes[0], bytes[1]]) as usize)
}
