//! On-disk container for compressed, labeled windows.
//!
//! Layout: the 8-byte magic `"CLADDS1\n"`, then zero or more records of
//! `{window_id: u32 BE, label: u8, stream_len: u32 BE, stream bytes}`.
//! The container frames streams verbatim; it never re-encodes them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::compressor::CompressedWindow;
use crate::error::{Error, Result};

/// First eight bytes of every container file.
pub const CONTAINER_MAGIC: &[u8; 8] = b"CLADDS1\n";

/// Write windows to `path`, in order.
pub fn write_container(path: &Path, windows: &[CompressedWindow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    out.write_all(CONTAINER_MAGIC).map_err(io_err)?;
    for w in windows {
        let id = u32::try_from(w.window_id).map_err(|_| {
            Error::Input(format!("window id {} exceeds the container's u32 range", w.window_id))
        })?;
        let len = u32::try_from(w.stream.len()).map_err(|_| {
            Error::Input(format!(
                "window {} stream is {} bytes, over the container's u32 range",
                w.window_id,
                w.stream.len()
            ))
        })?;
        if w.label > 1 {
            return Err(Error::Input(format!(
                "window {} label must be 0 or 1, got {}",
                w.window_id, w.label
            )));
        }
        out.write_all(&id.to_be_bytes()).map_err(io_err)?;
        out.write_all(&[w.label]).map_err(io_err)?;
        out.write_all(&len.to_be_bytes()).map_err(io_err)?;
        out.write_all(&w.stream).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read every window from a container file.
///
/// `original_byte_count` is not persisted, so it comes back as zero.
pub fn read_container(path: &Path) -> Result<Vec<CompressedWindow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: too short for a container header", path.display())))?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:02X?}, expected {:02X?}",
            path.display(),
            magic,
            CONTAINER_MAGIC
        )));
    }
    let mut windows = Vec::new();
    loop {
        let mut header = [0u8; 9];
        if reader.read(&mut header[..1]).map_err(|e| Error::io(path, e))? == 0 {
            break; // clean end of file
        }
        reader
            .read_exact(&mut header[1..])
            .map_err(|_| truncated(path, windows.len()))?;
        let window_id = u32::from_be_bytes(header[0..4].try_into().unwrap()) as u64;
        let label = header[4];
        if label > 1 {
            return Err(Error::Format(format!(
                "{}: record {} label must be 0 or 1, got {}",
                path.display(),
                windows.len(),
                label
            )));
        }
        let stream_len = u32::from_be_bytes(header[5..9].try_into().unwrap()) as usize;
        let mut stream = vec![0u8; stream_len];
        reader.read_exact(&mut stream).map_err(|_| truncated(path, windows.len()))?;
        windows.push(CompressedWindow { window_id, label, stream, original_byte_count: 0 });
    }
    Ok(windows)
}

fn truncated(path: &Path, record: usize) -> Error {
    Error::Format(format!("{}: container truncated in record {}", path.display(), record))
}
