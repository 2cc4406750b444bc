//! Checkpoint container: model configuration plus named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CLADCKP1"
//! version  u32      currently 1
//! tag      u32 len + UTF-8 bytes   (e.g. "pretrained", "finetuned-ema")
//! config   u32 len + UTF-8 JSON    (the ModelConfig)
//! count    u32
//! tensor × count:
//!   name   u32 len + UTF-8 bytes
//!   ndim   u32, then ndim × u32 dims
//!   data   product(dims) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{ModelConfig, ModelParameters};

/// File signature of the checkpoint container.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLADCKP1";
const CHECKPOINT_VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub tag: String,
    pub config: ModelConfig,
    pub params: ModelParameters,
}

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn write_bytes(w: &mut impl Write, data: &[u8], path: &Path) -> Result<()> {
    let len = u32::try_from(data.len())
        .map_err(|_| Error::Format(format!("checkpoint field of {} bytes exceeds u32", data.len())))?;
    write_u32(w, len, path)?;
    w.write_all(data).map_err(|e| Error::io(path, e))
}

/// Serialize parameters (with their configuration and a tag) to `path`.
pub fn save_checkpoint(
    path: &Path,
    tag: &str,
    config: &ModelConfig,
    params: &ModelParameters,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, CHECKPOINT_VERSION, path)?;
    write_bytes(&mut w, tag.as_bytes(), path)?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| Error::Format(format!("checkpoint config serialization failed: {}", e)))?;
    write_bytes(&mut w, &config_json, path)?;

    let tensors = params.tensors();
    write_u32(&mut w, tensors.len() as u32, path)?;
    for (name, shape, values) in tensors {
        write_bytes(&mut w, name.as_bytes(), path)?;
        write_u32(&mut w, shape.len() as u32, path)?;
        for dim in &shape {
            let d = u32::try_from(*dim)
                .map_err(|_| Error::Format(format!("tensor {} dimension exceeds u32", name)))?;
            write_u32(&mut w, d, path)?;
        }
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::Format(format!(
                "checkpoint {} is truncated while reading {}",
                self.path.display(),
                what
            ))
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.exact(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.exact(len, what)?;
        String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("checkpoint {} is not valid UTF-8", what)))
    }
}

/// Load a checkpoint, rebuilding parameters and validating every shape
/// against the embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file), path };

    let magic = r.exact(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let tag = r.string("tag")?;
    let config_json = r.string("config")?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Format(format!("checkpoint config is invalid: {}", e)))?;
    config.validate()?;

    let count = r.u32("tensor count")? as usize;
    let mut stored: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let ndim = r.u32("tensor rank")? as usize;
        if ndim > 4 {
            return Err(Error::Format(format!("tensor {} has implausible rank {}", name, ndim)));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("tensor dim")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.exact(n * 8, "tensor data")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        stored.push((name, dims, values));
    }

    // Rebuild a parameter set of the right shapes and fill it by name.
    let template = ModelParameters::init(&config, 0);
    let mut params = template.zeros_like();
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|(n, s, _)| (n.clone(), s.clone()))
        .collect();
    if stored.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors but the configuration requires {}",
            stored.len(),
            expected.len()
        )));
    }
    let mut slots = params.tensors_mut();
    for (name, dims, values) in stored {
        let pos = expected.iter().position(|(n, _)| *n == name).ok_or_else(|| {
            Error::Format(format!("checkpoint tensor {} is not part of this model", name))
        })?;
        let want = &expected[pos].1;
        if *want != dims {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?} but the configuration requires {:?}",
                name, dims, want
            )));
        }
        let slot = &mut slots[pos].1;
        if slot.len() != values.len() {
            return Err(Error::Format(format!("tensor {} has inconsistent element count", name)));
        }
        slot.copy_from_slice(&values);
    }
    drop(slots);
    Ok(Checkpoint { tag, config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::tiny_config;
    use tempfile::tempdir;

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = tiny_config();
        let params = ModelParameters::init(&config, 42);
        save_checkpoint(&path, "pretrained", &config, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.tag, "pretrained");
        assert_eq!(loaded.config, config);
        for ((na, sa, va), (nb, sb, vb)) in
            params.tensors().iter().zip(loaded.params.tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            assert_eq!(va, vb, "tensor {} must round-trip exactly", na);
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = tiny_config();
        let params = ModelParameters::init(&config, 1);
        save_checkpoint(&path, "pretrained", &config, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        // Save with one config, then doctor the embedded config to a wider
        // model: every tensor shape check must fail.
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = tiny_config();
        let params = ModelParameters::init(&config, 2);
        save_checkpoint(&path, "pretrained", &config, &params).unwrap();

        let mut wider = config.clone();
        wider.embed_dim = 16;
        let bytes = std::fs::read(&path).unwrap();
        let old_json = serde_json::to_vec(&config).unwrap();
        let new_json = serde_json::to_vec(&wider).unwrap();
        let pos = bytes
            .windows(old_json.len())
            .position(|w| w == old_json.as_slice())
            .expect("embedded config present");
        let mut doctored = Vec::new();
        doctored.extend_from_slice(&bytes[..pos - 4]);
        doctored.extend_from_slice(&(new_json.len() as u32).to_le_bytes());
        doctored.extend_from_slice(&new_json);
        doctored.extend_from_slice(&bytes[pos + old_json.len()..]);
        std::fs::write(&path, doctored).unwrap();

        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("shape") || err.to_string().contains("requires"));
    }
}
