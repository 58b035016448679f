//! Checkpoint container: a plain-text metadata header followed by a binary
//! section of named f64 arrays.
//!
//! Layout:
//! ```text
//! EANETCKPT1\n
//! key=value\n        (sorted, zero or more)
//! \n                 (blank line ends the header)
//! u64 tensor count   (little endian, like all numbers below)
//! per tensor, sorted by name:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u64 per dimension
//!   f64 per element in row-major order, written as raw bits
//! ```
//!
//! Writes are canonical (sorted maps, raw float bits), so saving the same
//! state twice produces byte-identical files and save -> load -> save is a
//! byte-level fixed point.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::params::ParamBundle;

const MAGIC: &[u8] = b"EANETCKPT1\n";
/// Guards against absurd allocations when reading a corrupt file.
const MAX_ELEMENTS: u64 = 1 << 34;
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Add every tensor of a parameter bundle under a name prefix.
    pub fn insert_bundle(&mut self, prefix: &str, bundle: &impl ParamBundle) {
        bundle.for_each(&mut |name, view| {
            let full = if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            };
            self.tensors.insert(full, view.to_owned());
        });
    }

    /// Copy tensors under a prefix back into a parameter bundle. Every
    /// bundle tensor must be present with a matching shape; extra tensors
    /// under the prefix are rejected.
    pub fn extract_bundle(&self, prefix: &str, bundle: &mut impl ParamBundle) -> Result<()> {
        let dotted = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        let mut used = 0usize;
        let mut missing: Vec<String> = Vec::new();
        let mut bad_shape: Vec<String> = Vec::new();
        bundle.for_each_mut(&mut |name, mut view| {
            let full = format!("{dotted}{name}");
            match self.tensors.get(&full) {
                Some(t) if t.shape() == view.shape() => {
                    view.assign(t);
                    used += 1;
                }
                Some(_) => bad_shape.push(full),
                None => missing.push(full),
            }
        });
        if !missing.is_empty() {
            return Err(Error::CheckpointFormat(format!(
                "missing tensors: {}",
                missing.join(", ")
            )));
        }
        if !bad_shape.is_empty() {
            return Err(Error::CheckpointFormat(format!(
                "shape mismatch for: {}",
                bad_shape.join(", ")
            )));
        }
        let present = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(&dotted) || (dotted.is_empty()))
            .count();
        if present != used {
            let mut bundle_names = std::collections::BTreeSet::new();
            bundle.for_each(&mut |name, _| {
                bundle_names.insert(format!("{dotted}{name}"));
            });
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| (k.starts_with(&dotted) || dotted.is_empty()) && !bundle_names.contains(*k))
                .collect();
            return Err(Error::CheckpointFormat(format!(
                "unexpected tensors: {}",
                extra
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::CheckpointFormat(format!(
                    "metadata key/value not representable: {k:?}={v:?}"
                )));
            }
            w.write_all(k.as_bytes())?;
            w.write_all(b"=")?;
            w.write_all(v.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.write_all(b"\n")?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
            for d in tensor.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let standard = tensor.as_standard_layout();
            for v in standard.iter() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; MAGIC.len()];
        r.read_exact(&mut magic)
            .map_err(|e| Error::CheckpointFormat(format!("cannot read magic: {e}")))?;
        if magic != MAGIC {
            return Err(Error::CheckpointFormat(
                "bad magic; not a checkpoint file".into(),
            ));
        }
        let mut metadata = BTreeMap::new();
        loop {
            let line = read_line(r)?;
            if line.is_empty() {
                break;
            }
            let text = String::from_utf8(line)
                .map_err(|_| Error::CheckpointFormat("metadata is not UTF-8".into()))?;
            let (k, v) = text
                .split_once('=')
                .ok_or_else(|| Error::CheckpointFormat(format!("bad metadata line {text:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = read_u64(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)?;
            if name_len > MAX_NAME {
                return Err(Error::CheckpointFormat(format!(
                    "tensor name length {name_len} exceeds limit"
                )));
            }
            let mut name_bytes = vec![0u8; name_len as usize];
            r.read_exact(&mut name_bytes)
                .map_err(|e| Error::CheckpointFormat(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)?;
            if rank > MAX_RANK {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {name:?} rank {rank} exceeds limit"
                )));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            let mut elements: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(r)?;
                elements = elements.saturating_mul(d.max(1));
                dims.push(d as usize);
            }
            if elements > MAX_ELEMENTS {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {name:?} element count exceeds limit"
                )));
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|e| Error::CheckpointFormat(format!("truncated tensor {name:?}: {e}")))?;
                data.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::CheckpointFormat(format!("tensor {name:?}: {e}")))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::CheckpointFormat(format!(
                    "duplicate tensor {name:?}"
                )));
            }
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let ckpt = Self::read_from(&mut r)?;
        // Trailing garbage means the file is not one of ours.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::CheckpointFormat(
                "trailing bytes after the last tensor".into(),
            ));
        }
        Ok(ckpt)
    }

    /// FNV-1a over the serialized bytes; stable fingerprint for
    /// reproducibility checks.
    pub fn fingerprint(&self) -> Result<String> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        Ok(fnv64_hex(&bytes))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// FNV-1a hash of `bytes` as 16 lowercase hex digits.
pub fn fnv64_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

fn read_line(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|e| Error::CheckpointFormat(format!("truncated header: {e}")))?;
        if byte[0] == b'\n' {
            return Ok(line);
        }
        line.push(byte[0]);
        if line.len() > 1 << 16 {
            return Err(Error::CheckpointFormat("unterminated header line".into()));
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::CheckpointFormat(format!("truncated field: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::CheckpointFormat(format!("truncated field: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}
