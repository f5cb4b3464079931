//! Checkpoint containers.
//!
//! A checkpoint is a directory holding `manifest.json` and `tensors.bin`.
//! The tensor file layout (all integers little-endian):
//!
//! ```text
//! b"GSCK"  u32 version  u32 count
//! count x { u32 name_len  name (utf-8)  u32 ndim  ndim x u64 dim  prod(dim) x f64 }
//! ```
//!
//! Tensors are written in the order given, so identical models produce
//! identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::Parameters;

pub const MAGIC: &[u8; 4] = b"GSCK";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";

pub fn write_tensors(path: &Path, tensors: &[(String, ArrayViewD<'_, f64>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(io)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("not a tensor container".into()));
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut r, path)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8".into()))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r, path).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            data.push(f64::from_le_bytes(b));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(e.to_string()))?;
        out.push((name, arr));
    }
    Ok(out)
}

/// Copies `tensors` into `model` by name; every model tensor must be present
/// with a matching shape.
pub fn assign_tensors<M: Parameters>(
    model: &mut M,
    prefix: &str,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<()> {
    for (name, mut slot) in model.named_tensors_mut() {
        let full = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}{name}")
        };
        let src = tensors
            .iter()
            .find(|(n, _)| *n == full)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{full}' missing from checkpoint")))?;
        if src.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{full}' has shape {:?}, model expects {:?}",
                src.shape(),
                slot.shape()
            )));
        }
        slot.assign(src);
    }
    Ok(())
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn tensor_path(dir: &Path) -> PathBuf {
    dir.join(TENSOR_FILE)
}

pub fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = manifest_path(dir);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = manifest_path(dir);
    if !path.is_file() {
        return Err(Error::MissingModel(format!(
            "no checkpoint manifest at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkConfig, NetworkParams};

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f64 * 0.1 - 0.25);
        let b = ArrayD::from_elem(IxDyn(&[]), f64::MIN_POSITIVE);
        write_tensors(&path, &[("a".into(), a.view()), ("b".into(), b.view())]).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
    }

    #[test]
    fn network_round_trip_and_shape_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let net = NetworkParams::init(&NetworkConfig::tiny()).unwrap();
        write_tensors(&path, &net.named_tensors()).unwrap();
        let tensors = read_tensors(&path).unwrap();
        let mut other = NetworkParams::init(&NetworkConfig {
            init_seed: 5,
            ..NetworkConfig::tiny()
        })
        .unwrap();
        assign_tensors(&mut other, "", &tensors).unwrap();
        assert_eq!(other.named_tensors(), net.named_tensors());
        let mut wide = NetworkParams::init(&NetworkConfig {
            level_filters: vec![4, 8, 16, 64],
            ..NetworkConfig::tiny()
        })
        .unwrap();
        assert!(matches!(
            assign_tensors(&mut wide, "", &tensors),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            read_manifest::<serde_json::Value>(dir.path()),
            Err(Error::MissingModel(_))
        ));
    }
}
