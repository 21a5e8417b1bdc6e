//! Checkpoint format: a binary tensor store plus a human-readable key-value
//! metadata sidecar at `<path>.meta`.
//!
//! Binary layout (all little-endian):
//! `b"RSHD" | u32 version | u32 tensor count |`
//! per tensor: `u16 name_len | name | u8 ndim | ndim x u32 dims | f32 data`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::Result;

const MAGIC: &[u8; 4] = b"RSHD";
const VERSION: u32 = 1;

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    PathBuf::from(os)
}

/// Serializes named tensors and writes the metadata sidecar.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(ckpt_err(path, format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(shape.len() as u8);
        let mut count = 1usize;
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
            count *= d;
        }
        if count != data.len() {
            return Err(ckpt_err(
                path,
                format!("tensor {name}: shape {shape:?} vs {} values", data.len()),
            ));
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;

    let mut text = String::new();
    for (k, v) in meta {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    fs::write(meta_path(path), text)?;
    Ok(())
}

/// A loaded checkpoint: tensors by name plus the sidecar metadata.
pub struct LoadedCheckpoint {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub meta: BTreeMap<String, String>,
}

impl LoadedCheckpoint {
    pub fn take_tensor(&mut self, name: &str, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))
    }

    pub fn meta_str(&self, key: &str, path: &Path) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| ckpt_err(path, format!("missing metadata key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.meta_str(key, path)?;
        raw.parse()
            .map_err(|_| ckpt_err(path, format!("metadata key {key} unparsable: {raw}")))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(ckpt_err(path, "truncated checkpoint"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(ckpt_err(path, "bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| ckpt_err(path, "non-utf8 tensor name"))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut n = 1usize;
        for _ in 0..ndim {
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            shape.push(d);
            n = n
                .checked_mul(d)
                .ok_or_else(|| ckpt_err(path, "tensor shape overflow"))?;
        }
        let raw = take(&mut pos, n * 4)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.insert(name, (shape, data));
    }
    if pos != buf.len() {
        return Err(ckpt_err(path, "trailing bytes after tensor table"));
    }

    let meta = load_meta(&meta_path(path))?;
    Ok(LoadedCheckpoint { tensors, meta })
}

fn load_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    if !path.exists() {
        return Ok(meta);
    }
    for line in fs::read_to_string(path)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let tensors = vec![
            ("a.w".to_string(), vec![2, 3], vec![0.5f32, -1.25, 3.0, 0.0, f32::MIN_POSITIVE, 9.75]),
            ("a.b".to_string(), vec![2], vec![1e-20f32, -0.0]),
        ];
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        meta.insert("seed".to_string(), "42".to_string());
        save_checkpoint(&p, &tensors, &meta).unwrap();

        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.meta.get("kind").unwrap(), "test");
        for (name, shape, data) in &tensors {
            let (ls, ld) = loaded.tensors.get(name).unwrap();
            assert_eq!(ls, shape);
            assert_eq!(
                ld.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let tensors = vec![("w".to_string(), vec![4], vec![1.0f32; 4])];
        save_checkpoint(&p, &tensors, &BTreeMap::new()).unwrap();

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        fs::write(&p, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
