//! FMAP: a tiny bit-exact interchange format for scalar maps.
//!
//! Layout: magic `FMAP`, then height and width as little-endian `u32`, then
//! `h*w` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FMAP";

/// Write a `(h, w)` (or `(1, h, w)`) map. Values are stored as `f32`.
pub fn save_fmap(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w, data) = match map.shape() {
        [h, w] => (*h, *w, map.data()),
        [1, h, w] => (*h, *w, map.data()),
        other => {
            return Err(Error::Shape(format!(
                "FMAP stores single-channel maps, got shape {other:?}"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(12 + data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read an FMAP file back as a `(h, w)` tensor.
pub fn load_fmap(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not an FMAP file",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + h * w * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes for a {h}x{w} map, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for chunk in bytes[12..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "{}: non-finite value in map",
                path.display()
            )));
        }
        data.push(v as f64);
    }
    Tensor::new(vec![h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.fmap");
        let b = dir.path().join("b.fmap");
        let map = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.125, 0.75]).unwrap();
        save_fmap(&a, &map).unwrap();
        let loaded = load_fmap(&a).unwrap();
        save_fmap(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded, map); // these values are exactly representable in f32
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.fmap");
        let map = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        save_fmap(&p, &map).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_fmap(&p), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.fmap");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_fmap(&p), Err(Error::Format(_))));
    }
}
