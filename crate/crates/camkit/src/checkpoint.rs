//! `CNN1` checkpoint format.
//!
//! Layout: magic `CNN1`, format version as little-endian `u32` (currently 1),
//! a `u32` JSON header length, the JSON header (layer specs, input shape,
//! class labels, endianness tag `"LE"`), then the raw little-endian `f32`
//! parameter blobs in layer order (conv: kernels then bias; dense: weights
//! then bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerParams, LayerSpec, Network};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CNN1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    class_labels: Vec<String>,
    layers: Vec<LayerSpec>,
    endianness: String,
}

/// Serialize a network. Parameters live on the `f32` grid, so
/// `load_checkpoint(save_checkpoint(net))` reproduces them bit-exactly.
pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        input_shape: net.input_shape(),
        class_labels: net.class_labels().to_vec(),
        layers: net.layers().to_vec(),
        endianness: "LE".into(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for params in net.params() {
        match params {
            LayerParams::Conv { kernels, bias } => {
                write_blob(&mut bytes, kernels);
                write_blob(&mut bytes, bias);
            }
            LayerParams::Dense { weights, bias } => {
                write_blob(&mut bytes, weights);
                write_blob(&mut bytes, bias);
            }
            LayerParams::None => {}
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_blob(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Load a `CNN1` checkpoint. Any structural problem (bad magic or version,
/// truncation, trailing bytes, non-finite parameters) is a `FormatError` and
/// no partial network is returned.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));

    if bytes.len() < 12 {
        return Err(fail("file too short".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic (not a CNN1 checkpoint)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    if header.endianness != "LE" {
        return Err(fail(format!(
            "unsupported endianness tag '{}'",
            header.endianness
        )));
    }

    let mut net = Network::with_zero_params(
        header.input_shape,
        header.class_labels,
        header.layers,
    )
    .map_err(|e| fail(format!("invalid architecture: {e}")))?;

    let mut offset = 12 + header_len;
    for params in net.params_mut() {
        match params {
            LayerParams::Conv { kernels, bias } => {
                read_blob(&bytes, &mut offset, kernels, path)?;
                read_blob(&bytes, &mut offset, bias, path)?;
            }
            LayerParams::Dense { weights, bias } => {
                read_blob(&bytes, &mut offset, weights, path)?;
                read_blob(&bytes, &mut offset, bias, path)?;
            }
            LayerParams::None => {}
        }
    }
    if offset != bytes.len() {
        return Err(fail(format!(
            "{} trailing bytes after parameters",
            bytes.len() - offset
        )));
    }
    Ok(net)
}

fn read_blob(bytes: &[u8], offset: &mut usize, into: &mut Tensor, path: &Path) -> Result<()> {
    let need = into.len() * 4;
    if *offset + need > bytes.len() {
        return Err(Error::Format(format!(
            "{}: truncated parameter blob",
            path.display()
        )));
    }
    for (i, chunk) in bytes[*offset..*offset + need].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "{}: non-finite parameter",
                path.display()
            )));
        }
        into.data_mut()[i] = v as f64;
    }
    *offset += need;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mnist_network;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.cnn1");
        let net = mnist_network(7);
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(net, loaded);
        // Saving the loaded network reproduces the file byte for byte.
        let path2 = dir.path().join("net2.cnn1");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn logits_identical_after_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.cnn1");
        let net = mnist_network(3);
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let mut rng = crate::rng::Rng::new(1);
        let img = Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_f64()).collect()).unwrap();
        let a = net.forward(&img).unwrap();
        let b = loaded.forward(&img).unwrap();
        for (x, y) in a.logits().data().iter().zip(b.logits().data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.cnn1");
        let net = mnist_network(7);
        save_checkpoint(&net, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.cnn1");
        let net = mnist_network(7);
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        save_checkpoint(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
