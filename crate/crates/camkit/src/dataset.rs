//! Labeled image datasets: IDX files (optionally gzipped) and
//! directory-of-class-subdirectories of PNGs.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::imageio::{load_png, resize_bilinear};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_labels: Vec<String>,
    pub ids: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keep only the first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self.ids.truncate(n);
        self
    }

    /// Bilinearly resize every image to `(h, w)`.
    pub fn resized(mut self, h: usize, w: usize) -> Self {
        for img in &mut self.images {
            if img.shape()[1] != h || img.shape()[2] != w {
                *img = resize_bilinear(img, h, w);
            }
        }
        self
    }
}

/// Read a whole file, transparently gunzipping when the gzip magic is present.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_header(bytes: &[u8], path: &Path, want_dims: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!(
            "{} is not an IDX file",
            path.display()
        )));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!(
            "{}: unsupported IDX element type 0x{:02x} (only unsigned bytes)",
            path.display(),
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims != want_dims {
        return Err(Error::Format(format!(
            "{}: expected {want_dims} dimensions, found {ndims}",
            path.display()
        )));
    }
    if bytes.len() < 4 + 4 * ndims {
        return Err(Error::Format(format!("{} is truncated", path.display())));
    }
    Ok((0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect())
}

/// Load an MNIST-style IDX image/label pair. Pixels map to `k / 255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let ibytes = read_maybe_gz(images_path)?;
    let dims = idx_header(&ibytes, images_path, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let body = &ibytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Format(format!(
            "{}: expected {} pixels, found {}",
            images_path.display(),
            n * h * w,
            body.len()
        )));
    }

    let lbytes = read_maybe_gz(labels_path)?;
    let ldims = idx_header(&lbytes, labels_path, 1)?;
    if ldims[0] != n {
        return Err(Error::Format(format!(
            "label count {} does not match image count {n}",
            ldims[0]
        )));
    }
    let labels_raw = &lbytes[8..];
    if labels_raw.len() != n {
        return Err(Error::Format(format!(
            "{} is truncated",
            labels_path.display()
        )));
    }

    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let px = &body[i * h * w..(i + 1) * h * w];
        let data: Vec<f64> = px.iter().map(|&v| v as f64 / 255.0).collect();
        images.push(Tensor::new(vec![1, h, w], data)?);
    }
    let labels: Vec<usize> = labels_raw.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(LabeledDataset {
        ids: (0..n).map(|i| format!("{i:05}")).collect(),
        images,
        labels,
        class_labels: (0..classes).map(|c| c.to_string()).collect(),
    })
}

/// Load a directory whose subdirectories are class names full of PNGs.
/// Classes and files are visited in sorted order so loading is deterministic.
pub fn load_image_dir(root: impl AsRef<Path>) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }

    let mut ds = LabeledDataset {
        images: Vec::new(),
        labels: Vec::new(),
        class_labels: Vec::new(),
        ids: Vec::new(),
    };
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir.file_name().unwrap().to_string_lossy().to_string();
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for f in files {
            ds.images.push(load_png(&f)?);
            ds.labels.push(label);
            ds.ids.push(format!(
                "{class}/{}",
                f.file_name().unwrap().to_string_lossy()
            ));
        }
        ds.class_labels.push(class);
    }
    if ds.images.is_empty() {
        return Err(Error::Data(format!(
            "no PNG images found under {}",
            root.display()
        )));
    }
    Ok(ds)
}
