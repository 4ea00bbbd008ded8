//! Edge-feature descriptors and the perturbed input variants built from them.
//!
//! A descriptor is a single-channel edge map in `[0, 1]` at input resolution,
//! from a built-in Sobel or Canny detector or ingested from an FMAP/PNG file
//! (for externally computed descriptors such as learned edge detectors).
//! Perturbed inputs are the descriptor alone or normalized 2:1 / 1:1 blends
//! with the original image.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fmap::load_fmap;
use crate::imageio::{load_png, luminance};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    /// Pre-blur Gaussian standard deviation, in pixels.
    pub blur_sigma: f64,
    /// Low hysteresis threshold as a fraction of the maximum gradient.
    pub low_fraction: f64,
    /// High hysteresis threshold as a fraction of the maximum gradient.
    pub high_fraction: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            blur_sigma: 1.0,
            low_fraction: 0.1,
            high_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeMethod {
    /// Sobel gradient magnitude, normalized to `[0, 1]`.
    Sobel,
    /// Binary Canny edges.
    Canny(CannyParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorSource {
    Sobel,
    Canny,
    External,
}

/// Single-channel edge-feature map in `[0, 1]` at input resolution.
#[derive(Debug, Clone)]
pub struct FeatureDescriptor {
    pub values: Tensor,
    pub source: DescriptorSource,
}

impl FeatureDescriptor {
    /// Elementwise `1 - v`.
    pub fn complement(&self) -> Self {
        FeatureDescriptor {
            values: complement_values(&self.values),
            source: self.source,
        }
    }
}

/// The three perturbed input versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputVariant {
    /// The descriptor alone, broadcast to the input channel count.
    FeatureOnly,
    /// Image-heavy 2:1 blend `(2*image + descriptor) / 3`.
    BlendTwoToOne,
    /// Even 1:1 blend `(image + descriptor) / 2`.
    BlendOneToOne,
}

impl InputVariant {
    pub fn index(&self) -> u8 {
        match self {
            InputVariant::FeatureOnly => 1,
            InputVariant::BlendTwoToOne => 2,
            InputVariant::BlendOneToOne => 3,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(InputVariant::FeatureOnly),
            2 => Ok(InputVariant::BlendTwoToOne),
            3 => Ok(InputVariant::BlendOneToOne),
            other => Err(Error::Config(format!(
                "input variant must be 1, 2 or 3, got {other}"
            ))),
        }
    }
}

/// Which side of the 2:1 ratio is the image. The default reads "2:1" as
/// image:descriptor; the switch flips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendOrder {
    #[default]
    ImageHeavy,
    DescriptorHeavy,
}

/// An image-shaped perturbed input in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PerturbedInput {
    pub values: Tensor,
    pub variant: InputVariant,
}

impl PerturbedInput {
    pub fn complement(&self) -> Self {
        PerturbedInput {
            values: complement_values(&self.values),
            variant: self.variant,
        }
    }
}

pub(crate) fn complement_values(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 - v)
}

/// Compute an edge-feature descriptor from an image in `[0, 1]`.
pub fn edge_map(image: &Tensor, method: EdgeMethod) -> Result<FeatureDescriptor> {
    let gray = luminance(image)?;
    match method {
        EdgeMethod::Sobel => {
            let (gx, gy) = sobel_gradients(&gray);
            let mag = gx.zip(&gy, f64::hypot)?;
            let max = mag.max();
            let values = if max > 0.0 {
                mag.map(|v| v / max)
            } else {
                mag
            };
            Ok(FeatureDescriptor {
                values,
                source: DescriptorSource::Sobel,
            })
        }
        EdgeMethod::Canny(params) => Ok(FeatureDescriptor {
            values: canny(&gray, params)?,
            source: DescriptorSource::Canny,
        }),
    }
}

/// Load an externally computed descriptor (FMAP or 8-bit grayscale PNG),
/// clamped to `[0, 1]`. Extents must match `(h, w)`.
pub fn load_descriptor(path: impl AsRef<Path>, h: usize, w: usize) -> Result<FeatureDescriptor> {
    let path = path.as_ref();
    let is_fmap = std::fs::read(path)
        .map(|b| b.len() >= 4 && &b[0..4] == b"FMAP")
        .map_err(|e| Error::io(path, e))?;
    let values = if is_fmap {
        load_fmap(path)?
    } else {
        luminance(&load_png(path)?)?
    };
    if values.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "descriptor {} has extents {:?}, classifier input is ({h}, {w})",
            path.display(),
            values.shape()
        )));
    }
    Ok(FeatureDescriptor {
        values: values.map(|v| v.clamp(0.0, 1.0)),
        source: DescriptorSource::External,
    })
}

/// Build one of the three perturbed input versions (image-heavy blends).
pub fn make_perturbed(
    image: &Tensor,
    fdesc: &FeatureDescriptor,
    variant: InputVariant,
) -> Result<PerturbedInput> {
    make_perturbed_with(image, fdesc, variant, BlendOrder::ImageHeavy)
}

/// As [`make_perturbed`], with an explicit reading of the 2:1 ratio.
pub fn make_perturbed_with(
    image: &Tensor,
    fdesc: &FeatureDescriptor,
    variant: InputVariant,
    order: BlendOrder,
) -> Result<PerturbedInput> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Shape(format!(
                "perturb expects a (c, h, w) image, got {other:?}"
            )))
        }
    };
    if fdesc.values.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "descriptor extents {:?} do not match image ({h}, {w})",
            fdesc.values.shape()
        )));
    }
    let d = fdesc.values.data();
    let n = h * w;
    let mut data = vec![0.0; c * n];
    for ch in 0..c {
        let plane = &image.data()[ch * n..(ch + 1) * n];
        let out = &mut data[ch * n..(ch + 1) * n];
        match variant {
            InputVariant::FeatureOnly => out.copy_from_slice(d),
            InputVariant::BlendTwoToOne => {
                for i in 0..n {
                    out[i] = match order {
                        BlendOrder::ImageHeavy => (2.0 * plane[i] + d[i]) / 3.0,
                        BlendOrder::DescriptorHeavy => (plane[i] + 2.0 * d[i]) / 3.0,
                    };
                }
            }
            InputVariant::BlendOneToOne => {
                for i in 0..n {
                    out[i] = (plane[i] + d[i]) / 2.0;
                }
            }
        }
    }
    Ok(PerturbedInput {
        values: Tensor::new(vec![c, h, w], data)?,
        variant,
    })
}

/// Sobel gradients with replicated borders.
fn sobel_gradients(gray: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        gray.at2(y, x)
    };
    let mut gx = Tensor::zeros(vec![h, w]);
    let mut gy = Tensor::zeros(vec![h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let vx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let vy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            gx.data_mut()[y as usize * w + x as usize] = vx;
            gy.data_mut()[y as usize * w + x as usize] = vy;
        }
    }
    (gx, gy)
}

fn gaussian_blur(gray: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return gray.clone();
    }
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    // Separable pass with replicated borders.
    let mut tmp = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * gray.at2(y, sx);
            }
            tmp.data_mut()[y * w + x as usize] = acc;
        }
    }
    let mut out = Tensor::zeros(vec![h, w]);
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp.at2(sy, x);
            }
            out.data_mut()[y as usize * w + x] = acc;
        }
    }
    out
}

/// Canny edges: blur, Sobel gradients, 4-direction non-maximum suppression,
/// hysteresis thresholds at `low`/`high` fractions of the maximum gradient,
/// 8-connected edge tracking. Output is strictly binary.
fn canny(gray: &Tensor, params: CannyParams) -> Result<Tensor> {
    if !(params.blur_sigma >= 0.0)
        || !(0.0..=1.0).contains(&params.low_fraction)
        || !(0.0..=1.0).contains(&params.high_fraction)
        || params.low_fraction > params.high_fraction
    {
        return Err(Error::Config(format!("invalid canny parameters {params:?}")));
    }
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let blurred = gaussian_blur(gray, params.blur_sigma);
    let (gx, gy) = sobel_gradients(&blurred);
    let mag = gx.zip(&gy, f64::hypot)?;
    let max = mag.max();
    if max <= 0.0 {
        return Ok(Tensor::zeros(vec![h, w]));
    }

    // Non-maximum suppression along the quantized gradient direction.
    let mut thin = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        for x in 0..w {
            let m = mag.at2(y, x);
            if m == 0.0 {
                continue;
            }
            let angle = gy.at2(y, x).atan2(gx.at2(y, x)).to_degrees();
            let angle = if angle < 0.0 { angle + 180.0 } else { angle };
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0isize, 1isize) // horizontal gradient
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let neighbor = |sy: isize, sx: isize| -> f64 {
                let ny = y as isize + sy;
                let nx = x as isize + sx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    0.0
                } else {
                    mag.at2(ny as usize, nx as usize)
                }
            };
            if m >= neighbor(dy, dx) && m >= neighbor(-dy, -dx) {
                thin.data_mut()[y * w + x] = m;
            }
        }
    }

    let high = params.high_fraction * max;
    let low = params.low_fraction * max;
    let mut out = Tensor::zeros(vec![h, w]);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thin.at2(y, x) >= high {
                out.data_mut()[y * w + x] = 1.0;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if out.at2(ny, nx) == 0.0 && thin.at2(ny, nx) >= low {
                    out.data_mut()[ny * w + nx] = 1.0;
                    stack.push((ny, nx));
                }
            }
        }
    }
    Ok(out)
}
