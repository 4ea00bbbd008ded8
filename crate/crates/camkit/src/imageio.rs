//! PNG load/save, bilinear resizing, luminance, and heatmap colorization.
//!
//! Images are `(channels, height, width)` tensors with values in `[0, 1]`;
//! 8-bit PNG samples map to `k / 255`.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Load an 8-bit grayscale or RGB PNG as a `(c, h, w)` tensor in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("cannot read image {}: {e}", path.display())))?;
    let (data, shape) = match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (
                g.into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
                vec![1, h, w],
            )
        }
        DynamicImage::ImageLumaA8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data: Vec<f64> = g
                .pixels()
                .map(|p| p.0[0] as f64 / 255.0)
                .collect();
            (data, vec![1, h, w])
        }
        DynamicImage::ImageRgb8(c) => {
            let (w, h) = (c.width() as usize, c.height() as usize);
            (planar_rgb(c.pixels().map(|p| p.0), w, h), vec![3, h, w])
        }
        DynamicImage::ImageRgba8(c) => {
            let (w, h) = (c.width() as usize, c.height() as usize);
            (
                planar_rgb(c.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]), w, h),
                vec![3, h, w],
            )
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel format {:?} in {} (need 8-bit gray or RGB)",
                other.color(),
                path.display()
            )))
        }
    };
    Tensor::new(shape, data)
}

fn planar_rgb(pixels: impl Iterator<Item = [u8; 3]>, w: usize, h: usize) -> Vec<f64> {
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in pixels.enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    data
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Save a single-channel tensor (`(h, w)` or `(1, h, w)`) as 8-bit grayscale.
pub fn save_png_gray(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w, data) = match map.shape() {
        [h, w] => (*h, *w, map.data()),
        [1, h, w] => (*h, *w, map.data()),
        other => {
            return Err(Error::Shape(format!(
                "grayscale PNG needs a single-channel map, got {other:?}"
            )))
        }
    };
    let buf: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from shape");
    img.save(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })
}

/// Save a `(3, h, w)` tensor as an 8-bit RGB PNG.
pub fn save_png_rgb(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let [c, h, w] = match image.shape() {
        [c, h, w] if *c == 3 => [*c, *h, *w],
        other => {
            return Err(Error::Shape(format!(
                "RGB PNG needs a (3, h, w) tensor, got {other:?}"
            )))
        }
    };
    let _ = c;
    let mut buf = vec![0u8; 3 * h * w];
    for ch in 0..3 {
        for i in 0..h * w {
            buf[i * 3 + ch] = to_u8(image.data()[ch * h * w + i]);
        }
    }
    let img: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from shape");
    img.save(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })
}

/// Bilinear resize with half-pixel sample centers and edge clamping:
/// source coordinate of output pixel `d` is `(d + 0.5) * in/out - 0.5`.
///
/// Accepts `(h, w)` or `(c, h, w)` tensors (channels resized independently).
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    match t.shape() {
        [h, w] => resize_plane(t.data(), *h, *w, out_h, out_w),
        [c, h, w] => {
            let (c, h, w) = (*c, *h, *w);
            let mut data = Vec::with_capacity(c * out_h * out_w);
            for ch in 0..c {
                let plane = resize_plane(&t.data()[ch * h * w..(ch + 1) * h * w], h, w, out_h, out_w);
                data.extend_from_slice(plane.data());
            }
            Tensor::new(vec![c, out_h, out_w], data).expect("finite resize")
        }
        other => panic!("resize_bilinear expects rank 2 or 3, got {other:?}"),
    }
}

fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
    let mut out = Tensor::zeros(vec![out_h, out_w]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let wy = fy - y0;
        let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1i = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..out_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let wx = fx - x0;
            let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1i = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            let top = (1.0 - wx) * src[y0i * w + x0i] + wx * src[y0i * w + x1i];
            let bot = (1.0 - wx) * src[y1i * w + x0i] + wx * src[y1i * w + x1i];
            out.data_mut()[oy * out_w + ox] = (1.0 - wy) * top + wy * bot;
        }
    }
    out
}

/// Reduce an image to a `(h, w)` luminance plane (Rec. 601 weights for RGB).
pub fn luminance(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [h, w] => Tensor::new(vec![*h, *w], t.data().to_vec()),
        [1, ..] => Ok(t.channel(0)),
        [3, h, w] => {
            let (h, w) = (*h, *w);
            let n = h * w;
            let d = t.data();
            let data = (0..n)
                .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
                .collect();
            Tensor::new(vec![h, w], data)
        }
        other => Err(Error::Shape(format!(
            "luminance expects 1 or 3 channels, got {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorStyle {
    Jet,
    Gray,
}

/// Map a scalar in `[0, 1]` to jet RGB. Piecewise linear between the
/// breakpoints 0 -> blue (0,0,1), 0.5 -> green (0,1,0), 1 -> red (1,0,0).
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        ((v - 0.5) * 2.0).clamp(0.0, 1.0),
        1.0 - (v - 0.5).abs() * 2.0,
        ((0.5 - v) * 2.0).clamp(0.0, 1.0),
    ]
}

/// Colorize a `(h, w)` map in `[0, 1]` to a `(3, h, w)` image.
pub fn colorize(map: &Tensor, style: ColorStyle) -> Result<Tensor> {
    let [h, w] = match map.shape() {
        [h, w] => [*h, *w],
        other => {
            return Err(Error::Shape(format!(
                "colorize expects a (h, w) map, got {other:?}"
            )))
        }
    };
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (i, &v) in map.data().iter().enumerate() {
        let rgb = match style {
            ColorStyle::Jet => jet(v),
            ColorStyle::Gray => [v, v, v],
        };
        for c in 0..3 {
            data[c * n + i] = rgb[c];
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Blend a heatmap over an image: `(1-alpha)*image + alpha*heat`.
/// Grayscale images are broadcast to three channels.
pub fn overlay(image: &Tensor, heat: &Tensor, alpha: f64) -> Result<Tensor> {
    let [hc, hh, hw] = match heat.shape() {
        [c, h, w] if *c == 3 => [*c, *h, *w],
        other => {
            return Err(Error::Shape(format!(
                "overlay heat must be (3, h, w), got {other:?}"
            )))
        }
    };
    let _ = hc;
    let rgb: Tensor = match image.shape() {
        [1, h, w] if (*h, *w) == (hh, hw) => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(image.data());
            }
            Tensor::new(vec![3, *h, *w], data)?
        }
        [3, h, w] if (*h, *w) == (hh, hw) => image.clone(),
        other => {
            return Err(Error::Shape(format!(
                "overlay image shape {other:?} does not match heat ({hh}, {hw})"
            )))
        }
    };
    rgb.zip(heat, |a, b| (1.0 - alpha) * a + alpha * b)
}
