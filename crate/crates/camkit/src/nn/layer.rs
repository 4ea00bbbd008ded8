//! Layer definitions and their forward/backward kernels.
//!
//! All activations are `(channels, height, width)` rank-3 tensors until a
//! `Dense` layer flattens them. Convolution uses cross-correlation semantics
//! (no kernel flip). Max-pool routes gradient to the first maximal element in
//! row-major scan order on ties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Relu,
    MaxPool {
        window: [usize; 2],
        stride: [usize; 2],
    },
    GlobalAvgPool,
    Dense {
        units: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// Trainable parameters attached to a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv { kernels: Tensor, bias: Tensor },
    Dense { weights: Tensor, bias: Tensor },
}

impl LayerKind {
    /// Output shape for a given input shape, or why the pair is invalid.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = expect_chw(input)?;
                let _ = c;
                if stride[0] == 0 || stride[1] == 0 {
                    return Err(Error::Shape("conv stride must be >= 1".into()));
                }
                if kernel[0] == 0 || kernel[1] == 0 || *out_channels == 0 {
                    return Err(Error::Shape("conv kernel extents must be >= 1".into()));
                }
                let oh = conv_extent(h, kernel[0], stride[0], padding[0])?;
                let ow = conv_extent(w, kernel[1], stride[1], padding[1])?;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool { window, stride } => {
                let [c, h, w] = expect_chw(input)?;
                if stride[0] == 0 || stride[1] == 0 {
                    return Err(Error::Shape("pool stride must be >= 1".into()));
                }
                if window[0] == 0 || window[1] == 0 || window[0] > h || window[1] > w {
                    return Err(Error::Shape(format!(
                        "pool window {window:?} does not fit input {input:?}"
                    )));
                }
                Ok(vec![
                    c,
                    (h - window[0]) / stride[0] + 1,
                    (w - window[1]) / stride[1] + 1,
                ])
            }
            LayerKind::GlobalAvgPool => {
                let [c, _, _] = expect_chw(input)?;
                Ok(vec![c])
            }
            LayerKind::Dense { units } => {
                if *units == 0 {
                    return Err(Error::Shape("dense layer needs at least one unit".into()));
                }
                Ok(vec![*units])
            }
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return Err(Error::Shape(format!(
                        "softmax expects a vector, got shape {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }
}

fn expect_chw(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::Shape(format!(
            "expected (channels, height, width), got {other:?}"
        ))),
    }
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel > input + 2 * padding {
        return Err(Error::Shape(format!(
            "kernel extent {kernel} exceeds padded input extent {}",
            input + 2 * padding
        )));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// 2-D cross-correlation of a `(c, h, w)` input with `(o, c, kh, kw)` kernels.
///
/// Output extents are `floor((in + 2*pad - k) / stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    conv2d_forward(input, kernels, None, stride, padding)
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let [ic, ih, iw] = expect_chw(input.shape())?;
    let kshape = kernels.shape();
    if kernels.rank() != 4 {
        return Err(Error::Shape(format!(
            "kernels must be (out, in, kh, kw), got {kshape:?}"
        )));
    }
    let (oc, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kc != ic {
        return Err(Error::Shape(format!(
            "kernel channel count {kc} does not match input channels {ic}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {oc} output channels",
                b.shape()
            )));
        }
    }
    let (sh, sw) = stride;
    if sh == 0 || sw == 0 {
        return Err(Error::Shape("conv stride must be >= 1".into()));
    }
    let oh = conv_extent(ih, kh, sh, padding.0)?;
    let ow = conv_extent(iw, kw, sw, padding.1)?;

    let mut out = Tensor::zeros(vec![oc, oh, ow]);
    let x = input.data();
    let k = kernels.data();
    if (sh, sw) == (1, 1) {
        // Stride-1 fast path: accumulate whole rows per kernel tap.
        let (ph, pw) = padding;
        let fused3 = kw == 3 && pw == 1 && iw >= 2; // then ow == iw
        let od = out.data_mut();
        for o in 0..oc {
            let b = bias.map_or(0.0, |b| b.data()[o]);
            od[o * oh * ow..(o + 1) * oh * ow].fill(b);
            for c in 0..ic {
                for ky in 0..kh {
                    let oy_lo = ph.saturating_sub(ky);
                    let oy_hi = (ih + ph).saturating_sub(ky).min(oh);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - ph;
                        let xrow = &x[(c * ih + iy) * iw..(c * ih + iy + 1) * iw];
                        let orow = &mut od[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                        let krow = &k[((o * kc + c) * kh + ky) * kw..][..kw];
                        if fused3 {
                            // One pass over the row with all three taps.
                            let (k0, k1, k2) = (krow[0], krow[1], krow[2]);
                            orow[0] += k1 * xrow[0] + k2 * xrow[1];
                            for ox in 1..ow - 1 {
                                orow[ox] +=
                                    k0 * xrow[ox - 1] + k1 * xrow[ox] + k2 * xrow[ox + 1];
                            }
                            orow[ow - 1] += k0 * xrow[ow - 2] + k1 * xrow[ow - 1];
                            continue;
                        }
                        for (kx, &kv) in krow.iter().enumerate() {
                            let ox_lo = pw.saturating_sub(kx);
                            let ox_hi = (iw + pw).saturating_sub(kx).min(ow);
                            let xs = &xrow[ox_lo + kx - pw..ox_hi + kx - pw];
                            for (dst, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(xs) {
                                *dst += kv * xv;
                            }
                        }
                    }
                }
            }
        }
        return Ok(out);
    }
    for o in 0..oc {
        let b = bias.map_or(0.0, |b| b.data()[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for c in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - padding.0 as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let xrow = (c * ih + iy as usize) * iw;
                        let krow = ((o * kc + c) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - padding.1 as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] * k[krow + kx];
                        }
                    }
                }
                out.set3(o, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv2d_backward_input(
    grad_out: &Tensor,
    kernels: &Tensor,
    input_shape: &[usize],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor {
    let [ic, ih, iw] = expect_chw(input_shape).expect("validated at build");
    let kshape = kernels.shape();
    let (oc, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    let [_, oh, ow] = expect_chw(grad_out.shape()).expect("validated at build");

    let mut grad_in = Tensor::zeros(vec![ic, ih, iw]);
    let g = grad_out.data();
    let k = kernels.data();
    let gi = grad_in.data_mut();
    if stride == (1, 1) {
        let (ph, pw) = padding;
        let fused3 = kw == 3 && pw == 1 && iw >= 2; // then ow == iw
        for o in 0..oc {
            for c in 0..ic {
                for ky in 0..kh {
                    let oy_lo = ph.saturating_sub(ky);
                    let oy_hi = (ih + ph).saturating_sub(ky).min(oh);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - ph;
                        let grow = &g[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                        let irow = &mut gi[(c * ih + iy) * iw..(c * ih + iy + 1) * iw];
                        let krow = &k[((o * ic + c) * kh + ky) * kw..][..kw];
                        if fused3 {
                            // grad_in[ix] collects k0*g[ix+1] + k1*g[ix] + k2*g[ix-1].
                            let (k0, k1, k2) = (krow[0], krow[1], krow[2]);
                            irow[0] += k0 * grow[1] + k1 * grow[0];
                            for ix in 1..iw - 1 {
                                irow[ix] +=
                                    k0 * grow[ix + 1] + k1 * grow[ix] + k2 * grow[ix - 1];
                            }
                            irow[iw - 1] += k1 * grow[iw - 1] + k2 * grow[iw - 2];
                            continue;
                        }
                        for (kx, &kv) in krow.iter().enumerate() {
                            if kv == 0.0 {
                                continue;
                            }
                            let ox_lo = pw.saturating_sub(kx);
                            let ox_hi = (iw + pw).saturating_sub(kx).min(ow);
                            let is = &mut irow[ox_lo + kx - pw..ox_hi + kx - pw];
                            for (dst, &gv) in is.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *dst += gv * kv;
                            }
                        }
                    }
                }
            }
        }
        return grad_in;
    }
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(o * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for c in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let irow = (c * ih + iy as usize) * iw;
                        let krow = ((o * ic + c) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            gi[irow + ix as usize] += gv * k[krow + kx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub(crate) fn conv2d_backward_params(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: (usize, usize),
    padding: (usize, usize),
) -> (Tensor, Tensor) {
    let [ic, ih, iw] = expect_chw(input.shape()).expect("validated at build");
    let (oc, kh, kw) = (kernel_shape[0], kernel_shape[2], kernel_shape[3]);
    let [_, oh, ow] = expect_chw(grad_out.shape()).expect("validated at build");

    let mut dk = Tensor::zeros(kernel_shape.to_vec());
    let mut db = Tensor::zeros(vec![oc]);
    let x = input.data();
    let g = grad_out.data();
    if stride == (1, 1) {
        let (ph, pw) = padding;
        let fused3 = kw == 3 && pw == 1 && iw >= 2; // then ow == iw
        let dkd = dk.data_mut();
        for o in 0..oc {
            let bsum: f64 = g[o * oh * ow..(o + 1) * oh * ow].iter().sum();
            db.data_mut()[o] = bsum;
            for c in 0..ic {
                for ky in 0..kh {
                    let oy_lo = ph.saturating_sub(ky);
                    let oy_hi = (ih + ph).saturating_sub(ky).min(oh);
                    if fused3 {
                        // All three taps of the row in one pass.
                        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - ph;
                            let grow = &g[(o * oh + oy) * ow..][..ow];
                            let xrow = &x[(c * ih + iy) * iw..][..iw];
                            a1 += grow[0] * xrow[0];
                            a2 += grow[0] * xrow[1];
                            for ox in 1..ow - 1 {
                                let gv = grow[ox];
                                a0 += gv * xrow[ox - 1];
                                a1 += gv * xrow[ox];
                                a2 += gv * xrow[ox + 1];
                            }
                            let gv = grow[ow - 1];
                            a0 += gv * xrow[ow - 2];
                            a1 += gv * xrow[ow - 1];
                        }
                        let base = ((o * ic + c) * kh + ky) * kw;
                        dkd[base] = a0;
                        dkd[base + 1] = a1;
                        dkd[base + 2] = a2;
                        continue;
                    }
                    for kx in 0..kw {
                        let ox_lo = pw.saturating_sub(kx);
                        let ox_hi = (iw + pw).saturating_sub(kx).min(ow);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - ph;
                            let grow = &g[(o * oh + oy) * ow..][..ow];
                            let xrow = &x[(c * ih + iy) * iw..][..iw];
                            let xs = &xrow[ox_lo + kx - pw..ox_hi + kx - pw];
                            for (&gv, &xv) in grow[ox_lo..ox_hi].iter().zip(xs) {
                                acc += gv * xv;
                            }
                        }
                        dkd[((o * ic + c) * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
        return (dk, db);
    }
    {
        let dkd = dk.data_mut();
        for o in 0..oc {
            let mut bsum = 0.0;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(o * oh + oy) * ow + ox];
                    bsum += gv;
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let xrow = (c * ih + iy as usize) * iw;
                            let krow = ((o * ic + c) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                dkd[krow + kx] += gv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
            db.data_mut()[o] = bsum;
        }
    }
    (dk, db)
}

pub(crate) fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub(crate) fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    input
        .zip(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
        .expect("shapes validated at build")
}

pub(crate) fn maxpool_forward(input: &Tensor, window: [usize; 2], stride: [usize; 2]) -> Tensor {
    let [c, h, w] = expect_chw(input.shape()).expect("validated at build");
    let oh = (h - window[0]) / stride[0] + 1;
    let ow = (w - window[1]) / stride[1] + 1;
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..window[0] {
                    for kx in 0..window[1] {
                        let v = input.at3(ch, oy * stride[0] + ky, ox * stride[1] + kx);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.set3(ch, oy, ox, best);
            }
        }
    }
    out
}

pub(crate) fn maxpool_backward(
    input: &Tensor,
    grad_out: &Tensor,
    window: [usize; 2],
    stride: [usize; 2],
) -> Tensor {
    let [c, h, w] = expect_chw(input.shape()).expect("validated at build");
    let [_, oh, ow] = expect_chw(grad_out.shape()).expect("validated at build");
    let mut grad_in = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                // First maximum in scan order receives the gradient.
                let (mut best, mut by, mut bx) = (f64::NEG_INFINITY, 0, 0);
                for ky in 0..window[0] {
                    for kx in 0..window[1] {
                        let (iy, ix) = (oy * stride[0] + ky, ox * stride[1] + kx);
                        let v = input.at3(ch, iy, ix);
                        if v > best {
                            best = v;
                            by = iy;
                            bx = ix;
                        }
                    }
                }
                let g = grad_out.at3(ch, oy, ox);
                let idx = (ch * h + by) * w + bx;
                grad_in.data_mut()[idx] += g;
            }
        }
    }
    grad_in
}

pub(crate) fn gap_forward(input: &Tensor) -> Tensor {
    let [c, h, w] = expect_chw(input.shape()).expect("validated at build");
    let z = (h * w) as f64;
    let mut out = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let base = ch * h * w;
        let sum: f64 = input.data()[base..base + h * w].iter().sum();
        out.data_mut()[ch] = sum / z;
    }
    out
}

pub(crate) fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let [c, h, w] = expect_chw(input_shape).expect("validated at build");
    let z = (h * w) as f64;
    let mut grad_in = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let g = grad_out.data()[ch] / z;
        let base = ch * h * w;
        for v in &mut grad_in.data_mut()[base..base + h * w] {
            *v = g;
        }
    }
    grad_in
}

pub(crate) fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Tensor {
    let (units, fan_in) = (weights.shape()[0], weights.shape()[1]);
    debug_assert_eq!(fan_in, input.len());
    let x = input.data();
    let w = weights.data();
    let mut out = Tensor::zeros(vec![units]);
    for u in 0..units {
        let row = &w[u * fan_in..(u + 1) * fan_in];
        let mut acc = bias.data()[u];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out.data_mut()[u] = acc;
    }
    out
}

pub(crate) fn dense_backward_input(
    weights: &Tensor,
    grad_out: &Tensor,
    input_shape: &[usize],
) -> Tensor {
    let (units, fan_in) = (weights.shape()[0], weights.shape()[1]);
    let w = weights.data();
    let g = grad_out.data();
    let mut grad_in = Tensor::zeros(input_shape.to_vec());
    {
        let gi = grad_in.data_mut();
        for u in 0..units {
            let gv = g[u];
            if gv == 0.0 {
                continue;
            }
            let row = &w[u * fan_in..(u + 1) * fan_in];
            for (dst, wi) in gi.iter_mut().zip(row) {
                *dst += gv * wi;
            }
        }
    }
    grad_in
}

pub(crate) fn dense_backward_params(input: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let units = grad_out.len();
    let fan_in = input.len();
    let mut dw = Tensor::zeros(vec![units, fan_in]);
    {
        let dwd = dw.data_mut();
        for u in 0..units {
            let gv = grad_out.data()[u];
            for (i, &xi) in input.data().iter().enumerate() {
                dwd[u * fan_in + i] = gv * xi;
            }
        }
    }
    (dw, grad_out.clone())
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let m = logits.max();
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(
        logits.shape().to_vec(),
        exps.into_iter().map(|e| e / sum).collect(),
    )
    .expect("softmax of finite logits is finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let kernel = t(vec![1, 1, 1, 1], vec![1.0]);
        let out = conv2d(&input, &kernel, (1, 1), (0, 0)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_all_ones_sums_elements() {
        let input = t(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let kernel = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        let out = conv2d(&input, &kernel, (1, 1), (0, 0)).unwrap();
        assert_eq!(out.shape(), [1, 1, 1]);
        assert_eq!(out.data()[0], 10.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = t(vec![2, 3, 3], vec![0.0; 18]);
        let kernel = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        assert!(matches!(
            conv2d(&input, &kernel, (1, 1), (0, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let input = t(vec![1, 2, 2], vec![0.0; 4]);
        let kernel = t(vec![1, 1, 3, 3], vec![1.0; 9]);
        assert!(conv2d(&input, &kernel, (1, 1), (0, 0)).is_err());
        // With padding 1 the same kernel fits: 2 + 2*1 >= 3.
        assert!(conv2d(&input, &kernel, (1, 1), (1, 1)).is_ok());
    }

    /// Independent direct-summation reference: six nested loops over an
    /// explicitly zero-padded copy of the input.
    fn conv_reference(
        input: &Tensor,
        kernels: &Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Tensor {
        let (ic, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (oc, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
        let (ph, pw) = (ih + 2 * padding.0, iw + 2 * padding.1);
        let mut padded = Tensor::zeros(vec![ic, ph, pw]);
        for c in 0..ic {
            for y in 0..ih {
                for x in 0..iw {
                    padded.set3(c, y + padding.0, x + padding.1, input.at3(c, y, x));
                }
            }
        }
        let oh = (ph - kh) / stride.0 + 1;
        let ow = (pw - kw) / stride.1 + 1;
        let mut out = Tensor::zeros(vec![oc, oh, ow]);
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let kv = kernels.data()
                                    [((o * ic + c) * kh + ky) * kw + kx];
                                acc += padded.at3(c, oy * stride.0 + ky, ox * stride.1 + kx) * kv;
                            }
                        }
                    }
                    out.set3(o, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation_reference() {
        let mut rng = crate::rng::Rng::new(11);
        for &(stride, padding) in &[((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 2), (1, 1))] {
            let input = t(vec![1, 5, 5], (0..25).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let kernels = t(vec![2, 1, 3, 3], (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let got = conv2d(&input, &kernels, stride, padding).unwrap();
            let want = conv_reference(&input, &kernels, stride, padding);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_scan_order() {
        let input = t(vec![1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let grad_out = t(vec![1, 1, 1], vec![1.0]);
        let grad_in = maxpool_backward(&input, &grad_out, [2, 2], [2, 2]);
        assert_eq!(grad_in.data(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..50 {
            let logits = t(vec![6], (0..6).map(|_| rng.uniform(-40.0, 40.0)).collect());
            let p = softmax(&logits);
            assert!((p.sum() - 1.0).abs() < 1e-6);
            assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn shape_rules() {
        let conv = LayerKind::Conv2d {
            out_channels: 4,
            kernel: [3, 3],
            stride: [1, 1],
            padding: [0, 0],
        };
        assert_eq!(conv.output_shape(&[1, 8, 8]).unwrap(), vec![4, 6, 6]);
        let pool = LayerKind::MaxPool {
            window: [2, 2],
            stride: [2, 2],
        };
        assert_eq!(pool.output_shape(&[4, 6, 6]).unwrap(), vec![4, 3, 3]);
        assert_eq!(
            LayerKind::GlobalAvgPool.output_shape(&[4, 3, 3]).unwrap(),
            vec![4]
        );
        assert_eq!(
            LayerKind::Dense { units: 10 }.output_shape(&[4]).unwrap(),
            vec![10]
        );
    }
}
