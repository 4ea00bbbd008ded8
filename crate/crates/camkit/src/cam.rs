//! The activation-based saliency family.
//!
//! All methods produce a [`RawMap`] at the resolution of the chosen
//! convolutional layer; [`finalize`] upsamples to input resolution and
//! min-max normalizes into `[0, 1]`.
//!
//! Class scores are always the pre-softmax logits; softmax probabilities are
//! only used for confidence reporting elsewhere.

use crate::error::{Error, Result};
use crate::imageio::resize_bilinear;
use crate::nn::{ForwardTrace, LayerKind, LayerParams, Network};
use crate::rng::{sub_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyMethod {
    Cam,
    GradCam,
    GradCamPp,
    SmoothGradCamPp,
}

impl SaliencyMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SaliencyMethod::Cam => "cam",
            SaliencyMethod::GradCam => "gradcam",
            SaliencyMethod::GradCamPp => "gradcampp",
            SaliencyMethod::SmoothGradCamPp => "smoothgradcampp",
        }
    }
}

/// Saliency at feature-map resolution, before upsampling and normalization.
#[derive(Debug, Clone)]
pub struct RawMap {
    pub values: Tensor,
    pub method: SaliencyMethod,
    pub class_index: usize,
    pub layer: String,
}

impl RawMap {
    /// Elementwise `max(v, 0)`.
    pub fn relu(&self) -> RawMap {
        RawMap {
            values: self.values.map(|v| v.max(0.0)),
            ..self.clone()
        }
    }
}

/// Normalized single-channel saliency at input resolution.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub method: SaliencyMethod,
    pub class_index: usize,
    pub layer: String,
}

/// Noise-averaging parameters for smoothed Grad-CAM++.
#[derive(Debug, Clone, Copy)]
pub struct SmoothConfig {
    /// Number of noisy samples averaged.
    pub n: usize,
    /// Gaussian standard deviation in input-intensity units.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            n: 8,
            sigma: 0.1,
            seed: 42,
        }
    }
}

impl SmoothConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("smoothing needs n >= 1 samples".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("smoothing sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Locate the GAP -> dense classifier head; errors if the network has any
/// other head shape (the architectural restriction of vanilla CAM).
fn gap_head(net: &Network) -> Result<(usize, usize)> {
    let layers = net.layers();
    let last = if matches!(layers.last().unwrap().kind, LayerKind::Softmax) {
        layers.len() - 2
    } else {
        layers.len() - 1
    };
    let restriction = "vanilla class-activation mapping requires a head of exactly \
                       global-avg-pool followed by one dense layer";
    if last < 1 || !matches!(layers[last].kind, LayerKind::Dense { .. }) {
        return Err(Error::Architecture(restriction.into()));
    }
    let gap = last - 1;
    if !matches!(layers[gap].kind, LayerKind::GlobalAvgPool) || gap == 0 {
        return Err(Error::Architecture(restriction.into()));
    }
    Ok((gap, last))
}

/// Weighted sum of the activations feeding the GAP head, using the dense row
/// of `class_index` as channel weights. The result is signed; callers apply
/// [`RawMap::relu`] when a display map is wanted.
pub fn cam(net: &Network, trace: &ForwardTrace, class_index: usize) -> Result<RawMap> {
    if class_index >= net.class_count() {
        return Err(Error::Config(format!(
            "class index {class_index} out of range for {} classes",
            net.class_count()
        )));
    }
    let (gap, dense) = gap_head(net)?;
    let feats = &trace.activations()[gap - 1];
    if feats.rank() != 3 {
        return Err(Error::Architecture(
            "layer feeding global-avg-pool must have a spatial activation".into(),
        ));
    }
    let LayerParams::Dense { weights, .. } = &net.params()[dense] else {
        unreachable!("dense layer carries dense params");
    };
    let (c, h, w) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
    let row = &weights.data()[class_index * c..(class_index + 1) * c];

    let mut map = Tensor::zeros(vec![h, w]);
    for k in 0..c {
        let wk = row[k];
        let plane = &feats.data()[k * h * w..(k + 1) * h * w];
        for (dst, &a) in map.data_mut().iter_mut().zip(plane) {
            *dst += wk * a;
        }
    }
    Ok(RawMap {
        values: map,
        method: SaliencyMethod::Cam,
        class_index,
        layer: net.layers()[gap - 1].name.clone(),
    })
}

fn spatial_grad_and_activation<'t>(
    net: &Network,
    trace: &'t ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<(Tensor, &'t Tensor)> {
    let grad = net.grad_wrt_activation(trace, class_index, layer)?;
    if grad.rank() != 3 {
        return Err(Error::Architecture(format!(
            "layer '{layer}' has no spatial activation to weight"
        )));
    }
    let idx = net.layer_index(layer)?;
    Ok((grad, &trace.activations()[idx]))
}

/// Gradient-weighted activation map: channel weights are the spatial mean of
/// the class-logit gradient, and the weighted sum is rectified.
pub fn grad_cam(
    net: &Network,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<RawMap> {
    let (grad, feats) = spatial_grad_and_activation(net, trace, class_index, layer)?;
    let (c, h, w) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
    let z = (h * w) as f64;

    let mut map = Tensor::zeros(vec![h, w]);
    for k in 0..c {
        let gplane = &grad.data()[k * h * w..(k + 1) * h * w];
        let alpha = gplane.iter().sum::<f64>() / z;
        let aplane = &feats.data()[k * h * w..(k + 1) * h * w];
        for (dst, &a) in map.data_mut().iter_mut().zip(aplane) {
            *dst += alpha * a;
        }
    }
    for v in map.data_mut() {
        *v = v.max(0.0);
    }
    Ok(RawMap {
        values: map,
        method: SaliencyMethod::GradCam,
        class_index,
        layer: layer.to_string(),
    })
}

/// Pixel-wise weighting coefficients used by Grad-CAM++ (exposed for
/// inspection and testing).
///
/// Higher-order derivatives use the exponential-score reformulation: with the
/// final score taken as `exp` of the logit, the second and third partials
/// reduce to powers of the first-order logit gradient `g`, and the shared
/// `exp` factor cancels:
///
/// ```text
/// alpha_ij = g_ij^2 / (2 g_ij^2 + sum(A) * g_ij^3)
/// ```
///
/// Pixels where the denominator is exactly zero get `alpha = 0`.
pub fn grad_cam_pp_alpha(
    net: &Network,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<Tensor> {
    let (grad, feats) = spatial_grad_and_activation(net, trace, class_index, layer)?;
    let (c, h, w) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
    let mut alpha = Tensor::zeros(vec![c, h, w]);
    for k in 0..c {
        let aplane = &feats.data()[k * h * w..(k + 1) * h * w];
        let gplane = &grad.data()[k * h * w..(k + 1) * h * w];
        let sum_a: f64 = aplane.iter().sum();
        let out = &mut alpha.data_mut()[k * h * w..(k + 1) * h * w];
        for (dst, &g) in out.iter_mut().zip(gplane) {
            let g2 = g * g;
            let denom = 2.0 * g2 + sum_a * g2 * g;
            *dst = if denom == 0.0 { 0.0 } else { g2 / denom };
        }
    }
    Ok(alpha)
}

/// Grad-CAM++: channel weights are alpha-weighted sums of the rectified
/// gradient; the combined map is rectified like plain Grad-CAM.
pub fn grad_cam_pp(
    net: &Network,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<RawMap> {
    let alpha = grad_cam_pp_alpha(net, trace, class_index, layer)?;
    let (grad, feats) = spatial_grad_and_activation(net, trace, class_index, layer)?;
    let (c, h, w) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);

    let mut map = Tensor::zeros(vec![h, w]);
    for k in 0..c {
        let gplane = &grad.data()[k * h * w..(k + 1) * h * w];
        let applane = &alpha.data()[k * h * w..(k + 1) * h * w];
        let wk: f64 = applane
            .iter()
            .zip(gplane)
            .map(|(&a, &g)| a * g.max(0.0))
            .sum();
        let aplane = &feats.data()[k * h * w..(k + 1) * h * w];
        for (dst, &a) in map.data_mut().iter_mut().zip(aplane) {
            *dst += wk * a;
        }
    }
    for v in map.data_mut() {
        *v = v.max(0.0);
    }
    Ok(RawMap {
        values: map,
        method: SaliencyMethod::GradCamPp,
        class_index,
        layer: layer.to_string(),
    })
}

/// Mean of Grad-CAM++ maps over `cfg.n` noisy copies of the input.
///
/// Noise is Gaussian in input-intensity units, the noisy input is clamped
/// back to `[0, 1]`, and sample `i` draws from `sub_seed(cfg.seed, i)` so the
/// result does not depend on evaluation order.
pub fn smooth_grad_cam_pp(
    net: &Network,
    image: &Tensor,
    class_index: usize,
    layer: &str,
    cfg: &SmoothConfig,
) -> Result<RawMap> {
    cfg.validate()?;
    let mut acc: Option<Tensor> = None;
    for i in 0..cfg.n {
        let mut rng = Rng::new(sub_seed(cfg.seed, i as u64));
        let noisy = image.map(|v| (v + cfg.sigma * rng.next_gaussian()).clamp(0.0, 1.0));
        let trace = net.forward(&noisy)?;
        let raw = grad_cam_pp(net, &trace, class_index, layer)?;
        acc = Some(match acc {
            None => raw.values,
            Some(a) => a.zip(&raw.values, |x, y| x + y)?,
        });
    }
    let n = cfg.n as f64;
    Ok(RawMap {
        values: acc.expect("n >= 1").map(|v| v / n),
        method: SaliencyMethod::SmoothGradCamPp,
        class_index,
        layer: layer.to_string(),
    })
}

/// Upsample a raw map to `(h, w)` and min-max normalize to `[0, 1]`.
/// Identically-constant raw maps normalize to all zeros.
pub fn finalize(raw: &RawMap, h: usize, w: usize) -> SaliencyMap {
    let up = resize_bilinear(&raw.values, h, w);
    let (lo, hi) = (up.min(), up.max());
    let values = if hi == lo {
        Tensor::zeros(vec![h, w])
    } else {
        up.map(|v| (v - lo) / (hi - lo))
    };
    SaliencyMap {
        values,
        method: raw.method,
        class_index: raw.class_index,
        layer: raw.layer.clone(),
    }
}
