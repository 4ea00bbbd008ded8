//! Combining perturbed inputs with saliency maps.
//!
//! Three combination experiments over the three perturbed input versions
//! give nine candidates; the retained top-5 set is all three inputs under
//! experiment 1 plus inputs 1 and 3 under experiment 3 (experiment 2 keeps
//! nothing).

use std::fmt;

use crate::cam::{cam, finalize, grad_cam, grad_cam_pp, smooth_grad_cam_pp, SaliencyMap,
    SaliencyMethod, SmoothConfig};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::perturb::{edge_map, make_perturbed_with, BlendOrder, EdgeMethod, FeatureDescriptor,
    InputVariant, PerturbedInput};
use crate::tensor::Tensor;

/// The three pixel-wise combination experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    /// `clamp(k*F + M, 0, 1)` — weighted addition of the perturbed input.
    Add,
    /// `F . M` — multiplication by the perturbed input.
    Mul,
    /// `(1-F) . M` — multiplication by the complemented perturbed input.
    CompMul,
}

impl Experiment {
    pub fn index(&self) -> u8 {
        match self {
            Experiment::Add => 1,
            Experiment::Mul => 2,
            Experiment::CompMul => 3,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Experiment::Add),
            2 => Ok(Experiment::Mul),
            3 => Ok(Experiment::CompMul),
            other => Err(Error::Config(format!(
                "experiment must be 1, 2 or 3, got {other}"
            ))),
        }
    }
}

/// One (experiment, input variant) combination, e.g. `E1-I2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariantId {
    pub experiment: Experiment,
    pub input_variant: InputVariant,
}

impl VariantId {
    pub const fn new(experiment: Experiment, input_variant: InputVariant) -> Self {
        VariantId {
            experiment,
            input_variant,
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "E{}-I{}",
            self.experiment.index(),
            self.input_variant.index()
        )
    }
}

impl std::str::FromStr for VariantId {
    type Err = Error;

    /// Parse identifiers of the form `E1-I2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse variant id '{s}' (expected e.g. E1-I2)"));
        let (e, i) = s.split_once('-').ok_or_else(bad)?;
        let experiment = Experiment::from_index(
            e.strip_prefix('E').ok_or_else(bad)?.parse().map_err(|_| bad())?,
        )?;
        let input_variant = InputVariant::from_index(
            i.strip_prefix('I').ok_or_else(bad)?.parse().map_err(|_| bad())?,
        )?;
        Ok(VariantId::new(experiment, input_variant))
    }
}

/// All nine (experiment, input) combinations in enumeration order.
pub fn all_variants() -> Vec<VariantId> {
    let mut out = Vec::with_capacity(9);
    for e in [Experiment::Add, Experiment::Mul, Experiment::CompMul] {
        for i in [
            InputVariant::FeatureOnly,
            InputVariant::BlendTwoToOne,
            InputVariant::BlendOneToOne,
        ] {
            out.push(VariantId::new(e, i));
        }
    }
    out
}

/// The retained combinations, in reported order: experiment 1 ranked
/// input 2, 3, 1, then the two experiment-3 picks.
pub const DEFAULT_TOP5: [VariantId; 5] = [
    VariantId::new(Experiment::Add, InputVariant::BlendTwoToOne),
    VariantId::new(Experiment::Add, InputVariant::BlendOneToOne),
    VariantId::new(Experiment::Add, InputVariant::FeatureOnly),
    VariantId::new(Experiment::CompMul, InputVariant::BlendOneToOne),
    VariantId::new(Experiment::CompMul, InputVariant::FeatureOnly),
];

#[derive(Debug, Clone, Copy)]
pub struct FeatureCamConfig {
    /// Blend weight for experiment 1, in `[0, 0.5]`.
    pub k: f64,
    pub experiment: Experiment,
    pub input_variant: InputVariant,
    pub base_method: SaliencyMethod,
}

impl FeatureCamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.k) {
            return Err(Error::Config(format!(
                "k must lie in [0, 0.5], got {}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn variant(&self) -> VariantId {
        VariantId::new(self.experiment, self.input_variant)
    }
}

/// A combined perturbation-saliency map in `[0, 1]`, shaped like the
/// perturbed input (1 or 3 channels).
#[derive(Debug, Clone)]
pub struct FeatureCamMap {
    pub values: Tensor,
    pub variant: VariantId,
    pub k: f64,
    pub base_method: SaliencyMethod,
    pub class_index: usize,
    pub layer: String,
}

/// Combine a perturbed input with a finalized saliency map.
///
/// The single-channel saliency map is broadcast across the perturbed input's
/// channels. Experiment 1 clamps into `[0, 1]`; experiments 2 and 3 are
/// products of values already in `[0, 1]`.
pub fn combine(
    perturbed: &PerturbedInput,
    saliency: &SaliencyMap,
    cfg: &FeatureCamConfig,
) -> Result<FeatureCamMap> {
    cfg.validate()?;
    if cfg.input_variant != perturbed.variant {
        return Err(Error::Config(format!(
            "config names input variant {} but the perturbed input is variant {}",
            cfg.input_variant.index(),
            perturbed.variant.index()
        )));
    }
    let [c, h, w] = match perturbed.values.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Shape(format!(
                "perturbed input must be (c, h, w), got {other:?}"
            )))
        }
    };
    if saliency.values.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "saliency extents {:?} do not match perturbed input ({h}, {w})",
            saliency.values.shape()
        )));
    }

    let m = saliency.values.data();
    let n = h * w;
    let mut data = vec![0.0; c * n];
    for ch in 0..c {
        let f = &perturbed.values.data()[ch * n..(ch + 1) * n];
        let out = &mut data[ch * n..(ch + 1) * n];
        match cfg.experiment {
            Experiment::Add => {
                for i in 0..n {
                    out[i] = (cfg.k * f[i] + m[i]).clamp(0.0, 1.0);
                }
            }
            Experiment::Mul => {
                for i in 0..n {
                    out[i] = f[i] * m[i];
                }
            }
            Experiment::CompMul => {
                for i in 0..n {
                    out[i] = (1.0 - f[i]) * m[i];
                }
            }
        }
    }
    Ok(FeatureCamMap {
        values: Tensor::new(vec![c, h, w], data)?,
        variant: cfg.variant(),
        k: cfg.k,
        base_method: cfg.base_method,
        class_index: saliency.class_index,
        layer: saliency.layer.clone(),
    })
}

/// Everything `top5` needs beyond the image and base method.
#[derive(Debug, Clone)]
pub struct Top5Options {
    /// Experiment-1 blend weight (the constant 0.25 everywhere in this crate).
    pub k: f64,
    pub edge: EdgeMethod,
    pub blend_order: BlendOrder,
    /// Saliency layer; defaults to the last convolutional layer.
    pub layer: Option<String>,
    /// Class to explain; defaults to the argmax prediction.
    pub class_index: Option<usize>,
    /// Used when the base method is smoothed Grad-CAM++.
    pub smooth: SmoothConfig,
    /// Override the reported variant order; entries must be five distinct
    /// members of [`DEFAULT_TOP5`].
    pub variant_order: Option<Vec<VariantId>>,
}

impl Default for Top5Options {
    fn default() -> Self {
        Top5Options {
            k: 0.25,
            edge: EdgeMethod::Sobel,
            blend_order: BlendOrder::default(),
            layer: None,
            class_index: None,
            smooth: SmoothConfig::default(),
            variant_order: None,
        }
    }
}

/// Compute the base saliency map once and upgrade it to an input-enhanced
/// map for the named base method, layer and class.
pub fn base_saliency(
    net: &Network,
    image: &Tensor,
    method: SaliencyMethod,
    layer: Option<&str>,
    class_index: Option<usize>,
    smooth: &SmoothConfig,
) -> Result<SaliencyMap> {
    let trace = net.forward(image)?;
    let layer = match layer {
        Some(l) => l.to_string(),
        None => net.last_conv_layer()?.to_string(),
    };
    let class_index = class_index.unwrap_or_else(|| trace.prediction().0);
    let raw = match method {
        SaliencyMethod::Cam => cam(net, &trace, class_index)?.relu(),
        SaliencyMethod::GradCam => grad_cam(net, &trace, class_index, &layer)?,
        SaliencyMethod::GradCamPp => grad_cam_pp(net, &trace, class_index, &layer)?,
        SaliencyMethod::SmoothGradCamPp => {
            smooth_grad_cam_pp(net, image, class_index, &layer, smooth)?
        }
    };
    let [_, h, w] = net.input_shape();
    Ok(finalize(&raw, h, w))
}

/// The five retained combinations for one image, in order, each bitwise
/// identical to calling [`combine`] with the same inputs.
pub fn top5(
    net: &Network,
    image: &Tensor,
    base_method: SaliencyMethod,
    opts: &Top5Options,
) -> Result<Vec<FeatureCamMap>> {
    let fdesc = edge_map(image, opts.edge)?;
    top5_with_descriptor(net, image, base_method, opts, &fdesc)
}

/// As [`top5`], but with a caller-supplied descriptor (e.g. an ingested
/// externally computed edge map) instead of the built-in detectors.
pub fn top5_with_descriptor(
    net: &Network,
    image: &Tensor,
    base_method: SaliencyMethod,
    opts: &Top5Options,
    fdesc: &FeatureDescriptor,
) -> Result<Vec<FeatureCamMap>> {
    let order = match &opts.variant_order {
        None => DEFAULT_TOP5.to_vec(),
        Some(order) => {
            if order.len() != 5
                || order.iter().any(|v| !DEFAULT_TOP5.contains(v))
                || (1..order.len()).any(|i| order[..i].contains(&order[i]))
            {
                return Err(Error::Config(
                    "variant order must be a permutation of the top-5 set".into(),
                ));
            }
            order.clone()
        }
    };
    let saliency = base_saliency(
        net,
        image,
        base_method,
        opts.layer.as_deref(),
        opts.class_index,
        &opts.smooth,
    )?;
    top5_from_parts(image, &saliency, fdesc, base_method, opts, &order)
}

pub(crate) fn top5_from_parts(
    image: &Tensor,
    saliency: &SaliencyMap,
    fdesc: &FeatureDescriptor,
    base_method: SaliencyMethod,
    opts: &Top5Options,
    order: &[VariantId],
) -> Result<Vec<FeatureCamMap>> {
    order
        .iter()
        .map(|vid| {
            let perturbed = make_perturbed_with(image, fdesc, vid.input_variant, opts.blend_order)?;
            combine(
                &perturbed,
                saliency,
                &FeatureCamConfig {
                    k: opts.k,
                    experiment: vid.experiment,
                    input_variant: vid.input_variant,
                    base_method,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::DescriptorSource;

    fn saliency(values: Tensor) -> SaliencyMap {
        SaliencyMap {
            values,
            method: SaliencyMethod::GradCam,
            class_index: 0,
            layer: "conv".into(),
        }
    }

    fn perturbed(values: Tensor, variant: InputVariant) -> PerturbedInput {
        PerturbedInput { values, variant }
    }

    fn cfg(experiment: Experiment, input_variant: InputVariant, k: f64) -> FeatureCamConfig {
        FeatureCamConfig {
            k,
            experiment,
            input_variant,
            base_method: SaliencyMethod::GradCam,
        }
    }

    fn sal_2x2() -> SaliencyMap {
        saliency(Tensor::new(vec![2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap())
    }

    #[test]
    fn experiment1_with_zero_k_is_identity() {
        let s = sal_2x2();
        let f = perturbed(
            Tensor::new(vec![1, 2, 2], vec![0.9, 0.8, 0.7, 0.6]).unwrap(),
            InputVariant::FeatureOnly,
        );
        let out = combine(&f, &s, &cfg(Experiment::Add, InputVariant::FeatureOnly, 0.0)).unwrap();
        assert_eq!(out.values.data(), s.values.data());
    }

    #[test]
    fn experiment2_identity_and_annihilator() {
        let s = sal_2x2();
        let ones = perturbed(Tensor::filled(vec![1, 2, 2], 1.0), InputVariant::FeatureOnly);
        let out = combine(&ones, &s, &cfg(Experiment::Mul, InputVariant::FeatureOnly, 0.25))
            .unwrap();
        assert_eq!(out.values.data(), s.values.data());

        let zeros = perturbed(Tensor::zeros(vec![1, 2, 2]), InputVariant::FeatureOnly);
        let out = combine(&zeros, &s, &cfg(Experiment::Mul, InputVariant::FeatureOnly, 0.25))
            .unwrap();
        assert!(out.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn experiment3_zero_input_is_identity() {
        let s = sal_2x2();
        let zeros = perturbed(Tensor::zeros(vec![1, 2, 2]), InputVariant::FeatureOnly);
        let out = combine(
            &zeros,
            &s,
            &cfg(Experiment::CompMul, InputVariant::FeatureOnly, 0.25),
        )
        .unwrap();
        assert_eq!(out.values.data(), s.values.data());
    }

    #[test]
    fn experiment1_arithmetic() {
        let s = saliency(Tensor::filled(vec![1, 1], 0.5));
        let f = perturbed(Tensor::filled(vec![1, 1, 1], 1.0), InputVariant::FeatureOnly);
        let out = combine(&f, &s, &cfg(Experiment::Add, InputVariant::FeatureOnly, 0.25)).unwrap();
        assert_eq!(out.values.data()[0], 0.75);
    }

    #[test]
    fn k_out_of_range_rejected() {
        let s = sal_2x2();
        let f = perturbed(Tensor::zeros(vec![1, 2, 2]), InputVariant::FeatureOnly);
        assert!(matches!(
            combine(&f, &s, &cfg(Experiment::Add, InputVariant::FeatureOnly, 0.6)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            combine(&f, &s, &cfg(Experiment::Add, InputVariant::FeatureOnly, -0.1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn monotone_in_saliency_and_bounded() {
        let mut rng = crate::rng::Rng::new(9);
        for _ in 0..20 {
            let f = perturbed(
                Tensor::new(vec![1, 3, 3], (0..9).map(|_| rng.next_f64()).collect()).unwrap(),
                InputVariant::FeatureOnly,
            );
            let m1: Vec<f64> = (0..9).map(|_| rng.next_f64() * 0.5).collect();
            let m2: Vec<f64> = m1.iter().map(|v| (v + rng.next_f64() * 0.5).min(1.0)).collect();
            let s1 = saliency(Tensor::new(vec![3, 3], m1).unwrap());
            let s2 = saliency(Tensor::new(vec![3, 3], m2).unwrap());
            for experiment in [Experiment::Add, Experiment::Mul, Experiment::CompMul] {
                let c = cfg(experiment, InputVariant::FeatureOnly, 0.25);
                let o1 = combine(&f, &s1, &c).unwrap();
                let o2 = combine(&f, &s2, &c).unwrap();
                for (a, b) in o1.values.data().iter().zip(o2.values.data()) {
                    assert!(a <= b, "{experiment:?}: {a} > {b}");
                }
                assert!(o1.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                // Experiments 2 and 3 shrink the map pointwise.
                if experiment != Experiment::Add {
                    for (o, m) in o1.values.data().iter().zip(s1.values.data()) {
                        assert!(o <= m);
                    }
                }
            }
        }
    }

    #[test]
    fn experiment1_exceeds_map_and_clamps_only_when_needed() {
        let s = saliency(Tensor::new(vec![1, 2], vec![0.5, 0.95]).unwrap());
        let f = perturbed(
            Tensor::new(vec![1, 1, 2], vec![0.4, 1.0]).unwrap(),
            InputVariant::FeatureOnly,
        );
        let out = combine(&f, &s, &cfg(Experiment::Add, InputVariant::FeatureOnly, 0.25)).unwrap();
        assert_eq!(out.values.data()[0], 0.5 + 0.25 * 0.4);
        assert_eq!(out.values.data()[1], 1.0); // 0.95 + 0.25 clamps
        for (o, m) in out.values.data().iter().zip(s.values.data()) {
            assert!(o >= m);
        }
    }

    #[test]
    fn zero_descriptor_degeneracy() {
        let s = sal_2x2();
        let zeros = perturbed(Tensor::zeros(vec![1, 2, 2]), InputVariant::FeatureOnly);
        let e1 = combine(&zeros, &s, &cfg(Experiment::Add, InputVariant::FeatureOnly, 0.25))
            .unwrap();
        let e2 = combine(&zeros, &s, &cfg(Experiment::Mul, InputVariant::FeatureOnly, 0.25))
            .unwrap();
        let e3 = combine(
            &zeros,
            &s,
            &cfg(Experiment::CompMul, InputVariant::FeatureOnly, 0.25),
        )
        .unwrap();
        assert_eq!(e1.values.data(), s.values.data());
        assert!(e2.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(e3.values.data(), s.values.data());
    }

    #[test]
    fn top5_returns_expected_variants_consistent_with_combine() {
        let net = crate::nn::mnist_network(3);
        let mut rng = crate::rng::Rng::new(21);
        let img =
            Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_f64()).collect()).unwrap();
        let opts = Top5Options::default();
        let maps = top5(&net, &img, SaliencyMethod::GradCam, &opts).unwrap();
        assert_eq!(maps.len(), 5);
        let ids: Vec<String> = maps.iter().map(|m| m.variant.to_string()).collect();
        assert_eq!(ids, ["E1-I2", "E1-I3", "E1-I1", "E3-I3", "E3-I1"]);
        assert!(maps.iter().all(|m| m.variant.experiment != Experiment::Mul));

        // Bitwise consistency with direct combine() calls.
        let saliency = base_saliency(&net, &img, SaliencyMethod::GradCam, None, None, &opts.smooth)
            .unwrap();
        let fdesc = edge_map(&img, opts.edge).unwrap();
        for map in &maps {
            let p = make_perturbed_with(&img, &fdesc, map.variant.input_variant, opts.blend_order)
                .unwrap();
            let direct = combine(
                &p,
                &saliency,
                &FeatureCamConfig {
                    k: opts.k,
                    experiment: map.variant.experiment,
                    input_variant: map.variant.input_variant,
                    base_method: SaliencyMethod::GradCam,
                },
            )
            .unwrap();
            assert_eq!(map.values, direct.values, "{}", map.variant);
        }
        let _ = DescriptorSource::Sobel;
    }

    #[test]
    fn top5_rejects_bad_order() {
        let net = crate::nn::mnist_network(3);
        let img = Tensor::filled(vec![1, 28, 28], 0.5);
        let opts = Top5Options {
            variant_order: Some(vec![
                VariantId::new(Experiment::Mul, InputVariant::FeatureOnly); 5
            ]),
            ..Top5Options::default()
        };
        assert!(matches!(
            top5(&net, &img, SaliencyMethod::GradCam, &opts),
            Err(Error::Config(_))
        ));
    }
}
