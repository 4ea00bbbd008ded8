//! Explanation maps and classifier-side interpretability metrics.
//!
//! A saliency or combined map is thresholded into a binary mask (top pixels
//! by count), original-image pixels are copied onto the foreground, and the
//! result is classified again. Metrics compare those predictions and
//! confidences against the original image and against the base saliency
//! method's explanation maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{SaliencyMethod, SmoothConfig};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::feature_cam::{base_saliency, combine, FeatureCamConfig, VariantId};
use crate::imageio::luminance;
use crate::nn::Network;
use crate::perturb::{edge_map, make_perturbed_with, BlendOrder, EdgeMethod};
use crate::rng::{sub_seed, Rng};
use crate::tensor::Tensor;

/// Strictly binary mask over input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub values: Tensor,
    pub foreground_fraction: f64,
}

/// Threshold a map into a mask keeping the top `ceil((1 - p/100) * N)`
/// pixels by value (percentile 80 keeps the top 20% by count).
///
/// Ties break in row-major scan order. Identically-constant maps are fully
/// foreground. Multichannel maps are reduced to luminance first.
pub fn mask_from_map(map: &Tensor, percentile: f64) -> Result<BinaryMask> {
    if !(0.0 < percentile && percentile < 100.0) {
        return Err(Error::Config(format!(
            "percentile must lie in (0, 100), got {percentile}"
        )));
    }
    let plane = match map.rank() {
        2 => map.clone(),
        3 => luminance(map)?,
        _ => {
            return Err(Error::Shape(format!(
                "mask source must be (h, w) or (c, h, w), got {:?}",
                map.shape()
            )))
        }
    };
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let n = h * w;
    let data = plane.data();

    if data.iter().all(|&v| v == data[0]) {
        return Ok(BinaryMask {
            values: Tensor::filled(vec![h, w], 1.0),
            foreground_fraction: 1.0,
        });
    }

    // ceil(((100 - p) * N) / 100), computed in this form so that exact
    // integer counts (e.g. p = 80, N = 100) do not pick up rounding slack.
    let count = (((100.0 - percentile) * n as f64) / 100.0).ceil() as usize;
    let count = count.clamp(1, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));

    let mut mask = Tensor::zeros(vec![h, w]);
    for &idx in order.iter().take(count) {
        mask.data_mut()[idx] = 1.0;
    }
    Ok(BinaryMask {
        values: mask,
        foreground_fraction: count as f64 / n as f64,
    })
}

/// Copy image pixels onto the mask foreground; background is exactly zero.
pub fn explanation_map(image: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Shape(format!(
                "explanation map expects a (c, h, w) image, got {other:?}"
            )))
        }
    };
    if mask.values.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "mask extents {:?} do not match image ({h}, {w})",
            mask.values.shape()
        )));
    }
    let n = h * w;
    let mut data = vec![0.0; c * n];
    for ch in 0..c {
        let plane = &image.data()[ch * n..(ch + 1) * n];
        let out = &mut data[ch * n..(ch + 1) * n];
        for i in 0..n {
            out[i] = if mask.values.data()[i] == 1.0 {
                plane[i]
            } else {
                0.0
            };
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// What counts as the reference class for "right classification" and
/// confidence scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceMode {
    /// The classifier's own prediction on the original image.
    ModelPrediction,
    /// The dataset's ground-truth label.
    GroundTruth,
}

/// A map variant evaluated per image: the base saliency method itself or one
/// feature-enhanced combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalVariant {
    Base,
    Feature(VariantId),
}

impl EvalVariant {
    pub fn label(&self) -> String {
        match self {
            EvalVariant::Base => "base".into(),
            EvalVariant::Feature(vid) => vid.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub percentile: f64,
    pub reference: ReferenceMode,
    /// Feature-CAM variants to evaluate; the base method is always included.
    pub variants: Vec<VariantId>,
    pub base_method: SaliencyMethod,
    pub k: f64,
    pub edge: EdgeMethod,
    pub blend_order: BlendOrder,
    pub layer: Option<String>,
    pub smooth: SmoothConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            percentile: 80.0,
            reference: ReferenceMode::ModelPrediction,
            variants: crate::feature_cam::DEFAULT_TOP5.to_vec(),
            base_method: SaliencyMethod::GradCam,
            k: 0.25,
            edge: EdgeMethod::Sobel,
            blend_order: BlendOrder::default(),
            layer: None,
            smooth: SmoothConfig::default(),
        }
    }
}

/// Outcome of classifying one explanation map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub pred: usize,
    /// Softmax probability of the reference class.
    pub conf: f64,
    /// Prediction matches the reference class.
    pub right: bool,
    /// Confidence exceeds the original image's.
    pub gain_vs_orig: bool,
    /// Confidence exceeds the base explanation map's (always false for the
    /// base row itself).
    pub gain_vs_base: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub true_label: usize,
    pub orig_pred: usize,
    pub orig_conf: f64,
    pub outcomes: Vec<VariantOutcome>,
}

/// Per-variant aggregate rates, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub variant: String,
    pub right_pct: f64,
    pub avg_conf_pct: f64,
    pub gain_vs_orig_pct: f64,
    pub gain_vs_base_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub percentile: f64,
    pub reference: ReferenceMode,
    pub original_avg_conf_pct: f64,
    pub aggregates: Vec<VariantAggregate>,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn aggregate(&self, variant: &str) -> Option<&VariantAggregate> {
        self.aggregates.iter().find(|a| a.variant == variant)
    }
}

/// Run the evaluation pipeline with an arbitrary scorer and map source.
///
/// `score` maps an input image to softmax probabilities; `map_for` produces
/// the saliency/combined map (any single- or three-channel tensor) for one
/// image and variant. The public [`evaluate`] wires these to a [`Network`];
/// tests can substitute hand-built tables.
pub fn evaluate_with(
    score: &(dyn Fn(&Tensor) -> Result<Tensor> + Sync),
    map_for: &(dyn Fn(&Tensor, &EvalVariant) -> Result<Tensor> + Sync),
    data: &LabeledDataset,
    variants: &[VariantId],
    percentile: f64,
    reference: ReferenceMode,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let records: Result<Vec<EvalRecord>> = data
        .images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let probs = score(image)?;
            let orig_pred = probs.argmax();
            let reference_class = match reference {
                ReferenceMode::ModelPrediction => orig_pred,
                ReferenceMode::GroundTruth => data.labels[i],
            };
            let orig_conf = probs.data()[reference_class];

            let classify = |variant: &EvalVariant| -> Result<(usize, f64)> {
                let map = map_for(image, variant)?;
                let mask = mask_from_map(&map, percentile)?;
                let expl = explanation_map(image, &mask)?;
                let p = score(&expl)?;
                Ok((p.argmax(), p.data()[reference_class]))
            };

            let (base_pred, base_conf) = classify(&EvalVariant::Base)?;
            let mut outcomes = vec![VariantOutcome {
                variant: EvalVariant::Base.label(),
                pred: base_pred,
                conf: base_conf,
                right: base_pred == reference_class,
                gain_vs_orig: base_conf > orig_conf,
                gain_vs_base: false,
            }];
            for vid in variants {
                let variant = EvalVariant::Feature(*vid);
                let (pred, conf) = classify(&variant)?;
                outcomes.push(VariantOutcome {
                    variant: variant.label(),
                    pred,
                    conf,
                    right: pred == reference_class,
                    gain_vs_orig: conf > orig_conf,
                    gain_vs_base: conf > base_conf,
                });
            }
            Ok(EvalRecord {
                image_id: data.ids[i].clone(),
                true_label: data.labels[i],
                orig_pred,
                orig_conf,
                outcomes,
            })
        })
        .collect();
    let records = records?;
    Ok(EvalReport {
        percentile,
        reference,
        original_avg_conf_pct: 100.0
            * records.iter().map(|r| r.orig_conf).sum::<f64>()
            / records.len() as f64,
        aggregates: aggregate_records(&records),
        records,
    })
}

/// Recompute per-variant aggregates from the record list.
pub fn aggregate_records(records: &[EvalRecord]) -> Vec<VariantAggregate> {
    let mut variants: Vec<&str> = Vec::new();
    for r in records {
        for o in &r.outcomes {
            if !variants.contains(&o.variant.as_str()) {
                variants.push(&o.variant);
            }
        }
    }
    variants
        .iter()
        .map(|variant| {
            let outcomes: Vec<&VariantOutcome> = records
                .iter()
                .flat_map(|r| r.outcomes.iter().filter(|o| &o.variant == variant))
                .collect();
            let n = outcomes.len() as f64;
            let pct =
                |f: &dyn Fn(&VariantOutcome) -> f64| 100.0 * outcomes.iter().map(|o| f(o)).sum::<f64>() / n;
            VariantAggregate {
                variant: variant.to_string(),
                right_pct: pct(&|o| o.right as u8 as f64),
                avg_conf_pct: pct(&|o| o.conf),
                gain_vs_orig_pct: pct(&|o| o.gain_vs_orig as u8 as f64),
                gain_vs_base_pct: pct(&|o| o.gain_vs_base as u8 as f64),
            }
        })
        .collect()
}

/// Evaluate explanation maps for a trained network over a dataset.
///
/// For every image: classify the original, build the base-method explanation
/// map and one per requested feature-CAM variant, classify each, and record
/// predictions and reference-class confidences.
pub fn evaluate(net: &Network, data: &LabeledDataset, opts: &EvalOptions) -> Result<EvalReport> {
    if !(0.0..=0.5).contains(&opts.k) {
        return Err(Error::Config(format!("k must lie in [0, 0.5], got {}", opts.k)));
    }
    let score = |image: &Tensor| -> Result<Tensor> {
        Ok(net.forward(image)?.probabilities().clone())
    };
    let map_for = |image: &Tensor, variant: &EvalVariant| -> Result<Tensor> {
        let saliency = base_saliency(
            net,
            image,
            opts.base_method,
            opts.layer.as_deref(),
            None,
            &opts.smooth,
        )?;
        match variant {
            EvalVariant::Base => Ok(saliency.values),
            EvalVariant::Feature(vid) => {
                let fdesc = edge_map(image, opts.edge)?;
                let perturbed =
                    make_perturbed_with(image, &fdesc, vid.input_variant, opts.blend_order)?;
                let map = combine(
                    &perturbed,
                    &saliency,
                    &FeatureCamConfig {
                        k: opts.k,
                        experiment: vid.experiment,
                        input_variant: vid.input_variant,
                        base_method: opts.base_method,
                    },
                )?;
                Ok(map.values)
            }
        }
    };
    evaluate_with(
        &score,
        &map_for,
        data,
        &opts.variants,
        opts.percentile,
        opts.reference,
    )
}

/// Baseline statistics for uniformly random masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub right_pct: f64,
    pub avg_conf_pct: f64,
    pub foreground_fraction: f64,
    pub trials: usize,
}

/// Classify explanation maps built from uniformly random masks with the
/// given foreground fraction; averaged over `trials` seeded repetitions.
pub fn random_mask_baseline(
    net: &Network,
    data: &LabeledDataset,
    foreground_fraction: f64,
    seed: u64,
    trials: usize,
    reference: ReferenceMode,
) -> Result<BaselineStats> {
    if data.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    if !(0.0..=1.0).contains(&foreground_fraction) {
        return Err(Error::Config(format!(
            "foreground fraction must lie in [0, 1], got {foreground_fraction}"
        )));
    }
    if trials == 0 {
        return Err(Error::Config("baseline needs at least one trial".into()));
    }

    let per_trial: Result<Vec<(f64, f64)>> = (0..trials as u64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&trial| {
            let trial_seed = sub_seed(seed, trial);
            let outcomes: Result<Vec<(bool, f64)>> = data
                .images
                .par_iter()
                .enumerate()
                .map(|(i, image)| {
                    let (h, w) = (image.shape()[1], image.shape()[2]);
                    let n = h * w;
                    let count = (foreground_fraction * n as f64).round() as usize;
                    let mut rng = Rng::new(sub_seed(trial_seed, i as u64));
                    let mut order: Vec<usize> = (0..n).collect();
                    rng.shuffle(&mut order);
                    let mut mask = Tensor::zeros(vec![h, w]);
                    for &idx in order.iter().take(count) {
                        mask.data_mut()[idx] = 1.0;
                    }
                    let mask = BinaryMask {
                        values: mask,
                        foreground_fraction: count as f64 / n as f64,
                    };
                    let probs = net.forward(image)?.probabilities().clone();
                    let reference_class = match reference {
                        ReferenceMode::ModelPrediction => probs.argmax(),
                        ReferenceMode::GroundTruth => data.labels[i],
                    };
                    let expl = explanation_map(image, &mask)?;
                    let p = net.forward(&expl)?.probabilities().clone();
                    Ok((p.argmax() == reference_class, p.data()[reference_class]))
                })
                .collect();
            let outcomes = outcomes?;
            let n = outcomes.len() as f64;
            Ok((
                100.0 * outcomes.iter().filter(|(r, _)| *r).count() as f64 / n,
                100.0 * outcomes.iter().map(|(_, c)| c).sum::<f64>() / n,
            ))
        })
        .collect();
    let per_trial = per_trial?;
    let t = per_trial.len() as f64;
    Ok(BaselineStats {
        right_pct: per_trial.iter().map(|(r, _)| r).sum::<f64>() / t,
        avg_conf_pct: per_trial.iter().map(|(_, c)| c).sum::<f64>() / t,
        foreground_fraction,
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Serialize a report. Aggregates are recomputed from the records first and
/// must match the report's own. CSV holds one row per image and variant;
/// JSON mirrors the whole report and round-trips losslessly.
pub fn write_report(report: &EvalReport, path: impl AsRef<std::path::Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let recomputed = aggregate_records(&report.records);
    if recomputed != report.aggregates {
        return Err(Error::Data(
            "report aggregates do not match its records".into(),
        ));
    }
    match format {
        ReportFormat::Csv => {
            let mut wtr = csv::Writer::from_path(path).map_err(|e| {
                Error::Io {
                    path: path.display().to_string(),
                    source: std::io::Error::other(e),
                }
            })?;
            wtr.write_record([
                "image_id",
                "true_label",
                "orig_pred",
                "orig_conf",
                "variant_id",
                "variant_pred",
                "variant_conf",
                "right_flag",
                "conf_gain_vs_orig_flag",
                "conf_gain_vs_base_flag",
            ])
            .map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            })?;
            for r in &report.records {
                for o in &r.outcomes {
                    wtr.write_record([
                        r.image_id.clone(),
                        r.true_label.to_string(),
                        r.orig_pred.to_string(),
                        format!("{:.6}", r.orig_conf),
                        o.variant.clone(),
                        o.pred.to_string(),
                        format!("{:.6}", o.conf),
                        (o.right as u8).to_string(),
                        (o.gain_vs_orig as u8).to_string(),
                        (o.gain_vs_base as u8).to_string(),
                    ])
                    .map_err(|e| Error::Io {
                        path: path.display().to_string(),
                        source: std::io::Error::other(e),
                    })?;
                }
            }
            wtr.flush().map_err(|e| Error::io(path, e))
        }
        ReportFormat::Json => {
            let json = serde_json::to_vec_pretty(report)
                .map_err(|e| Error::Format(format!("cannot encode report: {e}")))?;
            std::fs::write(path, json).map_err(|e| Error::io(path, e))
        }
    }
}

/// Parse a JSON report back (the inverse of [`write_report`] with
/// [`ReportFormat::Json`]).
pub fn read_report_json(path: impl AsRef<std::path::Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: bad report: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_top20_of_distinct_values() {
        let mut rng = Rng::new(4);
        let mut vals: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        rng.shuffle(&mut vals);
        let map = Tensor::new(vec![10, 10], vals.clone()).unwrap();
        let mask = mask_from_map(&map, 80.0).unwrap();
        let fg: Vec<usize> = (0..100)
            .filter(|&i| mask.values.data()[i] == 1.0)
            .collect();
        assert_eq!(fg.len(), 20);
        // Sorting oracle: the 20 largest values.
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let threshold = sorted[80];
        assert!(fg.iter().all(|&i| vals[i] >= threshold));
        assert_eq!(mask.foreground_fraction, 0.2);
    }

    #[test]
    fn mask_constant_map_is_all_foreground() {
        let map = Tensor::filled(vec![4, 4], 0.7);
        let mask = mask_from_map(&map, 80.0).unwrap();
        assert!(mask.values.data().iter().all(|&v| v == 1.0));
        assert_eq!(mask.foreground_fraction, 1.0);
    }

    #[test]
    fn mask_ties_fill_in_scan_order() {
        let mut vals = vec![0.0; 25];
        vals[7] = 1.0;
        let map = Tensor::new(vec![5, 5], vals).unwrap();
        let mask = mask_from_map(&map, 80.0).unwrap();
        let fg: Vec<usize> = (0..25)
            .filter(|&i| mask.values.data()[i] == 1.0)
            .collect();
        // ceil(0.2 * 25) = 5 pixels: the single 1.0 first, then zeros in
        // scan order.
        assert_eq!(fg, vec![0, 1, 2, 3, 7]);
    }

    #[test]
    fn mask_idempotent_under_rethresholding() {
        let mut rng = Rng::new(12);
        let map = Tensor::new(vec![6, 6], (0..36).map(|_| rng.next_f64()).collect()).unwrap();
        let mask = mask_from_map(&map, 80.0).unwrap();
        let again = mask_from_map(&mask.values, 80.0).unwrap();
        assert_eq!(mask.values, again.values);
    }

    #[test]
    fn mask_rejects_bad_percentile() {
        let map = Tensor::filled(vec![2, 2], 0.5);
        assert!(mask_from_map(&map, 0.0).is_err());
        assert!(mask_from_map(&map, 100.0).is_err());
    }

    #[test]
    fn explanation_map_identity_zero_checkerboard() {
        let image = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let ones = BinaryMask {
            values: Tensor::filled(vec![2, 2], 1.0),
            foreground_fraction: 1.0,
        };
        assert_eq!(explanation_map(&image, &ones).unwrap(), image);

        let zeros = BinaryMask {
            values: Tensor::zeros(vec![2, 2]),
            foreground_fraction: 0.0,
        };
        assert!(explanation_map(&image, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let checker = BinaryMask {
            values: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            foreground_fraction: 0.5,
        };
        let expl = explanation_map(&image, &checker).unwrap();
        for i in 0..4 {
            let want = image.data()[i] * checker.values.data()[i];
            assert_eq!(expl.data()[i], want);
        }
    }

    #[test]
    fn explanation_map_rejects_extent_mismatch() {
        let image = Tensor::filled(vec![1, 2, 2], 0.5);
        let mask = BinaryMask {
            values: Tensor::zeros(vec![3, 3]),
            foreground_fraction: 0.0,
        };
        assert!(matches!(
            explanation_map(&image, &mask),
            Err(Error::Shape(_))
        ));
    }

    /// Hand-tabulated three-image fixture. The scorer and map source are
    /// lookup tables, so every prediction and confidence below was counted
    /// by hand before the assertions were written.
    #[test]
    fn evaluate_matches_hand_tabulated_counts() {
        // 2x2 single-channel images with distinct, recognizable values.
        let imgs = [
            Tensor::new(vec![1, 2, 2], vec![0.8, 0.1, 0.1, 0.1]).unwrap(),
            Tensor::new(vec![1, 2, 2], vec![0.1, 0.8, 0.1, 0.1]).unwrap(),
            Tensor::new(vec![1, 2, 2], vec![0.1, 0.1, 0.8, 0.1]).unwrap(),
        ];
        let data = LabeledDataset {
            images: imgs.to_vec(),
            labels: vec![0, 1, 0],
            class_labels: vec!["a".into(), "b".into()],
            ids: vec!["i0".into(), "i1".into(), "i2".into()],
        };

        // Maps: base keeps the bright pixel; E1-I1 keeps pixel 3 instead.
        let e1i1 = VariantId::new(
            crate::feature_cam::Experiment::Add,
            crate::perturb::InputVariant::FeatureOnly,
        );
        let map_for = move |image: &Tensor, variant: &EvalVariant| -> Result<Tensor> {
            let bright = image.data().iter().cloned().fold(f64::MIN, f64::max);
            let hot = image.data().iter().position(|&v| v == bright).unwrap();
            let target = match variant {
                EvalVariant::Base => hot,
                EvalVariant::Feature(_) => 3,
            };
            let mut m = Tensor::zeros(vec![2, 2]);
            m.data_mut()[target] = 1.0;
            Ok(m)
        };

        // Scorer: probability of class 0 driven by pixel 0's value.
        // Originals (pixel0 = 0.8 / 0.1 / 0.1): p0 = 0.9 / 0.3 / 0.3.
        // Percentile 75 on 4 pixels keeps ceil(1) = 1 pixel, so base
        // explanation maps keep exactly the bright pixel:
        //   i0: pixel0 kept   -> p0 = 0.9 -> pred 0
        //   i1: pixel1 kept   -> pixel0 = 0 -> p0 = 0.2 -> pred 1
        //   i2: pixel2 kept   -> pixel0 = 0 -> p0 = 0.2 -> pred 1
        // E1-I1 maps keep pixel 3 (value 0.1) -> pixel0 = 0 -> p0 = 0.2.
        let score = move |image: &Tensor| -> Result<Tensor> {
            let p0 = if image.data()[0] == 0.8 {
                0.9
            } else if image.data()[0] == 0.1 {
                0.3
            } else {
                0.2
            };
            Tensor::new(vec![2], vec![p0, 1.0 - p0])
        };

        let report = evaluate_with(
            &score,
            &map_for,
            &data,
            &[e1i1],
            75.0,
            ReferenceMode::ModelPrediction,
        )
        .unwrap();

        // Hand counts (reference = original prediction):
        //   originals: preds 0, 1, 1; confs 0.9, 0.7, 0.7.
        //   base: preds 0, 1, 1 -> right 3/3; confs 0.9, 0.8, 0.8.
        //   E1-I1: preds 1, 1, 1 -> right 2/3; confs 0.2, 0.8, 0.8.
        let base = report.aggregate("base").unwrap();
        assert_eq!(base.right_pct, 100.0);
        assert!((base.avg_conf_pct - 100.0 * (0.9 + 0.8 + 0.8) / 3.0).abs() < 1e-9);
        // Gains vs original: base confs 0.9 vs 0.9 (no), 0.8 vs 0.7 (yes),
        // 0.8 vs 0.7 (yes) -> 2/3.
        assert!((base.gain_vs_orig_pct - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(base.gain_vs_base_pct, 0.0);

        let feat = report.aggregate("E1-I1").unwrap();
        assert!((feat.right_pct - 200.0 / 3.0).abs() < 1e-9);
        assert!((feat.avg_conf_pct - 100.0 * (0.2 + 0.8 + 0.8) / 3.0).abs() < 1e-9);
        // Gains vs original: 0.2 vs 0.9 (no), 0.8 vs 0.7 (yes), 0.8 vs 0.7
        // (yes) -> 2/3. Gains vs base: 0.2 vs 0.9 (no), ties (no), ties (no).
        assert!((feat.gain_vs_orig_pct - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(feat.gain_vs_base_pct, 0.0);

        assert!((report.original_avg_conf_pct - 100.0 * (0.9 + 0.7 + 0.7) / 3.0).abs() < 1e-9);

        // Every explanation map classified like its original -> 100%.
        assert_eq!(base.right_pct, 100.0);
    }

    #[test]
    fn evaluate_order_independent_aggregates() {
        let imgs: Vec<Tensor> = (0..6)
            .map(|i| Tensor::filled(vec![1, 2, 2], 0.1 + 0.1 * i as f64))
            .collect();
        let data = LabeledDataset {
            images: imgs.clone(),
            labels: vec![0, 1, 0, 1, 0, 1],
            class_labels: vec!["a".into(), "b".into()],
            ids: (0..6).map(|i| i.to_string()).collect(),
        };
        let mut shuffled = data.clone();
        shuffled.images.reverse();
        shuffled.labels.reverse();
        shuffled.ids.reverse();

        let score = |image: &Tensor| -> Result<Tensor> {
            let p = image.data()[0].min(0.9);
            Tensor::new(vec![2], vec![p, 1.0 - p])
        };
        let map_for = |_: &Tensor, _: &EvalVariant| -> Result<Tensor> {
            Ok(Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.3]).unwrap())
        };
        let a = evaluate_with(&score, &map_for, &data, &[], 80.0, ReferenceMode::GroundTruth)
            .unwrap();
        let b = evaluate_with(
            &score,
            &map_for,
            &shuffled,
            &[],
            80.0,
            ReferenceMode::GroundTruth,
        )
        .unwrap();
        for (x, y) in a.aggregates.iter().zip(&b.aggregates) {
            assert_eq!(x.variant, y.variant);
            assert!((x.right_pct - y.right_pct).abs() < 1e-12);
            assert!((x.avg_conf_pct - y.avg_conf_pct).abs() < 1e-12);
        }
        assert!((a.original_avg_conf_pct - b.original_avg_conf_pct).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip_and_aggregate_check() {
        let records = vec![EvalRecord {
            image_id: "x".into(),
            true_label: 1,
            orig_pred: 1,
            orig_conf: 0.75,
            outcomes: vec![VariantOutcome {
                variant: "base".into(),
                pred: 1,
                conf: 0.5,
                right: true,
                gain_vs_orig: false,
                gain_vs_base: false,
            }],
        }];
        let report = EvalReport {
            percentile: 80.0,
            reference: ReferenceMode::ModelPrediction,
            original_avg_conf_pct: 75.0,
            aggregates: aggregate_records(&records),
            records,
        };
        let dir = tempfile::tempdir().unwrap();
        let jpath = dir.path().join("r.json");
        write_report(&report, &jpath, ReportFormat::Json).unwrap();
        let back = read_report_json(&jpath).unwrap();
        assert_eq!(back, report);

        // Tampered aggregates are refused.
        let mut bad = report.clone();
        bad.aggregates[0].right_pct = 3.0;
        assert!(write_report(&bad, dir.path().join("bad.csv"), ReportFormat::Csv).is_err());
    }

    #[test]
    fn csv_row_count_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let mk_outcome = |v: &str| VariantOutcome {
            variant: v.into(),
            pred: 0,
            conf: 0.5,
            right: true,
            gain_vs_orig: false,
            gain_vs_base: false,
        };
        let records: Vec<EvalRecord> = (0..3)
            .map(|i| EvalRecord {
                image_id: format!("img{i}"),
                true_label: 0,
                orig_pred: 0,
                orig_conf: 0.9,
                outcomes: vec![mk_outcome("base"), mk_outcome("E1-I2")],
            })
            .collect();
        let report = EvalReport {
            percentile: 80.0,
            reference: ReferenceMode::ModelPrediction,
            original_avg_conf_pct: 90.0,
            aggregates: aggregate_records(&records),
            records,
        };
        let p = dir.path().join("r.csv");
        write_report(&report, &p, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert!(text.lines().next().unwrap().starts_with("image_id,true_label"));

        // Empty record list -> header only.
        let empty = EvalReport {
            percentile: 80.0,
            reference: ReferenceMode::ModelPrediction,
            original_avg_conf_pct: 0.0,
            aggregates: vec![],
            records: vec![],
        };
        let p2 = dir.path().join("empty.csv");
        write_report(&empty, &p2, ReportFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&p2).unwrap().lines().count(), 1);
    }

    #[test]
    fn baseline_full_fraction_equals_originals() {
        let net = crate::nn::mnist_network(2);
        let mut rng = Rng::new(8);
        let images: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_f64()).collect()).unwrap()
            })
            .collect();
        let data = LabeledDataset {
            labels: vec![0, 1, 2],
            ids: (0..3).map(|i| i.to_string()).collect(),
            class_labels: (0..10).map(|i| i.to_string()).collect(),
            images,
        };
        let stats =
            random_mask_baseline(&net, &data, 1.0, 7, 2, ReferenceMode::ModelPrediction).unwrap();
        // Full foreground keeps the image intact: right-classification is
        // 100% against the model prediction.
        assert_eq!(stats.right_pct, 100.0);

        // Determinism.
        let again =
            random_mask_baseline(&net, &data, 1.0, 7, 2, ReferenceMode::ModelPrediction).unwrap();
        assert_eq!(stats, again);
        let other =
            random_mask_baseline(&net, &data, 0.3, 7, 2, ReferenceMode::ModelPrediction).unwrap();
        let other2 =
            random_mask_baseline(&net, &data, 0.3, 7, 2, ReferenceMode::ModelPrediction).unwrap();
        assert_eq!(other, other2);
    }
}
