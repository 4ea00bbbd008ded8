//! Implementations of the six subcommands.

use std::path::{Path, PathBuf};

use camkit::cam::{cam, finalize, SaliencyMap, SaliencyMethod, SmoothConfig};
use camkit::checkpoint::{load_checkpoint, save_checkpoint};
use camkit::dataset::{load_idx, load_image_dir, LabeledDataset};
use camkit::explain::{
    evaluate as run_evaluate, explanation_map, mask_from_map, random_mask_baseline, write_report,
    EvalOptions, EvalReport, ReferenceMode, ReportFormat,
};
use camkit::feature_cam::{
    all_variants, base_saliency, combine, top5, top5_with_descriptor, FeatureCamConfig,
    FeatureCamMap, Top5Options, VariantId, DEFAULT_TOP5,
};
use camkit::fmap::save_fmap;
use camkit::imageio::{
    colorize, load_png, luminance, overlay, resize_bilinear, save_png_gray, save_png_rgb,
    ColorStyle,
};
use camkit::nn::{
    bundled_network, dataset_accuracy, train as train_network, Network, Optimizer, TrainConfig,
};
use camkit::perturb::{
    edge_map, load_descriptor, make_perturbed_with, BlendOrder, CannyParams, EdgeMethod,
    FeatureDescriptor, InputVariant,
};
use camkit::{Error, Result, Tensor};

use crate::{Cli, ClassifyArgs, EvaluateArgs, ExplainArgs, FeatureCamArgs, SaliencyArgs, TrainArgs};

fn parse_method(s: &str) -> Result<SaliencyMethod> {
    match s {
        "cam" => Ok(SaliencyMethod::Cam),
        "gradcam" => Ok(SaliencyMethod::GradCam),
        "gradcampp" => Ok(SaliencyMethod::GradCamPp),
        "smoothgradcampp" => Ok(SaliencyMethod::SmoothGradCamPp),
        other => Err(Error::Config(format!(
            "unknown method '{other}' (expected cam, gradcam, gradcampp or smoothgradcampp)"
        ))),
    }
}

fn parse_base_method(s: &str) -> Result<SaliencyMethod> {
    let m = parse_method(s)?;
    if m == SaliencyMethod::Cam {
        return Err(Error::Config(
            "the base method must be gradcam, gradcampp or smoothgradcampp".into(),
        ));
    }
    Ok(m)
}

fn parse_edge(s: &str) -> Result<EdgeMethod> {
    match s {
        "sobel" => Ok(EdgeMethod::Sobel),
        "canny" => Ok(EdgeMethod::Canny(CannyParams::default())),
        other => Err(Error::Config(format!(
            "unknown edge method '{other}' (expected sobel or canny)"
        ))),
    }
}

fn parse_class(s: &str, class_count: usize) -> Result<Option<usize>> {
    if s == "auto" {
        return Ok(None);
    }
    let idx: usize = s
        .parse()
        .map_err(|_| Error::Config(format!("--class must be 'auto' or an index, got '{s}'")))?;
    if idx >= class_count {
        return Err(Error::Config(format!(
            "class index {idx} out of range for {class_count} classes"
        )));
    }
    Ok(Some(idx))
}

fn check_percentile(p: f64) -> Result<()> {
    if !(0.0 < p && p < 100.0) {
        return Err(Error::Config(format!(
            "--percentile must lie in (0, 100), got {p}"
        )));
    }
    Ok(())
}

fn check_k(k: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&k) {
        return Err(Error::Config(format!("--k must lie in [0, 0.5], got {k}")));
    }
    Ok(())
}

/// Load an image and adapt it to the model input: channel conversion
/// (luminance or replication) always, bilinear resize only with --resize.
fn load_input_image(path: &str, net: &Network, resize: bool) -> Result<Tensor> {
    let img = load_png(path)?;
    let [c, h, w] = net.input_shape();
    let img = match (img.shape()[0], c) {
        (a, b) if a == b => img,
        (3, 1) => {
            let l = luminance(&img)?;
            let (lh, lw) = (l.shape()[0], l.shape()[1]);
            l.reshape(vec![1, lh, lw])?
        }
        (1, 3) => {
            let mut data = Vec::with_capacity(3 * img.len());
            for _ in 0..3 {
                data.extend_from_slice(img.data());
            }
            Tensor::new(vec![3, img.shape()[1], img.shape()[2]], data)?
        }
        (a, b) => {
            return Err(Error::Shape(format!(
                "image has {a} channels, model expects {b}"
            )))
        }
    };
    if img.shape()[1] == h && img.shape()[2] == w {
        Ok(img)
    } else if resize {
        Ok(resize_bilinear(&img, h, w))
    } else {
        Err(Error::Shape(format!(
            "image extents {:?} do not match model input ({h}, {w}); pass --resize",
            &img.shape()[1..]
        )))
    }
}

/// Accept an images-idx3 file, a directory containing IDX files, or a
/// directory of class subdirectories of PNGs. `split` selects between
/// train/test IDX pairs when a directory holds both.
fn load_dataset(path: &str, split: &str) -> Result<LabeledDataset> {
    let p = Path::new(path);
    if p.is_file() {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        if !name.contains("images-idx3") {
            return Err(Error::Config(format!(
                "dataset file {name} does not look like an images-idx3 file"
            )));
        }
        let labels = name.replace("images-idx3", "labels-idx1");
        return load_idx(p, p.with_file_name(labels));
    }
    if !p.is_dir() {
        return Err(Error::Io {
            path: path.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        });
    }
    // Look for IDX pairs first.
    let mut candidates: Vec<PathBuf> = std::fs::read_dir(p)
        .map_err(|e| Error::io(p, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|f| {
            f.file_name()
                .map(|n| n.to_string_lossy().contains("images-idx3"))
                .unwrap_or(false)
        })
        .collect();
    candidates.sort();
    if !candidates.is_empty() {
        let chosen = candidates
            .iter()
            .find(|f| f.file_name().unwrap().to_string_lossy().contains(split))
            .or_else(|| {
                // "test" datasets are often named t10k.
                (split == "test")
                    .then(|| {
                        candidates
                            .iter()
                            .find(|f| f.file_name().unwrap().to_string_lossy().contains("t10k"))
                    })
                    .flatten()
            })
            .or_else(|| (candidates.len() == 1).then(|| &candidates[0]))
            .ok_or_else(|| {
                Error::Config(format!(
                    "{path} holds several IDX files and none matches split '{split}'"
                ))
            })?;
        let name = chosen.file_name().unwrap().to_string_lossy().to_string();
        let labels = name.replace("images-idx3", "labels-idx1");
        return load_idx(chosen, chosen.with_file_name(labels));
    }
    load_image_dir(p)
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "image".into())
}

fn smooth_config(n: usize, sigma: f64, seed: u64) -> SmoothConfig {
    SmoothConfig { n, sigma, seed }
}

pub fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    if args.momentum < 0.0 || args.momentum >= 1.0 {
        return Err(Error::Config(format!(
            "--momentum must lie in [0, 1), got {}",
            args.momentum
        )));
    }
    let mut data = load_dataset(&args.dataset, "train")?;
    if let Some(limit) = args.limit {
        data = data.truncated(limit);
    }
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let shape = data.images[0].shape().to_vec();
    let input_shape = [shape[0], shape[1], shape[2]];
    let mut net = bundled_network(input_shape, data.class_labels.clone(), cli.seed)?;

    if cli.verbose {
        println!(
            "training on {} images ({} classes, input {:?})",
            data.len(),
            net.class_count(),
            input_shape
        );
    }
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        seed: cli.seed,
        optimizer: if args.momentum > 0.0 {
            Optimizer::SgdMomentum {
                momentum: args.momentum,
            }
        } else {
            Optimizer::Sgd
        },
    };
    let history = train_network(&mut net, &data, &cfg)?;
    for e in &history {
        println!(
            "epoch {:>3}  loss {:.4}  accuracy {:.2}%",
            e.epoch,
            e.loss,
            100.0 * e.accuracy
        );
    }
    save_checkpoint(&net, &args.out)?;
    println!("saved checkpoint to {}", args.out);

    if let Some(test) = &args.test_dataset {
        let test_data = load_dataset(test, "test")?;
        let acc = dataset_accuracy(&net, &test_data)?;
        println!("test accuracy: {:.2}% ({} images)", 100.0 * acc, test_data.len());
    }
    Ok(())
}

pub fn classify(_cli: &Cli, args: &ClassifyArgs) -> Result<()> {
    let net = load_checkpoint(&args.model)?;
    let image = load_input_image(&args.image, &net, args.resize)?;
    let trace = net.forward(&image)?;
    let probs = trace.probabilities();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs.data()[b].total_cmp(&probs.data()[a]).then(a.cmp(&b)));
    for &idx in order.iter().take(args.topk.max(1)) {
        println!(
            "{} ({idx}): {:.2}%",
            net.class_labels()[idx],
            100.0 * probs.data()[idx]
        );
    }
    Ok(())
}

fn compute_saliency(
    net: &Network,
    image: &Tensor,
    method: SaliencyMethod,
    layer: Option<&str>,
    class_index: Option<usize>,
    smooth: &SmoothConfig,
) -> Result<SaliencyMap> {
    // base_saliency covers the gradient methods; vanilla CAM is kept
    // separate because of its architectural restriction.
    if method == SaliencyMethod::Cam {
        let trace = net.forward(image)?;
        let class_index = class_index.unwrap_or_else(|| trace.prediction().0);
        let raw = cam(net, &trace, class_index)?.relu();
        let [_, h, w] = net.input_shape();
        return Ok(finalize(&raw, h, w));
    }
    base_saliency(net, image, method, layer, class_index, smooth)
}

fn export_saliency(
    map: &SaliencyMap,
    image: &Tensor,
    out_dir: &str,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tag = format!(
        "{stem}_{}_c{}_{}",
        map.method.as_str(),
        map.class_index,
        map.layer
    );
    let base = Path::new(out_dir).join(&tag);
    let fmap_path = base.with_extension("fmap");
    let png_path = base.with_extension("png");
    let overlay_path = Path::new(out_dir).join(format!("{tag}_overlay.png"));
    save_fmap(&fmap_path, &map.values)?;
    save_png_gray(&png_path, &map.values)?;
    let heat = colorize(&map.values, ColorStyle::Jet)?;
    save_png_rgb(&overlay_path, &overlay(image, &heat, 0.5)?)?;
    Ok(vec![fmap_path, png_path, overlay_path])
}

pub fn saliency(cli: &Cli, args: &SaliencyArgs) -> Result<()> {
    let method = parse_method(&args.method)?;
    let net = load_checkpoint(&args.model)?;
    let class_index = parse_class(&args.class, net.class_count())?;
    let image = load_input_image(&args.image, &net, args.resize)?;
    let map = compute_saliency(
        &net,
        &image,
        method,
        args.layer.as_deref(),
        class_index,
        &smooth_config(args.smooth_n, args.smooth_sigma, cli.seed),
    )?;
    for p in export_saliency(&map, &image, &args.out_dir, &stem(&args.image))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn feature_descriptor(
    image: &Tensor,
    edge_method: &str,
    descriptor_file: Option<&str>,
) -> Result<FeatureDescriptor> {
    match descriptor_file {
        Some(path) => load_descriptor(path, image.shape()[1], image.shape()[2]),
        None => edge_map(image, parse_edge(edge_method)?),
    }
}

fn export_feature_map(
    map: &FeatureCamMap,
    out_dir: &str,
    stem: &str,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tag = format!(
        "{stem}_{}_{}_c{}_{}",
        map.base_method.as_str(),
        map.variant,
        map.class_index,
        map.layer
    );
    let path = Path::new(out_dir).join(format!("{tag}.png"));
    if map.values.shape()[0] == 1 {
        save_png_gray(&path, &map.values.channel(0))?;
        save_fmap(Path::new(out_dir).join(format!("{tag}.fmap")), &map.values.channel(0))?;
    } else {
        save_png_rgb(&path, &map.values)?;
    }
    Ok(path)
}

pub fn feature_cam(cli: &Cli, args: &FeatureCamArgs) -> Result<()> {
    check_k(args.k)?;
    let base = parse_base_method(&args.base)?;
    if !args.top5 && (args.experiment.is_none() || args.input_variant.is_none()) {
        return Err(Error::Config(
            "provide --experiment and --input-variant, or pass --top5".into(),
        ));
    }
    let net = load_checkpoint(&args.model)?;
    let class_index = parse_class(&args.class, net.class_count())?;
    let image = load_input_image(&args.image, &net, args.resize)?;
    let opts = Top5Options {
        k: args.k,
        edge: parse_edge(&args.edge_method)?,
        blend_order: if args.invert_blend {
            BlendOrder::DescriptorHeavy
        } else {
            BlendOrder::ImageHeavy
        },
        layer: args.layer.clone(),
        class_index,
        smooth: smooth_config(args.smooth_n, args.smooth_sigma, cli.seed),
        variant_order: None,
    };
    let s = stem(&args.image);

    let maps = if args.top5 {
        match &args.descriptor_file {
            Some(path) => {
                let fdesc = load_descriptor(path, image.shape()[1], image.shape()[2])?;
                top5_with_descriptor(&net, &image, base, &opts, &fdesc)?
            }
            None => top5(&net, &image, base, &opts)?,
        }
    } else {
        let experiment =
            camkit::feature_cam::Experiment::from_index(args.experiment.unwrap())?;
        let input_variant = InputVariant::from_index(args.input_variant.unwrap())?;
        let saliency = base_saliency(
            &net,
            &image,
            base,
            opts.layer.as_deref(),
            class_index,
            &opts.smooth,
        )?;
        let fdesc = feature_descriptor(&image, &args.edge_method, args.descriptor_file.as_deref())?;
        let perturbed = make_perturbed_with(&image, &fdesc, input_variant, opts.blend_order)?;
        vec![combine(
            &perturbed,
            &saliency,
            &FeatureCamConfig {
                k: args.k,
                experiment,
                input_variant,
                base_method: base,
            },
        )?]
    };
    for map in &maps {
        let p = export_feature_map(map, &args.out_dir, &s)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn explain(cli: &Cli, args: &ExplainArgs) -> Result<()> {
    check_percentile(args.percentile)?;
    check_k(args.k)?;
    let net = load_checkpoint(&args.model)?;
    let class_index = parse_class(&args.class, net.class_count())?;
    let image = load_input_image(&args.image, &net, args.resize)?;
    let smooth = smooth_config(args.smooth_n, args.smooth_sigma, cli.seed);

    let (map_values, tag): (Tensor, String) = match (args.experiment, args.input_variant) {
        (None, None) => {
            let method = parse_method(&args.method)?;
            let map = compute_saliency(&net, &image, method, args.layer.as_deref(), class_index, &smooth)?;
            (map.values, method.as_str().to_string())
        }
        (Some(e), Some(i)) => {
            let base = parse_base_method(&args.method)?;
            let experiment = camkit::feature_cam::Experiment::from_index(e)?;
            let input_variant = InputVariant::from_index(i)?;
            let saliency = base_saliency(&net, &image, base, args.layer.as_deref(), class_index, &smooth)?;
            let fdesc =
                feature_descriptor(&image, &args.edge_method, args.descriptor_file.as_deref())?;
            let perturbed =
                make_perturbed_with(&image, &fdesc, input_variant, BlendOrder::ImageHeavy)?;
            let map = combine(
                &perturbed,
                &saliency,
                &FeatureCamConfig {
                    k: args.k,
                    experiment,
                    input_variant,
                    base_method: base,
                },
            )?;
            (map.values, format!("{}_{}", base.as_str(), map.variant))
        }
        _ => {
            return Err(Error::Config(
                "provide both --experiment and --input-variant, or neither".into(),
            ))
        }
    };

    let mask = mask_from_map(&map_values, args.percentile)?;
    let expl = explanation_map(&image, &mask)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let s = stem(&args.image);
    let p = args.percentile;
    let mask_path = Path::new(&args.out_dir).join(format!("{s}_{tag}_p{p}_mask.png"));
    let expl_path = Path::new(&args.out_dir).join(format!("{s}_{tag}_p{p}_explanation.png"));
    save_png_gray(&mask_path, &mask.values)?;
    if expl.shape()[0] == 1 {
        save_png_gray(&expl_path, &expl.channel(0))?;
    } else {
        save_png_rgb(&expl_path, &expl)?;
    }
    println!("wrote {}", mask_path.display());
    println!("wrote {}", expl_path.display());

    let trace = net.forward(&expl)?;
    let (pred, conf) = trace.prediction();
    println!(
        "explanation map classified as {} ({pred}) with confidence {:.2}%",
        net.class_labels()[pred],
        100.0 * conf
    );
    Ok(())
}

fn parse_variants(s: &str) -> Result<Vec<VariantId>> {
    match s {
        "top5" => Ok(DEFAULT_TOP5.to_vec()),
        "all" => Ok(all_variants()),
        "base" => Ok(vec![]),
        list => list.split(',').map(|v| v.trim().parse()).collect(),
    }
}

pub fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    check_percentile(args.percentile)?;
    check_k(args.k)?;
    let variants = parse_variants(&args.variants)?;
    let base_method = parse_base_method(&args.base)?;
    let edge = parse_edge(&args.edge_method)?;

    let net = load_checkpoint(&args.model)?;
    let mut data = load_dataset(&args.dataset, "test")?;
    if let Some(limit) = args.limit {
        data = data.truncated(limit);
    }
    let [_, h, w] = net.input_shape();
    data = data.resized(h, w);

    let opts = EvalOptions {
        percentile: args.percentile,
        reference: if args.ground_truth {
            ReferenceMode::GroundTruth
        } else {
            ReferenceMode::ModelPrediction
        },
        variants,
        base_method,
        k: args.k,
        edge,
        blend_order: BlendOrder::ImageHeavy,
        layer: args.layer.clone(),
        smooth: smooth_config(args.smooth_n, args.smooth_sigma, cli.seed),
    };
    if cli.verbose {
        println!("evaluating {} images", data.len());
    }
    let report = run_evaluate(&net, &data, &opts)?;
    print_report(&report);

    if args.baseline_trials > 0 {
        let n = (h * w) as f64;
        let count = (((100.0 - args.percentile) * n) / 100.0).ceil();
        let fraction = count / n;
        let baseline = random_mask_baseline(
            &net,
            &data,
            fraction,
            cli.seed,
            args.baseline_trials,
            opts.reference,
        )?;
        println!(
            "random-mask baseline (fraction {:.3}, {} trials): right {:.2}%  conf {:.2}%",
            baseline.foreground_fraction, baseline.trials, baseline.right_pct, baseline.avg_conf_pct
        );
    }

    if let Some(path) = &args.report {
        write_report(&report, path, ReportFormat::Csv)?;
        println!("wrote {path}");
    }
    if let Some(path) = &args.json {
        write_report(&report, path, ReportFormat::Json)?;
        println!("wrote {path}");
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "original images: avg confidence {:.2}% over {} images",
        report.original_avg_conf_pct,
        report.records.len()
    );
    println!(
        "{:<8} {:>8} {:>8} {:>14} {:>14}",
        "variant", "right%", "conf%", "gain-vs-orig%", "gain-vs-base%"
    );
    for a in &report.aggregates {
        println!(
            "{:<8} {:>8.2} {:>8.2} {:>14.2} {:>14.2}",
            a.variant, a.right_pct, a.avg_conf_pct, a.gain_vs_orig_pct, a.gain_vs_base_pct
        );
    }
}
