use camkit::cam::SaliencyMethod;
use camkit::explain::{evaluate, mask_from_map, EvalOptions, ReferenceMode};
use camkit::feature_cam::DEFAULT_TOP5;
use camkit::perturb::EdgeMethod;

fn ascii(t: &camkit::Tensor, title: &str) {
    println!("--- {title}");
    let (h, w) = (t.shape()[0], t.shape()[1]);
    for y in 0..h {
        let row: String = (0..w)
            .map(|x| {
                let v = t.at2(y, x);
                if v > 0.75 { '#' } else if v > 0.5 { '+' } else if v > 0.25 { '.' } else if v > 0.0 { ',' } else { ' ' }
            })
            .collect();
        println!("|{row}|");
    }
}

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let net = camkit::checkpoint::load_checkpoint("/tmp/tuned.cnn1").unwrap();
    let test_data = camkit::dataset::load_idx(
        dir.join("test-images-idx3-ubyte.gz"),
        dir.join("test-labels-idx1-ubyte.gz"),
    ).unwrap();

    // Visualize image 0: saliency at relu1, its mask, and the E1-I2 map/mask.
    let img = &test_data.images[0];
    ascii(&img.channel(0), "digit");
    for layer in ["conv1", "relu1"] {
        let s = camkit::feature_cam::base_saliency(&net, img, SaliencyMethod::GradCam, Some(layer), None, &Default::default()).unwrap();
        ascii(&s.values, &format!("gradcam {layer}"));
        let mask = mask_from_map(&s.values, 80.0).unwrap();
        ascii(&mask.values, &format!("mask {layer}"));
    }
    let fdesc = camkit::perturb::edge_map(img, EdgeMethod::Sobel).unwrap();
    let s = camkit::feature_cam::base_saliency(&net, img, SaliencyMethod::GradCam, Some("relu1"), None, &Default::default()).unwrap();
    let p = camkit::perturb::make_perturbed(img, &fdesc, camkit::perturb::InputVariant::BlendTwoToOne).unwrap();
    let m = camkit::feature_cam::combine(&p, &s, &camkit::feature_cam::FeatureCamConfig {
        k: 0.25, experiment: camkit::feature_cam::Experiment::Add,
        input_variant: camkit::perturb::InputVariant::BlendTwoToOne, base_method: SaliencyMethod::GradCam,
    }).unwrap();
    let mask = mask_from_map(&m.values, 80.0).unwrap();
    ascii(&mask.values, "mask E1-I2 relu1");

    // conv1 + conv2 sobel eval (the rows missing from the sweep).
    let eval_data = test_data.truncated(200);
    for layer in ["conv1", "conv2"] {
        let opts = EvalOptions {
            percentile: 80.0,
            reference: ReferenceMode::ModelPrediction,
            variants: DEFAULT_TOP5.to_vec(),
            base_method: SaliencyMethod::GradCam,
            k: 0.25,
            edge: EdgeMethod::Sobel,
            layer: Some(layer.to_string()),
            ..EvalOptions::default()
        };
        let report = evaluate(&net, &eval_data, &opts).unwrap();
        println!("== layer {layer} sobel");
        for a in &report.aggregates {
            println!("  {:<6} right {:>6.2}%  conf {:>6.2}%", a.variant, a.right_pct, a.avg_conf_pct);
        }
    }
}
