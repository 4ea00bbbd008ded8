//! Mini-batch SGD training.

use rayon::prelude::*;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::layer::LayerParams;
use super::network::{to_f32_grid, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// SGD with classical momentum `v = mu*v + g`, `p -= lr*v`.
    SgdMomentum {
        momentum: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 42,
            optimizer: Optimizer::SgdMomentum { momentum: 0.9 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Train in place; returns per-epoch mean loss and training accuracy.
///
/// Deterministic for a fixed seed: the shuffle order is driven by the config
/// seed and per-image gradients are reduced in batch order regardless of how
/// many worker threads computed them.
pub fn train(
    net: &mut Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if data.images.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::Config("learning rate must be non-negative".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= net.class_count()) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            net.class_count()
        )));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut velocity = zero_like(net.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let n = data.images.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);

        let epoch_body = |net: &mut Network, velocity: &mut Vec<LayerParams>| -> Result<(f64, usize)> {
            let mut epoch_loss = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                // Per-image work fans out across threads; the reduction below
                // is sequential in batch order, so results do not depend on
                // thread count.
                let results: Result<Vec<_>> = batch
                    .par_iter()
                    .map(|&i| image_gradients(net, &data.images[i], data.labels[i]))
                    .collect();
                let results = results?;

                let mut grads = zero_like(net.params());
                let scale = 1.0 / batch.len() as f64;
                for (loss, right, g) in results {
                    epoch_loss += loss;
                    correct += right as usize;
                    accumulate(&mut grads, &g, scale);
                }
                step(net, velocity, &grads, cfg)?;
            }
            let loss = epoch_loss / n as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric("loss became non-finite".into()));
            }
            Ok((loss, correct))
        };

        let (loss, correct) = epoch_body(net, &mut velocity).map_err(|e| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("training diverged in epoch {epoch}: {msg}"))
            }
            other => other,
        })?;
        history.push(EpochStats {
            epoch,
            loss,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok(history)
}

/// Classification accuracy over a dataset.
pub fn dataset_accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.images.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let right: Result<Vec<bool>> = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(img, &label)| Ok(net.forward(img)?.prediction().0 == label))
        .collect();
    let right = right?;
    Ok(right.iter().filter(|&&r| r).count() as f64 / right.len() as f64)
}

fn image_gradients(
    net: &Network,
    image: &Tensor,
    label: usize,
) -> Result<(f64, bool, Vec<LayerParams>)> {
    let trace = net.forward(image)?;
    let probs = trace.probabilities();
    let loss = -probs.data()[label].max(1e-300).ln();
    let right = trace.prediction().0 == label;

    // Cross-entropy over softmax: dL/dlogit = p - onehot.
    let mut grad_logits = probs.clone();
    grad_logits.data_mut()[label] -= 1.0;
    let grads = net.backprop_params(&trace, &grad_logits)?;
    Ok((loss, right, grads))
}

fn zero_like(params: &[LayerParams]) -> Vec<LayerParams> {
    params
        .iter()
        .map(|p| match p {
            LayerParams::Conv { kernels, bias } => LayerParams::Conv {
                kernels: Tensor::zeros(kernels.shape().to_vec()),
                bias: Tensor::zeros(bias.shape().to_vec()),
            },
            LayerParams::Dense { weights, bias } => LayerParams::Dense {
                weights: Tensor::zeros(weights.shape().to_vec()),
                bias: Tensor::zeros(bias.shape().to_vec()),
            },
            LayerParams::None => LayerParams::None,
        })
        .collect()
}

fn accumulate(acc: &mut [LayerParams], grads: &[LayerParams], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a, g) {
            (
                LayerParams::Conv {
                    kernels: ak,
                    bias: ab,
                },
                LayerParams::Conv {
                    kernels: gk,
                    bias: gb,
                },
            ) => {
                add_scaled(ak, gk, scale);
                add_scaled(ab, gb, scale);
            }
            (
                LayerParams::Dense {
                    weights: aw,
                    bias: ab,
                },
                LayerParams::Dense {
                    weights: gw,
                    bias: gb,
                },
            ) => {
                add_scaled(aw, gw, scale);
                add_scaled(ab, gb, scale);
            }
            (LayerParams::None, LayerParams::None) => {}
            _ => unreachable!("gradient layout matches parameter layout"),
        }
    }
}

fn add_scaled(acc: &mut Tensor, delta: &Tensor, scale: f64) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d * scale;
    }
}

fn step(
    net: &mut Network,
    velocity: &mut [LayerParams],
    grads: &[LayerParams],
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = cfg.learning_rate;
    let mu = match cfg.optimizer {
        Optimizer::Sgd => 0.0,
        Optimizer::SgdMomentum { momentum } => momentum,
    };
    for ((p, v), g) in net.params_mut().iter_mut().zip(velocity).zip(grads) {
        match (p, v, g) {
            (
                LayerParams::Conv {
                    kernels: pk,
                    bias: pb,
                },
                LayerParams::Conv {
                    kernels: vk,
                    bias: vb,
                },
                LayerParams::Conv {
                    kernels: gk,
                    bias: gb,
                },
            ) => {
                update_tensor(pk, vk, gk, lr, mu)?;
                update_tensor(pb, vb, gb, lr, mu)?;
            }
            (
                LayerParams::Dense {
                    weights: pw,
                    bias: pb,
                },
                LayerParams::Dense {
                    weights: vw,
                    bias: vb,
                },
                LayerParams::Dense {
                    weights: gw,
                    bias: gb,
                },
            ) => {
                update_tensor(pw, vw, gw, lr, mu)?;
                update_tensor(pb, vb, gb, lr, mu)?;
            }
            (LayerParams::None, LayerParams::None, LayerParams::None) => {}
            _ => unreachable!("gradient layout matches parameter layout"),
        }
    }
    Ok(())
}

fn update_tensor(
    param: &mut Tensor,
    velocity: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    mu: f64,
) -> Result<()> {
    for ((p, v), g) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut())
        .zip(grad.data())
    {
        *v = mu * *v + g;
        *p = to_f32_grid(*p - lr * *v);
        if !p.is_finite() {
            return Err(Error::Numeric("parameter became non-finite".into()));
        }
    }
    Ok(())
}
