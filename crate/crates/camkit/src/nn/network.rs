//! Network assembly, inference, and reverse-mode gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::layer::{
    conv2d_backward_input, conv2d_backward_params, conv2d_forward, dense_backward_input,
    dense_backward_params, dense_forward, gap_backward, gap_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax, LayerKind, LayerParams, LayerSpec,
};

/// Snap a value to the nearest `f32`.
///
/// Parameters are kept on the `f32` grid at all times: arithmetic runs in
/// `f64`, but every value written into a parameter tensor passes through
/// `f32`. Checkpoints store `f32` blobs, so this keeps save/load bit-exact.
pub(crate) fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// A feed-forward convolutional classifier.
///
/// Immutable during inference and safe to share across threads; training
/// mutates parameters and needs exclusive access.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    class_labels: Vec<String>,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    /// Cached output shape of every layer, validated at construction.
    shapes: Vec<Vec<usize>>,
}

/// One forward pass with every layer's activation cached.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    activations: Vec<Tensor>,
    logits: Tensor,
    probabilities: Tensor,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Pre-softmax class scores.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probabilities(&self) -> &Tensor {
        &self.probabilities
    }

    /// Predicted class index and its softmax probability.
    pub fn prediction(&self) -> (usize, f64) {
        let idx = self.probabilities.argmax();
        (idx, self.probabilities.data()[idx])
    }

    pub(crate) fn activations(&self) -> &[Tensor] {
        &self.activations
    }
}

impl Network {
    /// Assemble a network and initialize parameters from `seed`.
    ///
    /// Weights are uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero,
    /// all snapped to the `f32` grid.
    pub fn new(
        input_shape: [usize; 3],
        class_labels: Vec<String>,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::with_zero_params(input_shape, class_labels, layers)?;
        net.initialize(seed);
        Ok(net)
    }

    /// Assemble a network with all parameters zero (checkpoint loading and
    /// tests fill them in afterwards).
    pub fn with_zero_params(
        input_shape: [usize; 3],
        class_labels: Vec<String>,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if class_labels.is_empty() {
            return Err(Error::Architecture("network needs at least one class".into()));
        }
        if layers.is_empty() {
            return Err(Error::Architecture("network needs at least one layer".into()));
        }
        for (i, a) in layers.iter().enumerate() {
            for b in &layers[i + 1..] {
                if a.name == b.name {
                    return Err(Error::Architecture(format!(
                        "duplicate layer name '{}'",
                        a.name
                    )));
                }
            }
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur: Vec<usize> = input_shape.to_vec();
        for (i, spec) in layers.iter().enumerate() {
            if matches!(spec.kind, LayerKind::Softmax) && i != layers.len() - 1 {
                return Err(Error::Architecture(
                    "softmax may only appear as the final layer".into(),
                ));
            }
            cur = spec
                .kind
                .output_shape(&cur)
                .map_err(|e| Error::Architecture(format!("layer '{}': {e}", spec.name)))?;
            shapes.push(cur.clone());
        }
        // The classifier output (pre- or post-softmax) must be one score per class.
        let logits_shape = if matches!(layers.last().unwrap().kind, LayerKind::Softmax) {
            &shapes[shapes.len() - 2]
        } else {
            &shapes[shapes.len() - 1]
        };
        if *logits_shape != [class_labels.len()] {
            return Err(Error::Architecture(format!(
                "final layer produces shape {logits_shape:?}, expected [{}] for {} classes",
                class_labels.len(),
                class_labels.len()
            )));
        }

        let mut params = Vec::with_capacity(layers.len());
        let mut in_shape: Vec<usize> = input_shape.to_vec();
        for (spec, out_shape) in layers.iter().zip(&shapes) {
            params.push(match spec.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => LayerParams::Conv {
                    kernels: Tensor::zeros(vec![out_channels, in_shape[0], kernel[0], kernel[1]]),
                    bias: Tensor::zeros(vec![out_channels]),
                },
                LayerKind::Dense { units } => LayerParams::Dense {
                    weights: Tensor::zeros(vec![units, in_shape.iter().product()]),
                    bias: Tensor::zeros(vec![units]),
                },
                _ => LayerParams::None,
            });
            in_shape = out_shape.clone();
        }

        Ok(Network {
            input_shape,
            class_labels,
            layers,
            params,
            shapes,
        })
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = Rng::new(seed);
        for (spec, params) in self.layers.iter().zip(&mut self.params) {
            match params {
                LayerParams::Conv { kernels, bias } => {
                    let s = kernels.shape();
                    let (oc, ic, kh, kw) = (s[0], s[1], s[2], s[3]);
                    let fan_in = (ic * kh * kw) as f64;
                    let fan_out = (oc * kh * kw) as f64;
                    let limit = (6.0 / (fan_in + fan_out)).sqrt();
                    for v in kernels.data_mut() {
                        *v = to_f32_grid(rng.uniform(-limit, limit));
                    }
                    for v in bias.data_mut() {
                        *v = 0.0;
                    }
                }
                LayerParams::Dense { weights, bias } => {
                    let (units, fan_in) = (weights.shape()[0], weights.shape()[1]);
                    let limit = (6.0 / (fan_in as f64 + units as f64)).sqrt();
                    for v in weights.data_mut() {
                        *v = to_f32_grid(rng.uniform(-limit, limit));
                    }
                    for v in bias.data_mut() {
                        *v = 0.0;
                    }
                }
                LayerParams::None => {
                    let _ = spec;
                }
            }
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn class_count(&self) -> usize {
        self.class_labels.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Lookup(format!("no layer named '{name}'")))
    }

    /// Output shape of the named layer.
    pub fn layer_output_shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.shapes[self.layer_index(name)?])
    }

    /// The cached activation of the named layer in a trace of this network.
    pub fn activation<'t>(&self, trace: &'t ForwardTrace, name: &str) -> Result<&'t Tensor> {
        let idx = self.layer_index(name)?;
        self.check_trace(trace)?;
        Ok(&trace.activations[idx])
    }

    /// Name of the last convolutional layer (the default saliency target).
    pub fn last_conv_layer(&self) -> Result<&str> {
        self.layers
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
            .map(|l| l.name.as_str())
            .ok_or_else(|| Error::Architecture("network has no convolutional layer".into()))
    }

    /// Replace the kernels and bias of a conv layer. Values are snapped to
    /// the `f32` grid like every other parameter write.
    pub fn set_conv_params(&mut self, name: &str, kernels: Tensor, bias: Tensor) -> Result<()> {
        let idx = self.layer_index(name)?;
        match &mut self.params[idx] {
            LayerParams::Conv {
                kernels: k,
                bias: b,
            } => {
                if k.shape() != kernels.shape() || b.shape() != bias.shape() {
                    return Err(Error::Shape(format!(
                        "expected kernels {:?} and bias {:?}",
                        k.shape(),
                        b.shape()
                    )));
                }
                *k = kernels.map(to_f32_grid);
                *b = bias.map(to_f32_grid);
                Ok(())
            }
            _ => Err(Error::Lookup(format!("layer '{name}' is not conv2d"))),
        }
    }

    /// Replace the weights and bias of a dense layer (snapped to `f32`).
    pub fn set_dense_params(&mut self, name: &str, weights: Tensor, bias: Tensor) -> Result<()> {
        let idx = self.layer_index(name)?;
        match &mut self.params[idx] {
            LayerParams::Dense {
                weights: w,
                bias: b,
            } => {
                if w.shape() != weights.shape() || b.shape() != bias.shape() {
                    return Err(Error::Shape(format!(
                        "expected weights {:?} and bias {:?}",
                        w.shape(),
                        b.shape()
                    )));
                }
                *w = weights.map(to_f32_grid);
                *b = bias.map(to_f32_grid);
                Ok(())
            }
            _ => Err(Error::Lookup(format!("layer '{name}' is not dense"))),
        }
    }

    fn layer_forward(&self, idx: usize, input: &Tensor) -> Result<Tensor> {
        let spec = &self.layers[idx];
        Ok(match &spec.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let LayerParams::Conv { kernels, bias } = &self.params[idx] else {
                    unreachable!("conv layer carries conv params");
                };
                conv2d_forward(
                    input,
                    kernels,
                    Some(bias),
                    (stride[0], stride[1]),
                    (padding[0], padding[1]),
                )?
            }
            LayerKind::Relu => relu_forward(input),
            LayerKind::MaxPool { window, stride } => maxpool_forward(input, *window, *stride),
            LayerKind::GlobalAvgPool => gap_forward(input),
            LayerKind::Dense { .. } => {
                let LayerParams::Dense { weights, bias } = &self.params[idx] else {
                    unreachable!("dense layer carries dense params");
                };
                let flat = input.clone().reshape(vec![input.len()])?;
                dense_forward(&flat, weights, bias)
            }
            LayerKind::Softmax => softmax(input),
        })
    }

    /// Run the classifier, caching every layer's activation.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        if image.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match network input {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        if !image.is_finite() {
            return Err(Error::Data("non-finite value in input image".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut cur = image.clone();
        for idx in 0..self.layers.len() {
            cur = self.layer_forward(idx, &cur)?;
            if !cur.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activation in layer '{}'",
                    self.layers[idx].name
                )));
            }
            activations.push(cur.clone());
        }
        let logits = if matches!(self.layers.last().unwrap().kind, LayerKind::Softmax) {
            activations[activations.len() - 2].clone()
        } else {
            activations[activations.len() - 1].clone()
        };
        let probabilities = softmax(&logits);
        Ok(ForwardTrace {
            input: image.clone(),
            activations,
            logits,
            probabilities,
        })
    }

    /// Re-run the network from the output of layer `layer_idx`, substituting
    /// `activation` for the cached value, and return the logits.
    ///
    /// This is the replay primitive behind finite-difference checks and
    /// occlusion-style experiments.
    pub fn forward_tail(&self, layer_idx: usize, activation: &Tensor) -> Result<Tensor> {
        if layer_idx >= self.layers.len() {
            return Err(Error::Lookup(format!(
                "layer index {layer_idx} out of range"
            )));
        }
        if activation.shape() != self.shapes[layer_idx].as_slice() {
            return Err(Error::Shape(format!(
                "activation shape {:?} does not match layer output {:?}",
                activation.shape(),
                self.shapes[layer_idx]
            )));
        }
        let mut cur = activation.clone();
        for idx in layer_idx + 1..self.layers.len() {
            if matches!(self.layers[idx].kind, LayerKind::Softmax) {
                break;
            }
            cur = self.layer_forward(idx, &cur)?;
        }
        Ok(cur)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.activations.len() != self.layers.len() {
            return Err(Error::State(format!(
                "trace carries {} activations, network has {} layers",
                trace.activations.len(),
                self.layers.len()
            )));
        }
        for (act, shape) in trace.activations.iter().zip(&self.shapes) {
            if act.shape() != shape.as_slice() {
                return Err(Error::State(
                    "trace activations do not match this network's shapes".into(),
                ));
            }
        }
        Ok(())
    }

    /// Gradient of the class logit with respect to the named layer's output.
    ///
    /// The score is the pre-softmax logit. The target may be any conv, pool,
    /// or relu layer (anything with a spatial or per-channel activation).
    pub fn grad_wrt_activation(
        &self,
        trace: &ForwardTrace,
        class_index: usize,
        layer: &str,
    ) -> Result<Tensor> {
        let target = self.layer_index(layer)?;
        if class_index >= self.class_count() {
            return Err(Error::Config(format!(
                "class index {class_index} out of range for {} classes",
                self.class_count()
            )));
        }
        match self.layers[target].kind {
            LayerKind::Conv2d { .. }
            | LayerKind::MaxPool { .. }
            | LayerKind::Relu
            | LayerKind::GlobalAvgPool => {}
            _ => {
                return Err(Error::Architecture(format!(
                    "layer '{layer}' is not a convolutional or pooling layer"
                )))
            }
        }
        self.check_trace(trace)?;

        let last = if matches!(self.layers.last().unwrap().kind, LayerKind::Softmax) {
            self.layers.len() - 2
        } else {
            self.layers.len() - 1
        };
        if target > last {
            return Err(Error::Architecture(format!(
                "layer '{layer}' is after the classifier logits"
            )));
        }
        let mut seed = Tensor::zeros(vec![self.class_count()]);
        seed.data_mut()[class_index] = 1.0;
        if target == last {
            return Ok(seed);
        }

        let mut grad = seed;
        for idx in (target + 1..=last).rev() {
            let input = if idx == 0 {
                &trace.input
            } else {
                &trace.activations[idx - 1]
            };
            grad = self.layer_backward_input(idx, input, &grad)?;
        }
        Ok(grad)
    }

    fn layer_backward_input(&self, idx: usize, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let spec = &self.layers[idx];
        Ok(match &spec.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let LayerParams::Conv { kernels, .. } = &self.params[idx] else {
                    unreachable!();
                };
                conv2d_backward_input(
                    grad_out,
                    kernels,
                    input.shape(),
                    (stride[0], stride[1]),
                    (padding[0], padding[1]),
                )
            }
            LayerKind::Relu => relu_backward(input, grad_out),
            LayerKind::MaxPool { window, stride } => {
                maxpool_backward(input, grad_out, *window, *stride)
            }
            LayerKind::GlobalAvgPool => gap_backward(input.shape(), grad_out),
            LayerKind::Dense { .. } => {
                let LayerParams::Dense { weights, .. } = &self.params[idx] else {
                    unreachable!();
                };
                dense_backward_input(weights, grad_out, input.shape())
            }
            LayerKind::Softmax => {
                return Err(Error::State(
                    "gradient propagation through softmax is not supported; \
                     scores are pre-softmax logits"
                        .into(),
                ))
            }
        })
    }

    /// Full backward pass from a gradient at the logits; returns per-layer
    /// parameter gradients (same order and variants as `params()`).
    pub(crate) fn backprop_params(
        &self,
        trace: &ForwardTrace,
        grad_logits: &Tensor,
    ) -> Result<Vec<LayerParams>> {
        self.check_trace(trace)?;
        let last = if matches!(self.layers.last().unwrap().kind, LayerKind::Softmax) {
            self.layers.len() - 2
        } else {
            self.layers.len() - 1
        };
        let mut grads: Vec<LayerParams> = self
            .params
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
            .collect();

        let mut grad = grad_logits.clone();
        for idx in (0..=last).rev() {
            let input = if idx == 0 {
                &trace.input
            } else {
                &trace.activations[idx - 1]
            };
            match &self.layers[idx].kind {
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let LayerParams::Conv { kernels, .. } = &self.params[idx] else {
                        unreachable!();
                    };
                    let (dk, db) = conv2d_backward_params(
                        input,
                        &grad,
                        kernels.shape(),
                        (stride[0], stride[1]),
                        (padding[0], padding[1]),
                    );
                    grads[idx] = LayerParams::Conv {
                        kernels: dk,
                        bias: db,
                    };
                }
                LayerKind::Dense { .. } => {
                    let flat = input.clone().reshape(vec![input.len()])?;
                    let (dw, db) = dense_backward_params(&flat, &grad);
                    grads[idx] = LayerParams::Dense {
                        weights: dw,
                        bias: db,
                    };
                }
                _ => {}
            }
            if idx > 0 {
                grad = self.layer_backward_input(idx, input, &grad)?;
            }
        }
        Ok(grads)
    }
}

/// The bundled classifier topology: three 3x3 conv blocks (16/32/64
/// channels, two 2x2 max-pools) into a global-average-pool head,
/// CAM-compatible by construction. Needs input extents of at least 4x4.
pub fn bundled_network(
    input_shape: [usize; 3],
    class_labels: Vec<String>,
    seed: u64,
) -> Result<Network> {
    let conv = |name: &str, out_channels: usize| {
        LayerSpec::new(
            name,
            LayerKind::Conv2d {
                out_channels,
                kernel: [3, 3],
                stride: [1, 1],
                padding: [1, 1],
            },
        )
    };
    let pool = |name: &str| {
        LayerSpec::new(
            name,
            LayerKind::MaxPool {
                window: [2, 2],
                stride: [2, 2],
            },
        )
    };
    let classes = class_labels.len();
    Network::new(
        input_shape,
        class_labels,
        vec![
            conv("conv1", 16),
            LayerSpec::new("relu1", LayerKind::Relu),
            pool("pool1"),
            conv("conv2", 32),
            LayerSpec::new("relu2", LayerKind::Relu),
            pool("pool2"),
            conv("conv3", 64),
            LayerSpec::new("relu3", LayerKind::Relu),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool),
            LayerSpec::new("head", LayerKind::Dense { units: classes }),
            LayerSpec::new("probs", LayerKind::Softmax),
        ],
        seed,
    )
}

/// The bundled 10-class digit classifier on 1x28x28 inputs.
pub fn mnist_network(seed: u64) -> Network {
    bundled_network([1, 28, 28], (0..10).map(|d| d.to_string()).collect(), seed)
        .expect("bundled architecture is valid")
}
