//! Network specifications and parameter sets.
//!
//! A [`NetworkSpec`] is an immutable, validated description of a feed-forward
//! architecture; a [`ParamSet`] holds its trainable parameters as one flat
//! contiguous f64 vector (plus batch-norm running statistics, which are not
//! trainable and live outside the flat view).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One layer of a feed-forward network. Convolutions are stride-1 "valid"
/// (no padding); pools use stride equal to their kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Conv2D { in_channels: usize, out_channels: usize, kernel: usize },
    MaxPool2D { kernel: usize },
    Conv1D { in_channels: usize, out_channels: usize, kernel: usize },
    MaxPool1D { kernel: usize },
    BatchNorm1D { channels: usize },
    ReLU,
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::MaxPool2D { .. } => "maxpool2d",
            LayerSpec::Conv1D { .. } => "conv1d",
            LayerSpec::MaxPool1D { .. } => "maxpool1d",
            LayerSpec::BatchNorm1D { .. } => "batchnorm1d",
            LayerSpec::ReLU => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape (without batch dimension) for the given input shape.
    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            LayerSpec::Linear { inputs, outputs } => {
                if input != [inputs] {
                    return bad(format!("linear expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2D { in_channels, out_channels, kernel } => match input {
                [c, h, w] if *c == in_channels && *h >= kernel && *w >= kernel => {
                    Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => bad(format!("conv2d({in_channels},{out_channels},k{kernel}) cannot take {input:?}")),
            },
            LayerSpec::MaxPool2D { kernel } => match input {
                [c, h, w] if *h >= kernel && *w >= kernel => Ok(vec![*c, h / kernel, w / kernel]),
                _ => bad(format!("maxpool2d(k{kernel}) cannot take {input:?}")),
            },
            LayerSpec::Conv1D { in_channels, out_channels, kernel } => match input {
                [c, l] if *c == in_channels && *l >= kernel => {
                    Ok(vec![out_channels, l - kernel + 1])
                }
                _ => bad(format!("conv1d({in_channels},{out_channels},k{kernel}) cannot take {input:?}")),
            },
            LayerSpec::MaxPool1D { kernel } => match input {
                [c, l] if *l >= kernel => Ok(vec![*c, l / kernel]),
                _ => bad(format!("maxpool1d(k{kernel}) cannot take {input:?}")),
            },
            LayerSpec::BatchNorm1D { channels } => match input {
                [c, _] | [c] if *c == channels => Ok(input.to_vec()),
                _ => bad(format!("batchnorm1d({channels}) cannot take {input:?}")),
            },
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => match input {
                [k] => Ok(vec![*k]),
                _ => bad(format!("softmax expects a flat input, got {input:?}")),
            },
        }
    }

    /// Trainable parameter tensors for this layer: `(name, shape)`.
    fn param_slots(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            LayerSpec::Conv2D { in_channels, out_channels, kernel } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::Conv1D { in_channels, out_channels, kernel } => vec![
                ("weight", vec![out_channels, in_channels, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm1D { channels } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            _ => vec![],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { inputs, .. } => inputs,
            LayerSpec::Conv2D { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerSpec::Conv1D { in_channels, kernel, .. } => in_channels * kernel,
            _ => 1,
        }
    }
}

/// Loss function attached to a network. Only cross-entropy is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Loss {
    #[default]
    CrossEntropy,
}

/// Validated architecture description shared by global, local, pre-trained,
/// and attack models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Output shape of each layer, computed at build time.
    shapes: Vec<Vec<usize>>,
}

impl NetworkSpec {
    /// Build and validate: adjacent layers must be shape-compatible, the
    /// terminal layer must be a softmax over `num_classes` logits, and
    /// softmax may appear nowhere else.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(Error::Config("softmax is only valid as the terminal layer".into()));
            }
            cur = layer.out_shape(&cur)?;
            shapes.push(cur.clone());
        }
        if !matches!(layers.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::Config("network must end with a softmax layer".into()));
        }
        if cur != [num_classes] {
            return Err(Error::Config(format!(
                "network produces {cur:?}, expected [{num_classes}] class probabilities"
            )));
        }
        Ok(NetworkSpec { layers, loss: Loss::CrossEntropy, input_shape, num_classes, shapes })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output shape (without batch dim) of layer `idx`.
    pub fn layer_output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    /// Flattened width of the activation produced by layer `idx`.
    pub fn tap_width(&self, idx: usize) -> Result<usize> {
        self.shapes
            .get(idx)
            .map(|s| s.iter().product())
            .ok_or_else(|| Error::Config(format!("tap index {idx} out of range")))
    }

    /// Flat parameter vector layout: `(layer idx, slot name, offset, shape)`.
    pub fn param_layout(&self) -> Vec<(usize, &'static str, usize, Vec<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, shape) in layer.param_slots() {
                let n: usize = shape.iter().product();
                out.push((i, name, offset, shape));
                offset += n;
            }
        }
        out
    }

    /// Total trainable parameter count.
    pub fn flat_len(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_slots())
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Running statistics of one batch-norm layer (not trainable, not in the
/// flat view).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Trainable parameters of a network as a single contiguous vector, plus
/// per-layer batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    flat: Vec<f64>,
    /// One entry per layer; `Some` only for batch-norm layers.
    running: Vec<Option<RunningStats>>,
}

impl ParamSet {
    /// All-zero parameters (batch-norm running stats at mean 0, var 1).
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamSet { flat: vec![0.0; spec.flat_len()], running: fresh_running(spec) }
    }

    /// Seed-deterministic init: each layer's weights and biases uniform in
    /// ±1/sqrt(fan_in); batch-norm gamma 1, beta 0.
    pub fn init<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut flat = vec![0.0; spec.flat_len()];
        for (layer_idx, name, offset, shape) in spec.param_layout() {
            let n: usize = shape.iter().product();
            let slot = &mut flat[offset..offset + n];
            match spec.layers[layer_idx] {
                LayerSpec::BatchNorm1D { .. } => {
                    let v = if name == "gamma" { 1.0 } else { 0.0 };
                    slot.fill(v);
                }
                ref layer => {
                    let bound = 1.0 / (layer.fan_in() as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    for v in slot.iter_mut() {
                        *v = dist.sample(rng);
                    }
                }
            }
        }
        ParamSet { flat, running: fresh_running(spec) }
    }

    pub fn flat_view(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_view_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    /// Rebuild from a flat vector (running stats reset to fresh).
    pub fn from_flat(spec: &NetworkSpec, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != spec.flat_len() {
            return Err(Error::Config(format!(
                "flat vector of {} values does not fit spec with {} parameters",
                flat.len(),
                spec.flat_len()
            )));
        }
        Ok(ParamSet { flat, running: fresh_running(spec) })
    }

    pub fn running(&self, layer: usize) -> Option<&RunningStats> {
        self.running.get(layer).and_then(|r| r.as_ref())
    }

    pub fn running_mut(&mut self, layer: usize) -> Option<&mut RunningStats> {
        self.running.get_mut(layer).and_then(|r| r.as_mut())
    }

    /// Weighted average of several parameter sets (trainable values and any
    /// running statistics alike), accumulated in the given order.
    pub fn weighted_average(items: &[(&ParamSet, f64)]) -> Result<ParamSet> {
        let (first, _) = items.first().ok_or_else(|| Error::Input("empty average".into()))?;
        if items.iter().any(|(p, _)| {
            p.flat.len() != first.flat.len() || p.running.len() != first.running.len()
        }) {
            return Err(Error::Input("parameter sets of different flat lengths".into()));
        }
        let mut flat = vec![0.0; first.flat.len()];
        for (p, w) in items {
            for (acc, v) in flat.iter_mut().zip(&p.flat) {
                *acc += w * v;
            }
        }
        let running = first
            .running
            .iter()
            .enumerate()
            .map(|(li, slot)| {
                slot.as_ref().map(|stats| {
                    let mut mean = vec![0.0; stats.mean.len()];
                    let mut var = vec![0.0; stats.var.len()];
                    for (p, w) in items {
                        if let Some(s) = &p.running[li] {
                            for (acc, v) in mean.iter_mut().zip(&s.mean) {
                                *acc += w * v;
                            }
                            for (acc, v) in var.iter_mut().zip(&s.var) {
                                *acc += w * v;
                            }
                        }
                    }
                    RunningStats { mean, var }
                })
            })
            .collect();
        Ok(ParamSet { flat, running })
    }

    /// Structured view of one parameter slot as a tensor copy.
    pub fn tensor(&self, spec: &NetworkSpec, layer: usize, slot: &str) -> Option<Tensor> {
        spec.param_layout()
            .into_iter()
            .find(|(i, name, _, _)| *i == layer && *name == slot)
            .map(|(_, _, offset, shape)| {
                let n: usize = shape.iter().product();
                Tensor::new(shape, self.flat[offset..offset + n].to_vec()).unwrap()
            })
    }
}

fn fresh_running(spec: &NetworkSpec) -> Vec<Option<RunningStats>> {
    spec.layers
        .iter()
        .map(|l| match l {
            LayerSpec::BatchNorm1D { channels } => {
                Some(RunningStats { mean: vec![0.0; *channels], var: vec![1.0; *channels] })
            }
            _ => None,
        })
        .collect()
}

/// Portable on-disk form of a parameter set: layer names, shapes, and full
/// 64-bit values. JSON round-trips f64 exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamFile {
    pub version: u32,
    pub layers: Vec<ParamFileLayer>,
    pub running: Vec<Option<RunningStats>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamFileLayer {
    pub layer: usize,
    pub kind: String,
    pub slot: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub const PARAM_FILE_VERSION: u32 = 1;

impl ParamSet {
    pub fn to_file(&self, spec: &NetworkSpec) -> ParamFile {
        let layers = spec
            .param_layout()
            .into_iter()
            .map(|(i, name, offset, shape)| {
                let n: usize = shape.iter().product();
                ParamFileLayer {
                    layer: i,
                    kind: spec.layers[i].name().to_string(),
                    slot: name.to_string(),
                    shape,
                    values: self.flat[offset..offset + n].to_vec(),
                }
            })
            .collect();
        ParamFile { version: PARAM_FILE_VERSION, layers, running: self.running.clone() }
    }

    pub fn from_file(spec: &NetworkSpec, file: &ParamFile) -> Result<Self> {
        if file.version != PARAM_FILE_VERSION {
            return Err(Error::Config(format!("unsupported param file version {}", file.version)));
        }
        let mut flat = vec![0.0; spec.flat_len()];
        let layout = spec.param_layout();
        if layout.len() != file.layers.len() {
            return Err(Error::Config("param file does not match network spec".into()));
        }
        for ((i, name, offset, shape), stored) in layout.into_iter().zip(&file.layers) {
            if stored.layer != i || stored.slot != name || stored.shape != shape {
                return Err(Error::Config(format!(
                    "param slot mismatch at layer {i} {name}: file has layer {} {}",
                    stored.layer, stored.slot
                )));
            }
            let n: usize = shape.iter().product();
            if stored.values.len() != n {
                return Err(Error::Config(format!("bad value count for layer {i} {name}")));
            }
            flat[offset..offset + n].copy_from_slice(&stored.values);
        }
        let mut params = ParamSet::from_flat(spec, flat)?;
        if file.running.len() == spec.n_layers() {
            params.running = file.running.clone();
        }
        Ok(params)
    }
}

/// MLP used on the synthetic task: one hidden layer of `hidden` units with
/// ReLU, softmax over `classes`.
pub fn mlp_spec(inputs: usize, hidden: usize, classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::Linear { inputs, outputs: hidden },
            LayerSpec::ReLU,
            LayerSpec::Linear { inputs: hidden, outputs: classes },
            LayerSpec::Softmax,
        ],
        vec![inputs],
        classes,
    )
    .expect("mlp spec is well-formed")
}

/// CNN used on 28x28 digit images: two 5x5 conv blocks (32 and 64 filters,
/// each followed by a 2x2 max-pool and ReLU), then a 512/128 MLP head.
pub fn cnn_spec(classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::Conv2D { in_channels: 1, out_channels: 32, kernel: 5 },
            LayerSpec::MaxPool2D { kernel: 2 },
            LayerSpec::ReLU,
            LayerSpec::Conv2D { in_channels: 32, out_channels: 64, kernel: 5 },
            LayerSpec::MaxPool2D { kernel: 2 },
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 64 * 4 * 4, outputs: 512 },
            LayerSpec::ReLU,
            LayerSpec::Linear { inputs: 512, outputs: 128 },
            LayerSpec::ReLU,
            LayerSpec::Linear { inputs: 128, outputs: classes },
            LayerSpec::Softmax,
        ],
        vec![1, 28, 28],
        classes,
    )
    .expect("cnn spec is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn cnn_shapes_flow_28_24_12_8_4() {
        let spec = cnn_spec(10);
        assert_eq!(spec.layer_output_shape(0), &[32, 24, 24]);
        assert_eq!(spec.layer_output_shape(1), &[32, 12, 12]);
        assert_eq!(spec.layer_output_shape(3), &[64, 8, 8]);
        assert_eq!(spec.layer_output_shape(4), &[64, 4, 4]);
        assert_eq!(spec.tap_width(6).unwrap(), 1024);
    }

    #[test]
    fn softmax_must_be_terminal() {
        let err = NetworkSpec::new(
            vec![
                LayerSpec::Softmax,
                LayerSpec::Linear { inputs: 2, outputs: 2 },
                LayerSpec::Softmax,
            ],
            vec![2],
            2,
        );
        assert!(err.is_err());
        let err = NetworkSpec::new(vec![LayerSpec::Linear { inputs: 2, outputs: 2 }], vec![2], 2);
        assert!(err.is_err());
    }

    #[test]
    fn incompatible_adjacent_layers_rejected() {
        let err = NetworkSpec::new(
            vec![
                LayerSpec::Linear { inputs: 4, outputs: 3 },
                LayerSpec::Linear { inputs: 5, outputs: 2 },
                LayerSpec::Softmax,
            ],
            vec![4],
            2,
        );
        assert!(err.is_err());
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let spec = mlp_spec(60, 200, 2);
        let params = ParamSet::init(&spec, &mut derive_rng(1, "w0", 0));
        assert_eq!(params.flat_view().len(), spec.flat_len());
        let rebuilt = ParamSet::from_flat(&spec, params.flat_view().to_vec()).unwrap();
        assert_eq!(params.flat_view(), rebuilt.flat_view());
    }

    #[test]
    fn param_file_round_trip_is_exact() {
        let spec = mlp_spec(6, 5, 2);
        let params = ParamSet::init(&spec, &mut derive_rng(3, "w0", 0));
        let json = serde_json::to_string(&params.to_file(&spec)).unwrap();
        let file: ParamFile = serde_json::from_str(&json).unwrap();
        let back = ParamSet::from_file(&spec, &file).unwrap();
        assert_eq!(params.flat_view(), back.flat_view());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = mlp_spec(60, 200, 2);
        let a = ParamSet::init(&spec, &mut derive_rng(9, "w0", 0));
        let b = ParamSet::init(&spec, &mut derive_rng(9, "w0", 0));
        assert_eq!(a.flat_view(), b.flat_view());
    }
}
