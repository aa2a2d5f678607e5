//! Forward/backward passes, losses, per-sample gradients, and layer taps.

use crate::data::SubjectId;
use crate::error::{Error, Result};
use crate::net::{LayerSpec, NetworkSpec, ParamSet};
use crate::optim::OptimizerState;
use crate::tensor::{l2_norm, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Train mode uses batch statistics in batch-norm layers; eval mode uses
/// running statistics. Layer taps are taken in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Flat gradient with its cached L2 norm and an optional subject tag used
/// by the subject-level privacy path.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub values: Vec<f64>,
    pub norm: f64,
    pub subject: Option<SubjectId>,
}

impl GradientRecord {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        GradientRecord { values, norm, subject: None }
    }

    pub fn with_subject(mut self, subject: SubjectId) -> Self {
        self.subject = Some(subject);
        self
    }
}

/// Per-layer cache produced by the forward pass.
enum LayerAux {
    None,
    /// Flat input index of the max element for each output element.
    Pool { argmax: Vec<usize> },
    /// Per-channel statistics actually used for normalization.
    BatchNorm { mean: Vec<f64>, var: Vec<f64>, inv_std: Vec<f64>, train: bool },
}

/// Activations (one per layer, plus the input at index 0) and layer caches.
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
    aux: Vec<LayerAux>,
}

impl ForwardTrace {
    /// Per-channel batch statistics of a train-mode batch-norm layer.
    fn batch_stats(&self, layer: usize) -> Option<(&[f64], &[f64])> {
        match &self.aux[layer] {
            LayerAux::BatchNorm { mean, var, train: true, .. } => Some((mean, var)),
            _ => None,
        }
    }
}

fn slot_ranges(spec: &NetworkSpec) -> Vec<Vec<(usize, usize)>> {
    let mut per_layer = vec![Vec::new(); spec.n_layers()];
    for (layer, _, offset, shape) in spec.param_layout() {
        per_layer[layer].push((offset, shape.iter().product()));
    }
    per_layer
}

fn check_batch(spec: &NetworkSpec, batch: &Tensor) -> Result<()> {
    if batch.shape.len() != spec.input_shape.len() + 1 || batch.shape[1..] != spec.input_shape[..] {
        return Err(Error::Config(format!(
            "batch shape {:?} does not match input shape {:?} plus batch dim",
            batch.shape, spec.input_shape
        )));
    }
    if batch.batch_size() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if !batch.is_finite() {
        return Err(Error::Input("non-finite values in input batch".into()));
    }
    Ok(())
}

/// Run the network on a batch, retaining every layer's activations (used by
/// backward and by layer taps). Output rows are probability vectors.
pub fn forward(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, mode: Mode) -> Result<ForwardTrace> {
    check_batch(spec, batch)?;
    let ranges = slot_ranges(spec);
    let flat = params.flat_view();
    let bsz = batch.batch_size();

    let mut activations = Vec::with_capacity(spec.n_layers() + 1);
    let mut aux = Vec::with_capacity(spec.n_layers());
    activations.push(batch.clone());

    for (li, layer) in spec.layers.iter().enumerate() {
        let x = activations.last().unwrap();
        let mut out_shape = vec![bsz];
        out_shape.extend_from_slice(spec.layer_output_shape(li));
        let (y, a) = match *layer {
            LayerSpec::Linear { inputs, outputs } => {
                let (wo, wn) = ranges[li][0];
                let (bo, _) = ranges[li][1];
                let w = &flat[wo..wo + wn];
                let b = &flat[bo..bo + outputs];
                let mut y = vec![0.0; bsz * outputs];
                for bi in 0..bsz {
                    let xrow = x.row(bi);
                    let yrow = &mut y[bi * outputs..(bi + 1) * outputs];
                    for o in 0..outputs {
                        let wrow = &w[o * inputs..(o + 1) * inputs];
                        let mut acc = b[o];
                        for i in 0..inputs {
                            acc += wrow[i] * xrow[i];
                        }
                        yrow[o] = acc;
                    }
                }
                (y, LayerAux::None)
            }
            LayerSpec::Conv2D { in_channels, out_channels, kernel } => {
                let (wo, wn) = ranges[li][0];
                let (bo, _) = ranges[li][1];
                let w = &flat[wo..wo + wn];
                let b = &flat[bo..bo + out_channels];
                let (h, wd) = (x.shape[2], x.shape[3]);
                let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
                let mut y = vec![0.0; bsz * out_channels * oh * ow];
                for bi in 0..bsz {
                    let xb = &x.data[bi * in_channels * h * wd..];
                    let yb = &mut y[bi * out_channels * oh * ow..(bi + 1) * out_channels * oh * ow];
                    for co in 0..out_channels {
                        let yc = &mut yb[co * oh * ow..(co + 1) * oh * ow];
                        yc.fill(b[co]);
                        for ci in 0..in_channels {
                            let xc = &xb[ci * h * wd..(ci + 1) * h * wd];
                            for dy in 0..kernel {
                                for dx in 0..kernel {
                                    let wv = w[((co * in_channels + ci) * kernel + dy) * kernel + dx];
                                    for oy in 0..oh {
                                        let xrow = &xc[(oy + dy) * wd + dx..(oy + dy) * wd + dx + ow];
                                        let yrow = &mut yc[oy * ow..(oy + 1) * ow];
                                        for ox in 0..ow {
                                            yrow[ox] += wv * xrow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (y, LayerAux::None)
            }
            LayerSpec::MaxPool2D { kernel } => {
                let (c, h, wd) = (x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (h / kernel, wd / kernel);
                let mut y = vec![0.0; bsz * c * oh * ow];
                let mut argmax = vec![0usize; y.len()];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let xoff = (bi * c + ci) * h * wd;
                        let yoff = (bi * c + ci) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for dy in 0..kernel {
                                    for dx in 0..kernel {
                                        let idx = xoff + (oy * kernel + dy) * wd + ox * kernel + dx;
                                        if x.data[idx] > best {
                                            best = x.data[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                y[yoff + oy * ow + ox] = best;
                                argmax[yoff + oy * ow + ox] = best_idx;
                            }
                        }
                    }
                }
                (y, LayerAux::Pool { argmax })
            }
            LayerSpec::Conv1D { in_channels, out_channels, kernel } => {
                let (wo, wn) = ranges[li][0];
                let (bo, _) = ranges[li][1];
                let w = &flat[wo..wo + wn];
                let b = &flat[bo..bo + out_channels];
                let l = x.shape[2];
                let ol = l - kernel + 1;
                let mut y = vec![0.0; bsz * out_channels * ol];
                for bi in 0..bsz {
                    let xb = &x.data[bi * in_channels * l..];
                    let yb = &mut y[bi * out_channels * ol..(bi + 1) * out_channels * ol];
                    for co in 0..out_channels {
                        let yc = &mut yb[co * ol..(co + 1) * ol];
                        yc.fill(b[co]);
                        for ci in 0..in_channels {
                            let xc = &xb[ci * l..(ci + 1) * l];
                            for d in 0..kernel {
                                let wv = w[(co * in_channels + ci) * kernel + d];
                                for t in 0..ol {
                                    yc[t] += wv * xc[t + d];
                                }
                            }
                        }
                    }
                }
                (y, LayerAux::None)
            }
            LayerSpec::MaxPool1D { kernel } => {
                let (c, l) = (x.shape[1], x.shape[2]);
                let ol = l / kernel;
                let mut y = vec![0.0; bsz * c * ol];
                let mut argmax = vec![0usize; y.len()];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let xoff = (bi * c + ci) * l;
                        let yoff = (bi * c + ci) * ol;
                        for t in 0..ol {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for d in 0..kernel {
                                let idx = xoff + t * kernel + d;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                            y[yoff + t] = best;
                            argmax[yoff + t] = best_idx;
                        }
                    }
                }
                (y, LayerAux::Pool { argmax })
            }
            LayerSpec::BatchNorm1D { channels } => {
                let (go, _) = ranges[li][0];
                let (bo, _) = ranges[li][1];
                let gamma = &flat[go..go + channels];
                let beta = &flat[bo..bo + channels];
                let l = if x.shape.len() == 3 { x.shape[2] } else { 1 };
                let n = bsz * l;
                let (mean, var, train) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; channels];
                        let mut var = vec![0.0; channels];
                        for c in 0..channels {
                            let mut sum = 0.0;
                            for bi in 0..bsz {
                                let xc = &x.data[(bi * channels + c) * l..(bi * channels + c) * l + l];
                                sum += xc.iter().sum::<f64>();
                            }
                            let m = sum / n as f64;
                            let mut sq = 0.0;
                            for bi in 0..bsz {
                                let xc = &x.data[(bi * channels + c) * l..(bi * channels + c) * l + l];
                                sq += xc.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                            }
                            mean[c] = m;
                            var[c] = sq / n as f64;
                        }
                        (mean, var, true)
                    }
                    Mode::Eval => {
                        let stats = params
                            .running(li)
                            .ok_or_else(|| Error::Config("missing running stats".into()))?;
                        (stats.mean.clone(), stats.var.clone(), false)
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut y = vec![0.0; x.len()];
                for bi in 0..bsz {
                    for c in 0..channels {
                        let off = (bi * channels + c) * l;
                        for t in 0..l {
                            y[off + t] = gamma[c] * (x.data[off + t] - mean[c]) * inv_std[c] + beta[c];
                        }
                    }
                }
                (y, LayerAux::BatchNorm { mean, var, inv_std, train })
            }
            LayerSpec::ReLU => {
                let y = x.data.iter().map(|v| v.max(0.0)).collect();
                (y, LayerAux::None)
            }
            LayerSpec::Flatten => (x.data.clone(), LayerAux::None),
            LayerSpec::Softmax => {
                let k = x.row_len();
                let mut y = vec![0.0; x.len()];
                for bi in 0..bsz {
                    let row = x.row(bi);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (i, v) in row.iter().enumerate() {
                        let e = (v - m).exp();
                        y[bi * k + i] = e;
                        z += e;
                    }
                    for v in &mut y[bi * k..(bi + 1) * k] {
                        *v /= z;
                    }
                }
                (y, LayerAux::None)
            }
        };
        activations.push(Tensor::new(out_shape, y)?);
        aux.push(a);
    }
    Ok(ForwardTrace { activations, aux })
}

/// Output probabilities for a batch (eval mode).
pub fn predict_probs(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    let trace = forward(spec, params, batch, Mode::Eval)?;
    Ok(trace.activations.last().unwrap().clone())
}

fn check_labels(spec: &NetworkSpec, batch: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != batch.batch_size() {
        return Err(Error::Input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.batch_size()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l >= spec.num_classes) {
        return Err(Error::Input(format!("label {l} out of range 0..{}", spec.num_classes)));
    }
    Ok(())
}

/// Mean cross-entropy loss and its gradient at the logits (the input of the
/// terminal softmax), computed in one stable pass.
fn ce_loss_and_dlogits(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let bsz = logits.batch_size();
    let k = logits.row_len();
    let mut dz = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for bi in 0..bsz {
        let row = logits.row(bi);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[bi]];
        for i in 0..k {
            dz[bi * k + i] = (row[i] - lse).exp() / bsz as f64;
        }
        dz[bi * k + labels[bi]] -= 1.0 / bsz as f64;
    }
    (loss / bsz as f64, Tensor { shape: logits.shape.clone(), data: dz })
}

/// Mean cross-entropy of the batch plus the full trace, train mode.
pub fn loss_grad_trace(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<f64>, ForwardTrace)> {
    check_labels(spec, batch, labels)?;
    let trace = forward(spec, params, batch, Mode::Train)?;
    let n = spec.n_layers();
    // The terminal softmax is folded into the cross-entropy gradient.
    let logits = &trace.activations[n - 1];
    let (loss, dlogits) = ce_loss_and_dlogits(logits, labels);
    let mut grad = vec![0.0; spec.flat_len()];
    let ranges = slot_ranges(spec);
    let mut gout = dlogits;
    for li in (0..n - 1).rev() {
        gout = backward_layer(spec, params, &trace, &ranges, li, &gout, &mut grad)?;
    }
    Ok((loss, grad, trace))
}

/// Gradient of mean cross-entropy over the batch wrt all trainable params.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, GradientRecord)> {
    let (loss, grad, _) = loss_grad_trace(spec, params, batch, labels)?;
    Ok((loss, GradientRecord::new(grad)))
}

/// One gradient per sample (each sample treated as a batch of one). The mean
/// of the records equals the batch gradient for nets without batch-norm.
pub fn per_sample_gradients(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Vec<GradientRecord>> {
    check_labels(spec, batch, labels)?;
    let w = batch.row_len();
    let mut out = Vec::with_capacity(batch.batch_size());
    for bi in 0..batch.batch_size() {
        let mut shape = batch.shape.clone();
        shape[0] = 1;
        let one = Tensor::new(shape, batch.data[bi * w..(bi + 1) * w].to_vec())?;
        let (_, rec) = loss_and_grad(spec, params, &one, &labels[bi..bi + 1])?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-sample cross-entropy losses in eval mode.
pub fn per_point_losses(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    check_labels(spec, batch, labels)?;
    let trace = forward(spec, params, batch, Mode::Eval)?;
    let logits = &trace.activations[spec.n_layers() - 1];
    let mut out = Vec::with_capacity(labels.len());
    for (bi, &y) in labels.iter().enumerate() {
        let row = logits.row(bi);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.push(lse - row[y]);
    }
    Ok(out)
}

/// Fraction of rows whose argmax probability matches the label (eval mode).
pub fn accuracy(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(spec, batch, labels)?;
    let probs = predict_probs(spec, params, batch)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(bi, y)| {
            let row = probs.row(*bi);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            pred == **y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Flattened activation rows after layer `layer_tap`, taken in eval mode.
pub fn embed(spec: &NetworkSpec, params: &ParamSet, layer_tap: usize, inputs: &Tensor) -> Result<Tensor> {
    if layer_tap >= spec.n_layers() {
        return Err(Error::Config(format!(
            "tap index {layer_tap} out of range for a {}-layer network",
            spec.n_layers()
        )));
    }
    let trace = forward(spec, params, inputs, Mode::Eval)?;
    let act = &trace.activations[layer_tap + 1];
    Ok(Tensor::new(vec![act.batch_size(), act.row_len()], act.data.clone())?)
}

/// Forward + backward + optimizer step + batch-norm running-stat update.
pub fn train_step(
    spec: &NetworkSpec,
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let (loss, grad, trace) = loss_grad_trace(spec, params, batch, labels)?;
    update_running_stats(spec, params, &trace, batch.batch_size());
    opt.step(params.flat_view_mut(), &grad);
    Ok(loss)
}

/// Apply an already-computed (e.g. privatized) flat gradient as one step.
pub fn apply_gradient(params: &mut ParamSet, opt: &mut OptimizerState, grad: &[f64]) {
    opt.step(params.flat_view_mut(), grad);
}

/// Fold train-mode batch statistics into the running statistics
/// (momentum 0.1, unbiased variance for the running update).
pub fn update_running_stats(spec: &NetworkSpec, params: &mut ParamSet, trace: &ForwardTrace, bsz: usize) {
    for li in 0..spec.n_layers() {
        if let Some((mean, var)) = trace.batch_stats(li) {
            let l = match trace.activations[li].shape.len() {
                3 => trace.activations[li].shape[2],
                _ => 1,
            };
            let n = (bsz * l) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let (mean, var) = (mean.to_vec(), var.to_vec());
            if let Some(stats) = params.running_mut(li) {
                for c in 0..stats.mean.len() {
                    stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean[c];
                    stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * var[c] * unbias;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_layer(
    spec: &NetworkSpec,
    params: &ParamSet,
    trace: &ForwardTrace,
    ranges: &[Vec<(usize, usize)>],
    li: usize,
    gout: &Tensor,
    grad: &mut [f64],
) -> Result<Tensor> {
    let flat = params.flat_view();
    let x = &trace.activations[li];
    let bsz = x.batch_size();
    let gin_data: Vec<f64> = match spec.layers[li] {
        LayerSpec::Linear { inputs, outputs } => {
            let (wo, wn) = ranges[li][0];
            let (bo, _) = ranges[li][1];
            let w = &flat[wo..wo + wn];
            // weight and bias slots are contiguous in the flat layout
            let (gw, gb) = grad[wo..bo + outputs].split_at_mut(wn);
            let mut gin = vec![0.0; bsz * inputs];
            for bi in 0..bsz {
                let xrow = x.row(bi);
                let grow = gout.row(bi);
                let ginrow = &mut gin[bi * inputs..(bi + 1) * inputs];
                for o in 0..outputs {
                    let g = grow[o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let wrow = &w[o * inputs..(o + 1) * inputs];
                    let gwrow = &mut gw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        gwrow[i] += g * xrow[i];
                        ginrow[i] += g * wrow[i];
                    }
                }
            }
            gin
        }
        LayerSpec::Conv2D { in_channels, out_channels, kernel } => {
            let (wo, wn) = ranges[li][0];
            let (bo, _) = ranges[li][1];
            let w = &flat[wo..wo + wn];
            let (h, wd) = (x.shape[2], x.shape[3]);
            let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
            let mut gin = vec![0.0; x.len()];
            for bi in 0..bsz {
                let xb = &x.data[bi * in_channels * h * wd..];
                let ginb = &mut gin[bi * in_channels * h * wd..(bi + 1) * in_channels * h * wd];
                let goutb = &gout.data[bi * out_channels * oh * ow..];
                for co in 0..out_channels {
                    let gc = &goutb[co * oh * ow..(co + 1) * oh * ow];
                    grad[bo + co] += gc.iter().sum::<f64>();
                    for ci in 0..in_channels {
                        let xc = &xb[ci * h * wd..(ci + 1) * h * wd];
                        let ginc = &mut ginb[ci * h * wd..(ci + 1) * h * wd];
                        for dy in 0..kernel {
                            for dx in 0..kernel {
                                let widx = ((co * in_channels + ci) * kernel + dy) * kernel + dx;
                                let wv = w[widx];
                                let mut gw_acc = 0.0;
                                for oy in 0..oh {
                                    let xrow = &xc[(oy + dy) * wd + dx..(oy + dy) * wd + dx + ow];
                                    let grow = &gc[oy * ow..(oy + 1) * ow];
                                    let ginrow = &mut ginc[(oy + dy) * wd + dx..(oy + dy) * wd + dx + ow];
                                    for ox in 0..ow {
                                        gw_acc += grow[ox] * xrow[ox];
                                        ginrow[ox] += grow[ox] * wv;
                                    }
                                }
                                grad[wo + widx] += gw_acc;
                            }
                        }
                    }
                }
            }
            gin
        }
        LayerSpec::Conv1D { in_channels, out_channels, kernel } => {
            let (wo, wn) = ranges[li][0];
            let (bo, _) = ranges[li][1];
            let w = &flat[wo..wo + wn];
            let l = x.shape[2];
            let ol = l - kernel + 1;
            let mut gin = vec![0.0; x.len()];
            for bi in 0..bsz {
                let xb = &x.data[bi * in_channels * l..];
                let ginb = &mut gin[bi * in_channels * l..(bi + 1) * in_channels * l];
                let goutb = &gout.data[bi * out_channels * ol..];
                for co in 0..out_channels {
                    let gc = &goutb[co * ol..(co + 1) * ol];
                    grad[bo + co] += gc.iter().sum::<f64>();
                    for ci in 0..in_channels {
                        let xc = &xb[ci * l..(ci + 1) * l];
                        let ginc = &mut ginb[ci * l..(ci + 1) * l];
                        for d in 0..kernel {
                            let widx = (co * in_channels + ci) * kernel + d;
                            let wv = w[widx];
                            let mut gw_acc = 0.0;
                            for t in 0..ol {
                                gw_acc += gc[t] * xc[t + d];
                                ginc[t + d] += gc[t] * wv;
                            }
                            grad[wo + widx] += gw_acc;
                        }
                    }
                }
            }
            gin
        }
        LayerSpec::MaxPool2D { .. } | LayerSpec::MaxPool1D { .. } => {
            let LayerAux::Pool { argmax } = &trace.aux[li] else {
                return Err(Error::Config("missing pool cache".into()));
            };
            let mut gin = vec![0.0; x.len()];
            for (j, &src) in argmax.iter().enumerate() {
                gin[src] += gout.data[j];
            }
            gin
        }
        LayerSpec::BatchNorm1D { channels } => {
            let LayerAux::BatchNorm { mean, inv_std, train, .. } = &trace.aux[li] else {
                return Err(Error::Config("missing batch-norm cache".into()));
            };
            let (go, _) = ranges[li][0];
            let (bo, _) = ranges[li][1];
            let gamma = flat[go..go + channels].to_vec();
            let l = if x.shape.len() == 3 { x.shape[2] } else { 1 };
            let n = (bsz * l) as f64;
            let mut gin = vec![0.0; x.len()];
            for c in 0..channels {
                let s = inv_std[c];
                let m = mean[c];
                let mut dgamma = 0.0;
                let mut dbeta = 0.0;
                for bi in 0..bsz {
                    let off = (bi * channels + c) * l;
                    for t in 0..l {
                        let xhat = (x.data[off + t] - m) * s;
                        dgamma += gout.data[off + t] * xhat;
                        dbeta += gout.data[off + t];
                    }
                }
                grad[go + c] += dgamma;
                grad[bo + c] += dbeta;
                for bi in 0..bsz {
                    let off = (bi * channels + c) * l;
                    for t in 0..l {
                        let g = gout.data[off + t];
                        if *train {
                            let xhat = (x.data[off + t] - m) * s;
                            gin[off + t] = gamma[c] * s / n * (n * g - dbeta - xhat * dgamma);
                        } else {
                            gin[off + t] = g * gamma[c] * s;
                        }
                    }
                }
            }
            gin
        }
        LayerSpec::ReLU => x
            .data
            .iter()
            .zip(&gout.data)
            .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
            .collect(),
        LayerSpec::Flatten => gout.data.clone(),
        LayerSpec::Softmax => {
            let k = x.row_len();
            let y = &trace.activations[li + 1];
            let mut gin = vec![0.0; x.len()];
            for bi in 0..bsz {
                let p = y.row(bi);
                let g = gout.row(bi);
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for i in 0..k {
                    gin[bi * k + i] = p[i] * (g[i] - dot);
                }
            }
            gin
        }
    };
    Tensor::new(x.shape.clone(), gin_data)
}
