//! Central finite-difference checks of the analytic gradients for every
//! layer kind. The numeric gradient only uses the forward pass, so it is an
//! independent oracle for the backward pass.

use rand::Rng;
use slsia_core::engine::{forward, loss_and_grad, Mode};
use slsia_core::net::{LayerSpec, NetworkSpec, ParamSet};
use slsia_core::rng::derive_rng;
use slsia_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Mean cross-entropy computed from the train-mode forward pass only.
fn forward_loss(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, labels: &[usize]) -> f64 {
    let trace = forward(spec, params, batch, Mode::Train).unwrap();
    let logits = &trace.activations[spec.n_layers() - 1];
    let mut loss = 0.0;
    for (bi, y) in labels.iter().enumerate() {
        let row = logits.row(bi);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[*y];
    }
    loss / labels.len() as f64
}

fn numeric_gradient(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, labels: &[usize]) -> Vec<f64> {
    let flat = params.flat_view().to_vec();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += H;
        let mut minus = flat.clone();
        minus[i] -= H;
        let lp = forward_loss(spec, &ParamSet::from_flat(spec, plus).unwrap(), batch, labels);
        let lm = forward_loss(spec, &ParamSet::from_flat(spec, minus).unwrap(), batch, labels);
        grad[i] = (lp - lm) / (2.0 * H);
    }
    grad
}

fn assert_gradients_match(spec: &NetworkSpec, seed: u64, batch_size: usize) {
    let mut rng = derive_rng(seed, "gradcheck", 0);
    let params = ParamSet::init(spec, &mut rng);
    let n: usize = spec.input_shape.iter().product();
    let mut shape = vec![batch_size];
    shape.extend_from_slice(&spec.input_shape);
    let data: Vec<f64> = (0..batch_size * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Tensor::new(shape, data).unwrap();
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..spec.num_classes)).collect();

    let (_, analytic) = loss_and_grad(spec, &params, &batch, &labels).unwrap();
    let numeric = numeric_gradient(spec, &params, &batch, &labels);
    let mut worst = 0.0;
    let mut worst_idx = 0;
    for i in 0..numeric.len() {
        let denom = analytic.values[i].abs().max(numeric[i].abs()).max(1e-6);
        let rel = (analytic.values[i] - numeric[i]).abs() / denom;
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    assert!(
        worst <= TOL,
        "worst relative error {worst:.3e} at coordinate {worst_idx} \
         (analytic {}, numeric {})",
        analytic.values[worst_idx],
        numeric[worst_idx]
    );
}

#[test]
fn linear_relu_softmax_gradients() {
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Linear { inputs: 6, outputs: 8 },
            LayerSpec::ReLU,
            LayerSpec::Linear { inputs: 8, outputs: 3 },
            LayerSpec::Softmax,
        ],
        vec![6],
        3,
    )
    .unwrap();
    assert_gradients_match(&spec, 101, 5);
}

#[test]
fn conv2d_maxpool2d_gradients() {
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Conv2D { in_channels: 2, out_channels: 3, kernel: 3 },
            LayerSpec::MaxPool2D { kernel: 2 },
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 3 * 3 * 3, outputs: 2 },
            LayerSpec::Softmax,
        ],
        vec![2, 8, 8],
        2,
    )
    .unwrap();
    assert_gradients_match(&spec, 102, 4);
}

#[test]
fn conv1d_maxpool1d_batchnorm_gradients() {
    // the attack-network layer stack in miniature
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Conv1D { in_channels: 1, out_channels: 2, kernel: 3 },
            LayerSpec::MaxPool1D { kernel: 3 },
            LayerSpec::BatchNorm1D { channels: 2 },
            LayerSpec::Conv1D { in_channels: 2, out_channels: 3, kernel: 3 },
            LayerSpec::MaxPool1D { kernel: 3 },
            LayerSpec::BatchNorm1D { channels: 3 },
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 3, outputs: 2 },
            LayerSpec::Softmax,
        ],
        vec![1, 20],
        2,
    )
    .unwrap();
    assert_gradients_match(&spec, 103, 6);
}

#[test]
fn batchnorm_on_flat_features_gradients() {
    // batch-norm in the [batch, channels] layout
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Conv1D { in_channels: 1, out_channels: 4, kernel: 3 },
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 4 * 4, outputs: 5 },
            LayerSpec::BatchNorm1D { channels: 5 },
            LayerSpec::ReLU,
            LayerSpec::Linear { inputs: 5, outputs: 2 },
            LayerSpec::Softmax,
        ],
        vec![1, 6],
        2,
    )
    .unwrap();
    assert_gradients_match(&spec, 104, 5);
}

#[test]
fn full_task_architectures_gradients() {
    // the synthetic-task MLP at reduced width
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Linear { inputs: 10, outputs: 12 },
            LayerSpec::ReLU,
            LayerSpec::Linear { inputs: 12, outputs: 2 },
            LayerSpec::Softmax,
        ],
        vec![10],
        2,
    )
    .unwrap();
    assert_gradients_match(&spec, 105, 3);

    // the digit CNN at reduced size: two conv+pool+relu blocks and an MLP head
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Conv2D { in_channels: 1, out_channels: 2, kernel: 3 },
            LayerSpec::MaxPool2D { kernel: 2 },
            LayerSpec::ReLU,
            LayerSpec::Conv2D { in_channels: 2, out_channels: 3, kernel: 3 },
            LayerSpec::MaxPool2D { kernel: 2 },
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 3 * 2 * 2, outputs: 6 },
            LayerSpec::ReLU,
            LayerSpec::Linear { inputs: 6, outputs: 3 },
            LayerSpec::Softmax,
        ],
        vec![1, 14, 14],
        3,
    )
    .unwrap();
    assert_gradients_match(&spec, 106, 3);
}
