//! SGD-with-momentum and Adam over flat parameter vectors.

use serde::{Deserialize, Serialize};

/// Optimizer rule and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Heavy-ball momentum: v <- m*v + g; w <- w - lr*v.
    SgdMomentum { lr: f64, momentum: f64 },
    /// Adam with weight decay added to the gradient as an L2 term.
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    /// The local-training recipe shared by FL clients and pre-trained models.
    pub fn local_sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum }
    }

    /// Adam with standard betas/eps; only lr and weight decay vary.
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Mutable optimizer state: auxiliary buffers mirroring the flat parameter
/// vector plus a step counter. Owned by exactly one worker at a time.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    buf1: Vec<f64>,
    buf2: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let buf2 = match kind {
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
            OptimizerKind::Adam { .. } => vec![0.0; n_params],
        };
        OptimizerState { kind, step_count: 0, buf1: vec![0.0; n_params], buf2 }
    }

    /// Apply one update in place. `grad` must mirror `params` in length.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.buf1.len());
        self.step_count += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for i in 0..params.len() {
                    self.buf1[i] = momentum * self.buf1[i] + grad[i];
                    params[i] -= lr * self.buf1[i];
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps, weight_decay } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i] + weight_decay * params[i];
                    self.buf1[i] = beta1 * self.buf1[i] + (1.0 - beta1) * g;
                    self.buf2[i] = beta2 * self.buf2[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.buf1[i] / bc1;
                    let v_hat = self.buf2[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut opt = OptimizerState::new(OptimizerKind::local_sgd(0.01, 0.0), 1);
        let mut w = [1.0];
        opt.step(&mut w, &[1.0]);
        assert!((w[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = OptimizerState::new(OptimizerKind::local_sgd(0.01, 0.9), 3);
        let mut w = [1.0, -2.0, 0.5];
        opt.step(&mut w, &[0.0; 3]);
        opt.step(&mut w, &[0.0; 3]);
        assert_eq!(w, [1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count, 2);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // v1 = g = 1, w = 1 - 0.1; v2 = 0.9*1 + 1 = 1.9, w -= 0.1*1.9
        let mut opt = OptimizerState::new(OptimizerKind::local_sgd(0.1, 0.9), 1);
        let mut w = [1.0];
        opt.step(&mut w, &[1.0]);
        opt.step(&mut w, &[1.0]);
        assert!((w[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    /// Hand-rolled scalar Adam recurrence as an independent reference.
    fn adam_reference(w0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (t, g0) in grads.iter().enumerate() {
            let g = g0 + wd * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        w
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // two steps on f(w) = w^2/2 (gradient = w), with weight decay
        let lr = 0.0001;
        let wd = 0.1;
        let mut opt = OptimizerState::new(OptimizerKind::adam(lr, wd), 1);
        let mut w = [0.7];
        let g1 = w[0];
        opt.step(&mut w, &[g1]);
        let g2 = w[0];
        opt.step(&mut w, &[g2]);

        // reference recomputes the same trajectory
        let mut grads = Vec::new();
        let mut wr = 0.7;
        for _ in 0..2 {
            grads.push(wr);
            wr = adam_reference(0.7, &grads, lr, wd);
        }
        assert!((w[0] - wr).abs() < 1e-15, "{} vs {}", w[0], wr);
    }
}
