//! Soft-margin RBF-kernel SVM trained with sequential minimal optimization.

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::l2_distance;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Training knobs. C and the stopping tolerance follow the common library
/// defaults; gamma is 1 / (d * Var(all features)) computed from the data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams { c: 1.0, tol: 1e-3, max_passes: 10_000 }
    }
}

/// Trained classifier: support vectors with their signed coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbfSvm {
    pub gamma: f64,
    pub bias: f64,
    support_vectors: Vec<Vec<f64>>,
    /// alpha_i * y_i for each support vector.
    coefficients: Vec<f64>,
}

impl RbfSvm {
    pub fn n_support(&self) -> usize {
        self.support_vectors.len()
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        let mut f = self.bias;
        for (sv, coef) in self.support_vectors.iter().zip(&self.coefficients) {
            let d = l2_distance(sv, x);
            f += coef * (-self.gamma * d * d).exp();
        }
        f
    }

    /// Hard {0,1} label.
    pub fn predict(&self, x: &[f64]) -> usize {
        usize::from(self.decision(x) >= 0.0)
    }
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d = l2_distance(a, b);
    (-gamma * d * d).exp()
}

/// gamma = 1 / (d * Var) with Var the population variance of every feature
/// value in the training matrix.
pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let d = x.first().map(|r| r.len()).unwrap_or(0);
    let n = (x.len() * d) as f64;
    if n == 0.0 {
        return 1.0;
    }
    let mean = x.iter().flat_map(|r| r.iter()).sum::<f64>() / n;
    let var = x.iter().flat_map(|r| r.iter()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 1e-12 {
        1.0 / (d as f64 * var)
    } else {
        1.0 / d as f64
    }
}

/// Train on {0,1}-labelled rows. Both classes must be present.
pub fn train_rbf_svm(x: &[Vec<f64>], labels: &[usize], params: &SvmParams) -> Result<RbfSvm> {
    if x.len() != labels.len() || x.is_empty() {
        return Err(Error::Input("svm needs one label per row".into()));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::Input("svm rows must share a dimension".into()));
    }
    if labels.iter().all(|l| *l == 0) || labels.iter().all(|l| *l != 0) {
        return Err(Error::Input("svm training needs both classes".into()));
    }
    let n = x.len();
    let y: Vec<f64> = labels.iter().map(|l| if *l == 0 { -1.0 } else { 1.0 }).collect();
    let gamma = scale_gamma(x);

    // full kernel matrix; the training sets here stay in the low thousands
    let kernel: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| rbf(&x[i], &x[j], gamma)).collect())
        .collect();

    let mut alpha = vec![0.0; n];
    let mut bias = 0.0;
    // error cache: E_i = f(x_i) - y_i; starts at -y with all alphas zero
    let mut errors: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut rng = derive_rng(0x5eed_5e11, "smo", n as u64);

    let c = params.c;
    let tol = params.tol;
    let mut examine_all = true;
    let mut passes = 0;
    loop {
        let mut changed = 0;
        let candidates: Vec<usize> = if examine_all {
            (0..n).collect()
        } else {
            (0..n).filter(|&i| alpha[i] > 0.0 && alpha[i] < c).collect()
        };
        for &i in &candidates {
            let r = errors[i] * y[i];
            let violates = (r < -tol && alpha[i] < c) || (r > tol && alpha[i] > 0.0);
            if !violates {
                continue;
            }
            // second-choice heuristic: maximize |E_i - E_j| over non-bound
            // points, falling back to a random partner
            let mut j = None;
            let mut best_gap = 0.0;
            for (k, &a) in alpha.iter().enumerate() {
                if k != i && a > 0.0 && a < c {
                    let gap = (errors[i] - errors[k]).abs();
                    if gap > best_gap {
                        best_gap = gap;
                        j = Some(k);
                    }
                }
            }
            let j = match j {
                Some(j) => j,
                None => {
                    let mut j = rng.gen_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    j
                }
            };
            if take_step(i, j, &kernel, &y, c, &mut alpha, &mut bias, &mut errors) {
                changed += 1;
            }
        }
        passes += 1;
        if passes >= params.max_passes {
            break;
        }
        if examine_all {
            if changed == 0 {
                // a clean full sweep means every point satisfies KKT
                break;
            }
            examine_all = false;
        } else if changed == 0 {
            examine_all = true;
        }
    }

    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for i in 0..n {
        if alpha[i] > 1e-12 {
            support_vectors.push(x[i].clone());
            coefficients.push(alpha[i] * y[i]);
        }
    }
    Ok(RbfSvm { gamma, bias, support_vectors, coefficients })
}

#[allow(clippy::too_many_arguments)]
fn take_step(
    i: usize,
    j: usize,
    kernel: &[Vec<f64>],
    y: &[f64],
    c: f64,
    alpha: &mut [f64],
    bias: &mut f64,
    errors: &mut [f64],
) -> bool {
    if i == j {
        return false;
    }
    let (ai_old, aj_old) = (alpha[i], alpha[j]);
    let (low, high) = if (y[i] - y[j]).abs() > f64::EPSILON {
        let diff = aj_old - ai_old;
        (diff.max(0.0), (c + diff).min(c))
    } else {
        let sum = ai_old + aj_old;
        ((sum - c).max(0.0), sum.min(c))
    };
    if (high - low).abs() < 1e-12 {
        return false;
    }
    let eta = kernel[i][i] + kernel[j][j] - 2.0 * kernel[i][j];
    if eta <= 1e-12 {
        return false;
    }
    let mut aj = aj_old + y[j] * (errors[i] - errors[j]) / eta;
    aj = aj.clamp(low, high);
    if (aj - aj_old).abs() < 1e-7 * (aj + aj_old + 1e-7) {
        return false;
    }
    let ai = ai_old + y[i] * y[j] * (aj_old - aj);
    let (di, dj) = (ai - ai_old, aj - aj_old);

    let b1 = *bias - errors[i] - y[i] * di * kernel[i][i] - y[j] * dj * kernel[i][j];
    let b2 = *bias - errors[j] - y[i] * di * kernel[i][j] - y[j] * dj * kernel[j][j];
    let new_bias = if ai > 0.0 && ai < c {
        b1
    } else if aj > 0.0 && aj < c {
        b2
    } else {
        (b1 + b2) / 2.0
    };
    let delta_bias = new_bias - *bias;
    alpha[i] = ai;
    alpha[j] = aj;
    *bias = new_bias;
    for k in 0..errors.len() {
        errors[k] += y[i] * di * kernel[i][k] + y[j] * dj * kernel[j][k] + delta_bias;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_opposite_points_separate() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let svm = train_rbf_svm(&x, &[1, 0], &SvmParams::default()).unwrap();
        assert_eq!(svm.predict(&x[0]), 1);
        assert_eq!(svm.predict(&x[1]), 0);
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(train_rbf_svm(&x, &[1, 1], &SvmParams::default()).is_err());
    }

    #[test]
    fn rbf_separates_xor_clusters() {
        // four blobs in XOR layout: linear models fail, RBF should not
        let mut x = Vec::new();
        let mut labels = Vec::new();
        let mut rng = derive_rng(4, "xor", 0);
        for _ in 0..40 {
            let (cx, cy) = ([(2.0, 2.0), (-2.0, -2.0), (2.0, -2.0), (-2.0, 2.0)])[rng.gen_range(0..4)];
            let label = usize::from(cx * cy > 0.0);
            x.push(vec![cx + rng.gen_range(-0.3..0.3), cy + rng.gen_range(-0.3..0.3)]);
            labels.push(label);
        }
        let svm = train_rbf_svm(&x, &labels, &SvmParams::default()).unwrap();
        let correct = x
            .iter()
            .zip(&labels)
            .filter(|(xi, yi)| svm.predict(xi) == **yi)
            .count();
        assert!(
            correct as f64 / x.len() as f64 >= 0.9,
            "training accuracy {}/{}",
            correct,
            x.len()
        );
    }

    #[test]
    fn duplicating_every_example_keeps_predictions() {
        let mut x = Vec::new();
        let mut labels = Vec::new();
        let mut rng = derive_rng(9, "dup", 0);
        for i in 0..30 {
            let label = i % 2;
            let center = if label == 0 { -1.5 } else { 1.5 };
            x.push(vec![center + rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)]);
            labels.push(label);
        }
        let base = train_rbf_svm(&x, &labels, &SvmParams::default()).unwrap();
        let mut x2 = x.clone();
        x2.extend(x.iter().cloned());
        let mut labels2 = labels.clone();
        labels2.extend(labels.iter().cloned());
        let doubled = train_rbf_svm(&x2, &labels2, &SvmParams::default()).unwrap();
        for xi in &x {
            assert_eq!(base.predict(xi), doubled.predict(xi));
        }
    }
}
