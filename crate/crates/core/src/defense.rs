//! Item-level and subject-level differential privacy for local training,
//! plus an RDP accountant for the subsampled Gaussian mechanism.

use crate::data::SubjectId;
use crate::engine::GradientRecord;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Privacy unit: a single sample, or all samples of one subject
/// (implemented by hierarchical gradient averaging).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpLevel {
    Item,
    Subject,
}

/// Clipping / noise configuration for private local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPConfig {
    /// L2 clipping bound C.
    pub clip: f64,
    /// Noise multiplier sigma.
    pub noise_multiplier: f64,
    pub delta: f64,
    pub level: DpLevel,
    pub expected_batch_size: usize,
}

impl Default for DPConfig {
    fn default() -> Self {
        DPConfig {
            clip: 1.0,
            noise_multiplier: 0.5,
            delta: 1e-5,
            level: DpLevel::Subject,
            expected_batch_size: 12,
        }
    }
}

impl DPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip <= 0.0 {
            return Err(Error::Config("dp clip bound must be positive".into()));
        }
        if self.noise_multiplier < 0.0 {
            return Err(Error::Config("dp noise multiplier must be non-negative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("dp delta must lie in (0, 1)".into()));
        }
        if self.expected_batch_size == 0 {
            return Err(Error::Config("dp expected batch size must be positive".into()));
        }
        Ok(())
    }
}

/// (epsilon, delta) spent after `steps` subsampled Gaussian steps at rate `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub epsilon: f64,
    pub delta: f64,
    pub steps: u64,
    pub sampling_rate: f64,
}

/// Scale each gradient by min(1, C / ||g||2).
pub fn clip_gradients(records: &[GradientRecord], clip: f64) -> Vec<GradientRecord> {
    records
        .iter()
        .map(|r| {
            let scale = if r.norm > clip { clip / r.norm } else { 1.0 };
            let mut clipped =
                GradientRecord::new(r.values.iter().map(|v| v * scale).collect());
            clipped.subject = r.subject.clone();
            clipped
        })
        .collect()
}

/// (sum of rows + N(0, noise_std^2 I)) / rows.len(), in fixed row order.
fn noisy_mean<R: Rng>(rows: Vec<Vec<f64>>, noise_std: f64, rng: &mut R) -> GradientRecord {
    let n = rows.len();
    let dim = rows[0].len();
    let mut sum = vec![0.0; dim];
    for row in &rows {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    if noise_std > 0.0 {
        for s in sum.iter_mut() {
            *s += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for s in sum.iter_mut() {
        *s /= n as f64;
    }
    GradientRecord::new(sum)
}

/// Item-level DP step: clip every per-sample gradient to C, then release
/// (sum + N(0, sigma^2 C^2 I)) / B.
pub fn dp_step_item<R: Rng>(
    records: &[GradientRecord],
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<GradientRecord> {
    if records.is_empty() {
        return Err(Error::Input("dp step on empty batch".into()));
    }
    let clipped = clip_gradients(records, clip);
    Ok(noisy_mean(clipped.into_iter().map(|r| r.values).collect(), sigma * clip, rng))
}

/// Subject-level DP step (hierarchical gradient averaging): average the
/// per-sample gradients of each subject in the batch, clip each subject
/// mean to C, average the S subject gradients, and add N(0, sigma^2 C^2)/S.
pub fn dp_step_subject<R: Rng>(
    records: &[GradientRecord],
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<GradientRecord> {
    if records.is_empty() {
        return Err(Error::Input("dp step on empty batch".into()));
    }
    // group in first-occurrence order so results do not depend on map order
    let mut order: Vec<&SubjectId> = Vec::new();
    let mut groups: Vec<(Vec<f64>, usize)> = Vec::new();
    for rec in records {
        let subject = rec
            .subject
            .as_ref()
            .ok_or_else(|| Error::Input("subject-level dp needs subject ids on gradients".into()))?;
        match order.iter().position(|s| *s == subject) {
            Some(i) => {
                for (acc, v) in groups[i].0.iter_mut().zip(&rec.values) {
                    *acc += v;
                }
                groups[i].1 += 1;
            }
            None => {
                order.push(subject);
                groups.push((rec.values.clone(), 1));
            }
        }
    }
    let subject_means: Vec<GradientRecord> = groups
        .into_iter()
        .map(|(mut sum, count)| {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
            GradientRecord::new(sum)
        })
        .collect();
    let clipped = clip_gradients(&subject_means, clip);
    Ok(noisy_mean(clipped.into_iter().map(|r| r.values).collect(), sigma * clip, rng))
}

/// Expected number of distinct subjects in a uniform without-replacement
/// batch of `batch` points, given per-subject point counts.
pub fn expected_distinct_subjects(counts: &[usize], batch: usize) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || batch == 0 {
        return 0.0;
    }
    let batch = batch.min(total);
    counts
        .iter()
        .map(|&n_s| {
            if total - n_s < batch {
                return 1.0;
            }
            // P(subject absent) = prod_{i=0}^{batch-1} (total-n_s-i)/(total-i)
            let mut p_absent = 1.0;
            for i in 0..batch {
                p_absent *= (total - n_s - i) as f64 / (total - i) as f64;
            }
            1.0 - p_absent
        })
        .sum()
}

/// Subject-sampling rate for subject-level accounting:
/// E[distinct subjects per batch] / total subjects in the dataset.
pub fn subject_sampling_rate(counts: &[usize], batch: usize) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    (expected_distinct_subjects(counts, batch) / counts.len() as f64).min(1.0)
}

// Integer RDP orders: a dense low range plus a geometric tail so that both
// high-noise and low-noise regimes find a good order.
fn alpha_grid() -> Vec<u64> {
    let mut grid: Vec<u64> = (2..=256).collect();
    grid.extend([384, 512, 768, 1024, 1536, 2048, 3072, 4096, 6144, 8192]);
    grid
}

/// RDP of the Poisson-subsampled Gaussian mechanism at integer order alpha,
/// via the binomial expansion upper bound:
/// (1/(alpha-1)) * ln sum_k C(alpha,k) (1-q)^(alpha-k) q^k e^(k(k-1)/(2 sigma^2)).
fn rdp_subsampled_gaussian(alpha: u64, q: f64, sigma: f64) -> f64 {
    if q >= 1.0 {
        // plain Gaussian mechanism
        return alpha as f64 / (2.0 * sigma * sigma);
    }
    let a = alpha as f64;
    let ln_q = q.ln();
    let ln_1q = (1.0 - q).ln();
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    let mut ln_binom = 0.0; // ln C(alpha, 0)
    for k in 0..=alpha {
        let kf = k as f64;
        terms.push(ln_binom + kf * ln_q + (a - kf) * ln_1q + kf * (kf - 1.0) / (2.0 * sigma * sigma));
        if k < alpha {
            ln_binom += ((a - kf) / (kf + 1.0)).ln();
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_a: f64 = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    log_a / (a - 1.0)
}

/// Compose `steps` subsampled Gaussian steps at sampling rate `q` and noise
/// multiplier `sigma`, and convert to (epsilon, delta):
/// epsilon = min_alpha steps * RDP(alpha) + ln(1/delta) / (alpha - 1).
pub fn account_epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<PrivacySpent> {
    if !(q >= 0.0 && q <= 1.0) {
        return Err(Error::Input(format!("sampling rate {q} out of [0,1]")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta {delta} out of (0,1)")));
    }
    if sigma == 0.0 {
        return Ok(PrivacySpent { epsilon: f64::INFINITY, delta, steps, sampling_rate: q });
    }
    if q == 0.0 || steps == 0 {
        return Ok(PrivacySpent { epsilon: 0.0, delta, steps, sampling_rate: q });
    }
    let ln_inv_delta = (1.0 / delta).ln();
    let epsilon = alpha_grid()
        .into_iter()
        .map(|alpha| {
            steps as f64 * rdp_subsampled_gaussian(alpha, q, sigma)
                + ln_inv_delta / (alpha as f64 - 1.0)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(PrivacySpent { epsilon, delta, steps, sampling_rate: q })
}
