//! Subject-structured datasets: synthetic generation, LEAF FEMNIST digit
//! ingestion, target-subject splitting, and the fresh-subject ledger.

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{l2_distance, Tensor};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

/// Opaque identifier of the entity that produced a data point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubjectId(pub String);

impl SubjectId {
    pub fn synthetic(i: usize) -> Self {
        SubjectId(format!("subject-{i:03}"))
    }
}

impl std::fmt::Display for SubjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// One labelled example tagged with its subject of origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub features: Tensor,
    pub label: usize,
    pub subject: SubjectId,
}

/// Data points grouped by subject identity; the unit of auditing.
#[derive(Debug, Clone)]
pub struct SubjectDataset {
    subjects: IndexMap<SubjectId, Vec<DataPoint>>,
    pub feature_shape: Vec<usize>,
    pub num_classes: usize,
}

impl SubjectDataset {
    pub fn new(feature_shape: Vec<usize>, num_classes: usize) -> Self {
        SubjectDataset { subjects: IndexMap::new(), feature_shape, num_classes }
    }

    pub fn insert(&mut self, point: DataPoint) -> Result<()> {
        if point.features.shape != self.feature_shape {
            return Err(Error::Data(format!(
                "point shape {:?} does not match dataset shape {:?}",
                point.features.shape, self.feature_shape
            )));
        }
        self.subjects.entry(point.subject.clone()).or_default().push(point);
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_points(&self) -> usize {
        self.subjects.values().map(Vec::len).sum()
    }

    pub fn subject_ids(&self) -> impl Iterator<Item = &SubjectId> {
        self.subjects.keys()
    }

    pub fn points(&self, subject: &SubjectId) -> Option<&[DataPoint]> {
        self.subjects.get(subject).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SubjectId, &[DataPoint])> {
        self.subjects.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Subjects with at least `min_points` points, in original order.
    pub fn filter_min_points(&self, min_points: usize) -> SubjectDataset {
        let subjects = self
            .subjects
            .iter()
            .filter(|(_, pts)| pts.len() >= min_points)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        SubjectDataset { subjects, feature_shape: self.feature_shape.clone(), num_classes: self.num_classes }
    }
}

/// Stack points into a `[n, ...feature_shape]` batch plus labels.
pub fn to_batch(points: &[DataPoint]) -> Result<(Tensor, Vec<usize>)> {
    let first = points.first().ok_or_else(|| Error::Input("empty point list".into()))?;
    let mut shape = vec![points.len()];
    shape.extend_from_slice(&first.features.shape);
    let mut data = Vec::with_capacity(points.len() * first.features.len());
    let mut labels = Vec::with_capacity(points.len());
    for p in points {
        if p.features.shape != first.features.shape {
            return Err(Error::Input("mixed feature shapes in batch".into()));
        }
        data.extend_from_slice(&p.features.data);
        labels.push(p.label);
    }
    Ok((Tensor::new(shape, data)?, labels))
}

/// XOR over indicators of x_i >= 0.
pub fn xor_label(x: &[f64]) -> usize {
    x.iter().fold(0usize, |acc, v| acc ^ usize::from(*v >= 0.0))
}

/// Synthetic generation parameters (also the bundle manifest contents).
/// The default mean range reproduces the reported target-to-random input
/// feature distances (about 14 at 60 features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub pts_per_subject: usize,
    pub dim: usize,
    pub min_sep: f64,
    /// Subject means are uniform in [-mean_range, mean_range]^dim.
    pub mean_range: f64,
    /// Covariance = cov_scale * (A A^T / dim + 0.1 I).
    pub cov_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 200,
            pts_per_subject: 400,
            dim: 60,
            min_sep: 0.35,
            mean_range: 2.5,
            cov_scale: 0.25,
            seed: 0,
        }
    }
}

const MEAN_RETRY_BUDGET: usize = 10_000;

/// Draw subject means uniformly from [-range,range]^dim, rejecting any mean
/// closer than `min_sep` (L2) to an earlier one.
fn gen_means(n_subjects: usize, dim: usize, min_sep: f64, range: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = derive_rng(seed, "synthetic-means", 0);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let mut attempts = 0;
        loop {
            let candidate: Vec<f64> = (0..dim).map(|_| rng.gen_range(-range..=range)).collect();
            if means.iter().all(|m| l2_distance(m, &candidate) > min_sep) {
                means.push(candidate);
                break;
            }
            attempts += 1;
            if attempts >= MEAN_RETRY_BUDGET {
                return Err(Error::Generation(format!(
                    "could not place mean for subject {s} after {MEAN_RETRY_BUDGET} attempts"
                )));
            }
        }
    }
    Ok(means)
}

/// Random well-conditioned covariance: scale * (A A^T / dim + 0.1 I) with A
/// standard normal. Row-major dim x dim.
fn gen_covariance<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    let a: Vec<f64> = (0..dim * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut cov = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += a[i * dim + k] * a[j * dim + k];
            }
            let mut v = scale * (acc / dim as f64);
            if i == j {
                v += scale * 0.1;
            }
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    cov
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky(mat: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut acc = mat[i * dim + j];
            for k in 0..j {
                acc -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::Generation("covariance is not positive definite".into()));
                }
                l[i * dim + j] = acc.sqrt();
            } else {
                l[i * dim + j] = acc / l[j * dim + j];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
pub(crate) fn gen_covariance_for_test(seed: u64, subject: usize, dim: usize) -> Vec<f64> {
    gen_covariance(&mut derive_rng(seed, "synthetic-subject", subject as u64), dim, 0.25)
}

/// Generate the subject-per-Gaussian synthetic dataset. Each subject has its
/// own mean/covariance; labels come from [`xor_label`]. Seed-deterministic
/// end to end, with per-subject RNG streams so worker order cannot matter.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SubjectDataset> {
    let means = gen_means(cfg.n_subjects, cfg.dim, cfg.min_sep, cfg.mean_range, cfg.seed)?;
    let dim = cfg.dim;
    let per_subject: Vec<Vec<DataPoint>> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|s| {
            let mut rng = derive_rng(cfg.seed, "synthetic-subject", s as u64);
            let cov = gen_covariance(&mut rng, dim, cfg.cov_scale);
            let chol = cholesky(&cov, dim)?;
            let id = SubjectId::synthetic(s);
            let mean = &means[s];
            let mut pts = Vec::with_capacity(cfg.pts_per_subject);
            for _ in 0..cfg.pts_per_subject {
                let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut x = mean.clone();
                for i in 0..dim {
                    let mut acc = 0.0;
                    for k in 0..=i {
                        acc += chol[i * dim + k] * z[k];
                    }
                    x[i] += acc;
                }
                let label = xor_label(&x);
                pts.push(DataPoint {
                    features: Tensor::from_vec(x),
                    label,
                    subject: id.clone(),
                });
            }
            Ok(pts)
        })
        .collect::<Result<_>>()?;

    let mut ds = SubjectDataset::new(vec![dim], 2);
    for pts in per_subject {
        for p in pts {
            ds.insert(p)?;
        }
    }
    Ok(ds)
}

/// Disjoint split of one subject's points into pre-train / eval / FL shares.
#[derive(Debug, Clone)]
pub struct SubjectSplit {
    pub pretrain: Vec<DataPoint>,
    pub eval: Vec<DataPoint>,
    pub fl: Vec<DataPoint>,
}

/// Seed-deterministic disjoint split honoring `fractions` (pretrain, eval,
/// fl) with largest-remainder rounding.
pub fn split_target_subject(
    dataset: &SubjectDataset,
    subject: &SubjectId,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SubjectSplit> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Input(format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let points = dataset
        .points(subject)
        .ok_or_else(|| Error::Input(format!("unknown subject {subject}")))?;
    let n = points.len();

    // floor sizes, then hand out the remainder by largest fractional part
    let mut sizes = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    for (i, f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        sizes[i] = exact.floor() as usize;
        remainders.push((i, exact - exact.floor()));
    }
    let mut left = n - sizes.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if fractions.iter().zip(&sizes).any(|(f, s)| *f > 0.0 && *s == 0) {
        return Err(Error::Input(format!(
            "subject {subject} has too few points ({n}) for split {fractions:?}"
        )));
    }

    let mut shuffled: Vec<DataPoint> = points.to_vec();
    shuffled.shuffle(&mut derive_rng(seed, "subject-split", 0));
    let eval_start = sizes[0];
    let fl_start = sizes[0] + sizes[1];
    Ok(SubjectSplit {
        pretrain: shuffled[..eval_start].to_vec(),
        eval: shuffled[eval_start..fl_start].to_vec(),
        fl: shuffled[fl_start..].to_vec(),
    })
}

/// Tracks which subjects a run has consumed so that the target subject,
/// pre-training subjects, and FL filler subjects stay mutually disjoint.
#[derive(Debug, Clone)]
pub struct SubjectLedger {
    available: Vec<SubjectId>,
}

impl SubjectLedger {
    /// All subjects of `dataset` except `reserved` (typically the target).
    pub fn new(dataset: &SubjectDataset, reserved: &[SubjectId]) -> Self {
        let available = dataset
            .subject_ids()
            .filter(|s| !reserved.contains(s))
            .cloned()
            .collect();
        SubjectLedger { available }
    }

    pub fn remaining(&self) -> usize {
        self.available.len()
    }

    /// Remove and return a uniformly chosen fresh subject.
    pub fn draw_fresh<R: Rng>(&mut self, rng: &mut R) -> Result<SubjectId> {
        if self.available.is_empty() {
            return Err(Error::Assignment("subject ledger exhausted".into()));
        }
        let idx = rng.gen_range(0..self.available.len());
        Ok(self.available.swap_remove(idx))
    }
}

// ---------------------------------------------------------------------------
// LEAF FEMNIST ingestion
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct LeafShard {
    users: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    num_samples: Vec<usize>,
    user_data: serde_json::Map<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct LeafUser {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

/// Load LEAF-format FEMNIST shards (a single JSON file or a directory of
/// them, read one at a time). One subject per LEAF user; features reshaped
/// to 1x28x28. With `digits_only`, points with labels outside 0..=9 are
/// dropped.
pub fn load_leaf_femnist(path: &Path, digits_only: bool) -> Result<SubjectDataset> {
    let mut shard_files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "json") {
                shard_files.push(p);
            }
        }
        shard_files.sort();
    } else {
        shard_files.push(path.to_path_buf());
    }
    if shard_files.is_empty() {
        return Err(Error::Data(format!("no LEAF shards found under {}", path.display())));
    }

    let num_classes = if digits_only { 10 } else { 62 };
    let mut ds = SubjectDataset::new(vec![1, 28, 28], num_classes);
    for shard_path in shard_files {
        let shard_name = shard_path.display().to_string();
        let reader = BufReader::new(File::open(&shard_path)?);
        let shard: LeafShard = serde_json::from_reader(reader).map_err(|e| Error::Parse {
            shard: shard_name.clone(),
            detail: e.to_string(),
        })?;
        for user in &shard.users {
            let raw = shard.user_data.get(user).ok_or_else(|| Error::Parse {
                shard: shard_name.clone(),
                detail: format!("user {user} listed but missing from user_data"),
            })?;
            let parsed: LeafUser =
                serde_json::from_value(raw.clone()).map_err(|e| Error::Parse {
                    shard: shard_name.clone(),
                    detail: format!("user {user}: {e}"),
                })?;
            if parsed.x.len() != parsed.y.len() {
                return Err(Error::Parse {
                    shard: shard_name.clone(),
                    detail: format!("user {user}: {} features vs {} labels", parsed.x.len(), parsed.y.len()),
                });
            }
            let subject = SubjectId(user.clone());
            let mut kept = 0;
            for (features, label) in parsed.x.iter().zip(&parsed.y) {
                if features.len() != 784 {
                    return Err(Error::Parse {
                        shard: shard_name.clone(),
                        detail: format!("user {user}: feature length {} != 784", features.len()),
                    });
                }
                let label = label.round() as i64;
                if label < 0 || (digits_only && label > 9) || label >= num_classes as i64 {
                    if digits_only {
                        continue;
                    }
                    return Err(Error::Parse {
                        shard: shard_name.clone(),
                        detail: format!("user {user}: label {label} out of range"),
                    });
                }
                ds.insert(DataPoint {
                    features: Tensor::new(vec![1, 28, 28], features.clone())?,
                    label: label as usize,
                    subject: subject.clone(),
                })?;
                kept += 1;
            }
            if kept == 0 {
                log::warn!("skipping user {user} in {shard_name}: no usable points");
            }
        }
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic bundle export/import
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    config: SyntheticConfig,
    n_points: usize,
}

/// Write a generated synthetic dataset as `manifest.json` + `points.csv`
/// under `dir`.
pub fn save_synthetic_bundle(ds: &SubjectDataset, cfg: &SyntheticConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = BundleManifest { version: 1, config: cfg.clone(), n_points: ds.total_points() };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut csv = String::new();
    csv.push_str("subject,label");
    for i in 0..cfg.dim {
        csv.push_str(&format!(",f{i}"));
    }
    csv.push('\n');
    for (id, pts) in ds.iter() {
        for p in pts {
            csv.push_str(&format!("{},{}", id, p.label));
            for v in &p.features.data {
                // {:e} keeps the full round-trip precision of each f64
                csv.push_str(&format!(",{v:e}"));
            }
            csv.push('\n');
        }
    }
    std::fs::write(dir.join("points.csv"), csv)?;
    Ok(())
}

/// Load a bundle written by [`save_synthetic_bundle`].
pub fn load_synthetic_bundle(dir: &Path) -> Result<(SubjectDataset, SyntheticConfig)> {
    let manifest: BundleManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let text = std::fs::read_to_string(dir.join("points.csv"))?;
    let mut ds = SubjectDataset::new(vec![manifest.config.dim], 2);
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let subject = fields.next().ok_or_else(|| Error::Data(format!("line {lineno}: missing subject")))?;
        let label: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Data(format!("line {lineno}: bad label")))?;
        let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse).collect();
        let values = values.map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        if values.len() != manifest.config.dim {
            return Err(Error::Data(format!("line {lineno}: expected {} features", manifest.config.dim)));
        }
        ds.insert(DataPoint {
            features: Tensor::from_vec(values),
            label,
            subject: SubjectId(subject.to_string()),
        })?;
    }
    if ds.total_points() != manifest.n_points {
        return Err(Error::Data(format!(
            "bundle has {} points, manifest says {}",
            ds.total_points(),
            manifest.n_points
        )));
    }
    Ok((ds, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SyntheticConfig {
        SyntheticConfig { n_subjects: 12, pts_per_subject: 60, dim: 60, min_sep: 0.35, mean_range: 2.0, cov_scale: 0.25, seed }
    }

    #[test]
    fn xor_label_cases() {
        assert_eq!(xor_label(&[-1.0, -2.0, -0.5]), 0);
        assert_eq!(xor_label(&[-1.0, 3.0, -0.5]), 1);
        assert_eq!(xor_label(&[0.5, -0.2, 0.1]), 0); // indicators (1,0,1)
        assert_eq!(xor_label(&[0.0]), 1); // boundary counts as >= 0
    }

    #[test]
    fn synthetic_means_respect_separation() {
        let cfg = small_cfg(7);
        let means = gen_means(cfg.n_subjects, cfg.dim, cfg.min_sep, cfg.mean_range, cfg.seed).unwrap();
        for i in 0..means.len() {
            for j in 0..i {
                assert!(l2_distance(&means[i], &means[j]) > cfg.min_sep);
            }
        }
    }

    #[test]
    fn synthetic_labels_match_xor_rederivation() {
        let ds = gen_synthetic(&small_cfg(3)).unwrap();
        for (_, pts) in ds.iter() {
            for p in pts {
                assert_eq!(p.label, xor_label(&p.features.data));
            }
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = gen_synthetic(&small_cfg(5)).unwrap();
        let b = gen_synthetic(&small_cfg(5)).unwrap();
        for ((ida, pa), (idb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(ida, idb);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn synthetic_covariances_are_positive_definite() {
        // Cholesky succeeding certifies all eigenvalues > 0
        for s in 0..8 {
            let cov = gen_covariance_for_test(11, s, 60);
            for i in 0..60 {
                for j in 0..60 {
                    assert_eq!(cov[i * 60 + j], cov[j * 60 + i]);
                }
            }
            cholesky(&cov, 60).unwrap();
        }
    }

    #[test]
    fn synthetic_subjects_see_both_labels() {
        // statistical check: with >= 50 points per subject both classes occur
        let ds = gen_synthetic(&small_cfg(17)).unwrap();
        for (id, pts) in ds.iter() {
            assert!(pts.len() >= 50);
            let ones = pts.iter().filter(|p| p.label == 1).count();
            assert!(ones > 0 && ones < pts.len(), "subject {id} has constant labels");
        }
    }

    #[test]
    fn split_honors_default_fractions() {
        let mut ds = SubjectDataset::new(vec![2], 2);
        let id = SubjectId::synthetic(0);
        for i in 0..400 {
            ds.insert(DataPoint {
                features: Tensor::from_vec(vec![i as f64, 0.0]),
                label: 0,
                subject: id.clone(),
            })
            .unwrap();
        }
        let split = split_target_subject(&ds, &id, [0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!(split.pretrain.len(), 200);
        assert_eq!(split.eval.len(), 100);
        assert_eq!(split.fl.len(), 100);

        // disjointness and coverage over the feature key
        let mut seen: Vec<i64> = split
            .pretrain
            .iter()
            .chain(&split.eval)
            .chain(&split.fl)
            .map(|p| p.features.data[0] as i64)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 400);

        let again = split_target_subject(&ds, &id, [0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!(split.pretrain, again.pretrain);
        assert_eq!(split.fl, again.fl);
    }

    #[test]
    fn split_rejects_bad_fractions_and_tiny_subjects() {
        let mut ds = SubjectDataset::new(vec![1], 2);
        let id = SubjectId::synthetic(0);
        ds.insert(DataPoint { features: Tensor::from_vec(vec![0.0]), label: 0, subject: id.clone() })
            .unwrap();
        assert!(split_target_subject(&ds, &id, [0.5, 0.25, 0.3], 0).is_err());
        // one point cannot produce three non-empty shares
        assert!(split_target_subject(&ds, &id, [0.5, 0.25, 0.25], 0).is_err());
    }

    #[test]
    fn filter_min_points_behaves() {
        let ds = gen_synthetic(&small_cfg(1)).unwrap();
        assert_eq!(ds.filter_min_points(0).n_subjects(), ds.n_subjects());
        assert_eq!(ds.filter_min_points(60).n_subjects(), ds.n_subjects());
        assert_eq!(ds.filter_min_points(61).n_subjects(), 0);
    }

    #[test]
    fn ledger_never_repeats_subjects() {
        let ds = gen_synthetic(&small_cfg(2)).unwrap();
        let target = SubjectId::synthetic(0);
        let mut ledger = SubjectLedger::new(&ds, std::slice::from_ref(&target));
        let mut rng = derive_rng(0, "ledger", 0);
        let mut drawn = Vec::new();
        while ledger.remaining() > 0 {
            drawn.push(ledger.draw_fresh(&mut rng).unwrap());
        }
        assert_eq!(drawn.len(), 11);
        assert!(!drawn.contains(&target));
        let mut unique = drawn.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), drawn.len());
        assert!(ledger.draw_fresh(&mut rng).is_err());
    }

    #[test]
    fn bundle_round_trips_exactly() {
        let cfg = small_cfg(23);
        let ds = gen_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_synthetic_bundle(&ds, &cfg, dir.path()).unwrap();
        let (back, cfg2) = load_synthetic_bundle(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(back.total_points(), ds.total_points());
        for ((ida, pa), (idb, pb)) in ds.iter().zip(back.iter()) {
            assert_eq!(ida, idb);
            assert_eq!(pa, pb);
        }
    }
}
