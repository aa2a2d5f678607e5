//! Experiment configuration and validation.

use serde::{Deserialize, Serialize};
use slsia_core::attack::PretrainPlan;
use slsia_core::data::{SubjectDataset, SyntheticConfig};
use slsia_core::error::{Error, Result};
use slsia_core::fl::FLConfig;
use slsia_core::net::{cnn_spec, mlp_spec, NetworkSpec};
use std::path::PathBuf;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Which dataset a run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Femnist { path: PathBuf, digits_only: bool },
}

/// Task model family. The default pairing is MLP for synthetic data and
/// CNN for FEMNIST digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

impl ModelKind {
    pub fn build_spec(&self, feature_dim: usize, num_classes: usize) -> NetworkSpec {
        match self {
            ModelKind::Mlp => mlp_spec(feature_dim, 200, num_classes),
            ModelKind::Cnn => cnn_spec(num_classes),
        }
    }

    /// Embedding tap points in reporting order ("layer 0", "layer 1", ...),
    /// as engine layer indices. The last two taps of each model are the
    /// logits and the softmax confidence scores.
    pub fn taps(&self) -> Vec<usize> {
        match self {
            // linear-0 output, logits, confidences
            ModelKind::Mlp => vec![0, 2, 3],
            // conv block 1, conv block 2, fc1, fc2, logits, confidences
            ModelKind::Cnn => vec![2, 5, 8, 10, 11, 12],
        }
    }

    /// Default reported tap: "layer 0" for the MLP (first linear output),
    /// "layer 1" for the CNN (flattened second conv block).
    pub fn default_tap(&self) -> usize {
        match self {
            ModelKind::Mlp => 0,
            ModelKind::Cnn => 1,
        }
    }
}

/// Which attack / baseline methods to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSelection {
    Conv,
    Svm,
    AvgLoss,
    MinLossTime,
    All,
}

impl AttackSelection {
    pub fn wants_conv(&self) -> bool {
        matches!(self, AttackSelection::Conv | AttackSelection::All)
    }
    pub fn wants_svm(&self) -> bool {
        matches!(self, AttackSelection::Svm | AttackSelection::All)
    }
    pub fn wants_avg_loss(&self) -> bool {
        matches!(self, AttackSelection::AvgLoss | AttackSelection::All)
    }
    pub fn wants_min_loss_time(&self) -> bool {
        matches!(self, AttackSelection::MinLossTime | AttackSelection::All)
    }
}

/// Target subjects: a sampled count or an explicit id list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectSelection {
    Count(usize),
    Explicit(Vec<String>),
}

/// Full description of one experiment; serializes round-trip exactly and is
/// embedded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelKind,
    pub fl: FLConfig,
    pub pretrain: PretrainPlan,
    pub attack: AttackSelection,
    /// Reported tap index into the model's tap list.
    pub layer_tap: usize,
    /// Optional raw engine layer index overriding `layer_tap` (for probing
    /// taps outside the reported list, e.g. post-activation outputs).
    pub raw_layer_tap: Option<usize>,
    /// (pretrain, eval, fl) fractions of the target subject's points.
    pub split_fractions: [f64; 3],
    /// Drop subjects with fewer points than this; 0 picks the smallest
    /// count the split fractions can serve.
    pub min_subject_points: usize,
    pub subjects: SubjectSelection,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub export_embeddings: bool,
    pub save_params: bool,
}

impl ExperimentConfig {
    pub fn default_synthetic() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetConfig::Synthetic(SyntheticConfig::default()),
            model: ModelKind::Mlp,
            fl: FLConfig::default(),
            pretrain: PretrainPlan::default(),
            attack: AttackSelection::All,
            layer_tap: ModelKind::Mlp.default_tap(),
            raw_layer_tap: None,
            split_fractions: [0.5, 0.25, 0.25],
            min_subject_points: 0,
            subjects: SubjectSelection::Count(10),
            seed: 0,
            output_dir: PathBuf::from("runs/synthetic"),
            export_embeddings: false,
            save_params: false,
        }
    }

    pub fn default_femnist(path: PathBuf) -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Femnist { path, digits_only: true },
            model: ModelKind::Cnn,
            layer_tap: ModelKind::Cnn.default_tap(),
            output_dir: PathBuf::from("runs/femnist"),
            ..ExperimentConfig::default_synthetic()
        }
    }

    /// Engine layer index of the configured tap.
    pub fn resolve_tap(&self) -> Result<usize> {
        if let Some(raw) = self.raw_layer_tap {
            return Ok(raw);
        }
        self.model
            .taps()
            .get(self.layer_tap)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "layer_tap {} out of range: model has {} taps",
                    self.layer_tap,
                    self.model.taps().len()
                ))
            })
    }

    /// Smallest subject size the split fractions can serve.
    pub fn effective_min_points(&self) -> usize {
        if self.min_subject_points > 0 {
            return self.min_subject_points;
        }
        let min_frac = self
            .split_fractions
            .iter()
            .cloned()
            .filter(|f| *f > 0.0)
            .fold(f64::INFINITY, f64::min);
        if min_frac.is_finite() {
            (1.0 / min_frac).ceil() as usize
        } else {
            1
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Fresh subjects one run consumes: pre-training draws plus FL filler.
pub fn subject_demand(cfg: &ExperimentConfig, pts_per_subject: usize) -> usize {
    let fl_share = (pts_per_subject as f64 * cfg.split_fractions[2]).round().max(1.0);
    let client_total = (fl_share / cfg.fl.target_rate).round() as usize;
    let filler_pts = client_total.saturating_sub(fl_share as usize);
    let per_target = filler_pts.div_ceil(pts_per_subject.max(1)).max(usize::from(filler_pts > 0));
    let per_nontarget = client_total.div_ceil(pts_per_subject.max(1)).max(2);
    // target subject + pretrain randoms + per-client filler subjects
    1 + cfg.pretrain.n_pre / 2 * 3
        + cfg.fl.m_target * per_target
        + (cfg.fl.n_clients - cfg.fl.m_target) * per_nontarget
}

/// Check everything checkable without loading data; returns the full list
/// of violations rather than the first.
pub fn validate_config(cfg: &ExperimentConfig) -> std::result::Result<(), Vec<String>> {
    let mut problems = Vec::new();
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        problems.push(format!("unsupported schema version {}", cfg.schema_version));
    }
    if let Err(e) = cfg.fl.validate() {
        problems.push(e.to_string());
    }
    if let Err(e) = cfg.pretrain.validate() {
        problems.push(e.to_string());
    }
    let frac_sum: f64 = cfg.split_fractions.iter().sum();
    if (frac_sum - 1.0).abs() > 1e-9 {
        problems.push(format!("split fractions {:?} sum to {frac_sum}, expected 1", cfg.split_fractions));
    }
    if cfg.split_fractions.iter().any(|f| *f < 0.0) {
        problems.push("split fractions must be non-negative".into());
    }
    match (&cfg.dataset, cfg.model) {
        (DatasetConfig::Synthetic(_), ModelKind::Mlp) => {}
        (DatasetConfig::Femnist { .. }, ModelKind::Cnn) => {}
        (DatasetConfig::Synthetic(_), ModelKind::Cnn) => {
            problems.push("cnn model requires the femnist dataset".into())
        }
        (DatasetConfig::Femnist { .. }, ModelKind::Mlp) => {
            problems.push("mlp model requires the synthetic dataset".into())
        }
    }
    if cfg.raw_layer_tap.is_none() && cfg.layer_tap >= cfg.model.taps().len() {
        problems.push(format!(
            "layer_tap {} out of range: model has {} taps",
            cfg.layer_tap,
            cfg.model.taps().len()
        ));
    }
    if let DatasetConfig::Synthetic(syn) = &cfg.dataset {
        if syn.pts_per_subject < cfg.effective_min_points() {
            problems.push(format!(
                "subjects of {} points cannot serve split {:?}",
                syn.pts_per_subject, cfg.split_fractions
            ));
        }
        let demand = subject_demand(cfg, syn.pts_per_subject);
        if demand > syn.n_subjects {
            problems.push(format!(
                "one run needs about {demand} distinct subjects but only {} are generated",
                syn.n_subjects
            ));
        }
    }
    if let SubjectSelection::Count(0) = cfg.subjects {
        problems.push("subject count must be positive".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

/// Load (or generate) the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SubjectDataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(syn) => slsia_core::data::gen_synthetic(syn),
        DatasetConfig::Femnist { path, digits_only } => {
            slsia_core::data::load_leaf_femnist(path, *digits_only)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default_synthetic();
        validate_config(&cfg).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn synthetic_defaults_fit_in_200_subjects() {
        let cfg = ExperimentConfig::default_synthetic();
        let demand = subject_demand(&cfg, 400);
        assert!(demand <= 200, "demand {demand}");
        // 1 target + 30 pretrain draws + 5 filler + 10 non-target
        assert_eq!(demand, 46);
    }

    #[test]
    fn odd_n_pre_rejected() {
        let mut cfg = ExperimentConfig::default_synthetic();
        cfg.pretrain.n_pre = 7;
        let problems = validate_config(&cfg).unwrap_err();
        assert!(problems.iter().any(|p| p.contains("n_pre")));
    }

    #[test]
    fn bad_fractions_rejected() {
        let mut cfg = ExperimentConfig::default_synthetic();
        cfg.split_fractions = [0.5, 0.25, 0.3];
        let problems = validate_config(&cfg).unwrap_err();
        assert!(problems.iter().any(|p| p.contains("fractions")));
    }

    #[test]
    fn model_dataset_mismatch_rejected() {
        let mut cfg = ExperimentConfig::default_synthetic();
        cfg.model = ModelKind::Cnn;
        let problems = validate_config(&cfg).unwrap_err();
        assert!(problems.iter().any(|p| p.contains("cnn")));
    }

    #[test]
    fn all_violations_reported_together() {
        let mut cfg = ExperimentConfig::default_synthetic();
        cfg.pretrain.n_pre = 3;
        cfg.split_fractions = [0.6, 0.25, 0.25];
        cfg.fl.m_target = 99;
        let problems = validate_config(&cfg).unwrap_err();
        assert!(problems.len() >= 3, "{problems:?}");
    }

    #[test]
    fn tap_resolution() {
        let mut cfg = ExperimentConfig::default_synthetic();
        assert_eq!(cfg.resolve_tap().unwrap(), 0);
        cfg.layer_tap = 1; // logits
        assert_eq!(cfg.resolve_tap().unwrap(), 2);
        cfg.layer_tap = 2; // confidences
        assert_eq!(cfg.resolve_tap().unwrap(), 3);
        cfg.raw_layer_tap = Some(1); // post-relu probe
        assert_eq!(cfg.resolve_tap().unwrap(), 1);
        cfg.raw_layer_tap = None;
        cfg.layer_tap = 9;
        assert!(cfg.resolve_tap().is_err());
    }
}
