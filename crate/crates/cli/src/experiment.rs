//! Seeded run orchestration: per-subject pipelines, ablation sweeps, and the
//! resumable run manifest.

use crate::config::{
    load_dataset, validate_config, AttackSelection, ExperimentConfig, SubjectSelection,
};
use crate::report;
use serde::{Deserialize, Serialize};
use slsia_core::attack::{
    baseline_avg_loss, baseline_min_loss_time, build_pretrain_datasets, extract_embeddings,
    loss_across_rounds, pretrain_models, score_and_predict, train_attack_conv, train_attack_svm,
    AttackClassifier, EmbeddingExample,
};
use slsia_core::data::{
    split_target_subject, to_batch, SubjectDataset, SubjectId, SubjectLedger,
};
use slsia_core::defense::{account_epsilon, subject_sampling_rate, DpLevel, PrivacySpent};
use slsia_core::engine::accuracy;
use slsia_core::error::{Error, Result};
use slsia_core::fl::{run_round, ClientAssignment, FLConfig, SourceList};
use slsia_core::metrics::{compute_metrics, MetricsRecord};
use slsia_core::net::{NetworkSpec, ParamSet};
use slsia_core::rng::{derive_rng, derive_u64};
use std::path::Path;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub const METHOD_CONV: &str = "slsia_conv";
pub const METHOD_SVM: &str = "slsia_svm";
pub const METHOD_AVG_LOSS: &str = "avg_loss";
pub const METHOD_MIN_LOSS_TIME: &str = "min_loss_time";

/// One method's prediction for one subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub predicted: SourceList,
    /// Per-client "in" vote counts (embedding methods only).
    pub scores: Option<Vec<usize>>,
    pub metrics: MetricsRecord,
}

/// Mean task accuracy of the target clients on their target-subject
/// training points and on the evaluation share.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub train: f64,
    pub test: f64,
}

/// Privacy accounting for one subject's run (DP runs only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyRecord {
    pub per_client: Vec<PrivacySpent>,
    /// Mean epsilon over target clients at the sample-sampling rate q = B/N.
    pub mean_target_epsilon: f64,
    /// Mean epsilon over target clients at the subject-sampling rate
    /// (subject-level runs only).
    pub mean_target_subject_epsilon: Option<f64>,
}

/// Everything recorded about one attacked subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRunRecord {
    pub index: usize,
    pub subject: String,
    pub seed: u64,
    pub ground_truth: Option<SourceList>,
    pub methods: Vec<MethodOutcome>,
    pub task_accuracy: Option<TaskAccuracy>,
    pub privacy: Option<PrivacyRecord>,
    /// Summed-loss decrease counter over rounds (multi-round runs only).
    pub loss_decreases: Option<usize>,
    /// A failed subject records its error and the run continues.
    pub error: Option<String>,
}

/// Self-contained run record: re-running from the manifest's config
/// reproduces identical outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub subjects: Vec<SubjectRunRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = (&SubjectRunRecord, &MethodOutcome)> {
        self.subjects
            .iter()
            .flat_map(|s| s.methods.iter().map(move |m| (s, m)))
    }

    pub fn completed(&self) -> usize {
        self.subjects.iter().filter(|s| s.error.is_none()).count()
    }

    pub fn failed(&self) -> usize {
        self.subjects.iter().filter(|s| s.error.is_some()).count()
    }
}

/// Pick the run's target subjects from the filtered pool.
pub fn choose_subjects(cfg: &ExperimentConfig, dataset: &SubjectDataset) -> Result<Vec<SubjectId>> {
    let pool: Vec<SubjectId> = dataset.subject_ids().cloned().collect();
    match &cfg.subjects {
        SubjectSelection::Explicit(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let id = SubjectId(id.clone());
                if !pool.contains(&id) {
                    return Err(Error::Input(format!("subject {id} not in the filtered dataset")));
                }
                out.push(id);
            }
            Ok(out)
        }
        SubjectSelection::Count(n) => {
            if *n > pool.len() {
                return Err(Error::Input(format!(
                    "requested {n} subjects, only {} available after filtering",
                    pool.len()
                )));
            }
            use rand::seq::SliceRandom;
            let mut rng = derive_rng(cfg.seed, "subject-pool", 0);
            let mut pool = pool;
            pool.shuffle(&mut rng);
            pool.truncate(*n);
            Ok(pool)
        }
    }
}

/// Everything the per-subject pipeline produces (before manifest packing).
pub struct SubjectPipelineOutput {
    pub ground_truth: SourceList,
    pub assignment: ClientAssignment,
    pub methods: Vec<MethodOutcome>,
    pub task_accuracy: TaskAccuracy,
    pub privacy: Option<PrivacyRecord>,
    pub loss_decreases: Option<usize>,
    pub w0: ParamSet,
    pub locals: Vec<ParamSet>,
    pub globals: Vec<ParamSet>,
    pub pretrain_embeddings: Vec<EmbeddingExample>,
    /// Per-client evaluation-share embedding rows (export runs only).
    pub local_embeddings: Option<Vec<Vec<Vec<f64>>>>,
    pub pretrain_datasets: Vec<slsia_core::attack::PretrainDataset>,
}

/// Run the full pipeline for one target subject: split, pre-train, attack
/// training, first-round FL, scoring, baselines, metrics.
pub fn run_subject(
    cfg: &ExperimentConfig,
    dataset: &SubjectDataset,
    spec: &NetworkSpec,
    target: &SubjectId,
    subject_seed: u64,
) -> Result<SubjectPipelineOutput> {
    let tap = cfg.resolve_tap()?;
    let split = split_target_subject(dataset, target, cfg.split_fractions, subject_seed)?;
    let mut ledger = SubjectLedger::new(dataset, std::slice::from_ref(target));
    let fl_cfg = FLConfig { seed: subject_seed, ..cfg.fl.clone() };

    // server-side support models (never privatized)
    let pre_datasets =
        build_pretrain_datasets(dataset, &split, &cfg.pretrain, &mut ledger, subject_seed)?;
    let w0 = ParamSet::init(spec, &mut derive_rng(subject_seed, "w0", 0));
    let pretrain_cfg = FLConfig { dp: None, ..fl_cfg.clone() };
    let models = pretrain_models(spec, &w0, &pre_datasets, &pretrain_cfg, subject_seed)?;
    let examples = extract_embeddings(spec, &models, &pre_datasets, &split.eval, tap)?;

    // the federation; the attack consumes first-round pre-aggregation locals
    let assignment = build_assignments_with(dataset, &split, &fl_cfg, &mut ledger, subject_seed)?;
    let mut globals = Vec::with_capacity(fl_cfg.rounds.max(1));
    let mut first_round_locals = Vec::new();
    let mut global = w0.clone();
    for round in 0..fl_cfg.rounds.max(1) {
        let (next_global, locals) = run_round(spec, &global, &assignment, &fl_cfg, round)?;
        if round == 0 {
            first_round_locals = locals;
        }
        global = next_global;
        globals.push(global.clone());
    }
    let locals = first_round_locals;

    let mut methods = Vec::new();
    let mut push_outcome = |method: &str, predicted: SourceList, scores: Option<Vec<usize>>| -> Result<()> {
        let mut metrics = compute_metrics(&assignment.ground_truth, &predicted)?;
        metrics.method = method.to_string();
        metrics.subject = target.to_string();
        methods.push(MethodOutcome { method: method.to_string(), predicted, scores, metrics });
        Ok(())
    };

    if cfg.attack.wants_conv() {
        let clf = train_attack_conv(&examples, subject_seed)?;
        let out = score_and_predict(&clf, spec, &locals, &split.eval, tap)?;
        push_outcome(METHOD_CONV, out.predicted, Some(out.scores))?;
    }
    if cfg.attack.wants_svm() {
        let clf: AttackClassifier = train_attack_svm(&examples)?;
        let out = score_and_predict(&clf, spec, &locals, &split.eval, tap)?;
        push_outcome(METHOD_SVM, out.predicted, Some(out.scores))?;
    }
    if cfg.attack.wants_avg_loss() {
        let predicted = baseline_avg_loss(spec, &locals, &split.eval, fl_cfg.m_target)?;
        push_outcome(METHOD_AVG_LOSS, predicted, None)?;
    }
    if cfg.attack.wants_min_loss_time() {
        let predicted = baseline_min_loss_time(spec, &locals, &split.eval, fl_cfg.m_target)?;
        push_outcome(METHOD_MIN_LOSS_TIME, predicted, None)?;
    }

    let task_accuracy = target_task_accuracy(spec, &assignment, &locals, &split.fl, &split.eval)?;
    let privacy = fl_cfg
        .dp
        .as_ref()
        .map(|dp| account_run_privacy(&assignment, &fl_cfg, dp))
        .transpose()?;
    let loss_decreases = if globals.len() >= 2 {
        let mut all_points = split.pretrain.clone();
        all_points.extend(split.eval.iter().cloned());
        all_points.extend(split.fl.iter().cloned());
        Some(loss_across_rounds(spec, &globals, &all_points)?)
    } else {
        None
    };
    let local_embeddings = if cfg.export_embeddings {
        Some(
            locals
                .iter()
                .map(|p| slsia_core::attack::embedding_rows(spec, p, &split.eval, tap))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    Ok(SubjectPipelineOutput {
        ground_truth: assignment.ground_truth.clone(),
        methods,
        task_accuracy,
        privacy,
        loss_decreases,
        w0,
        locals,
        globals,
        pretrain_embeddings: examples,
        local_embeddings,
        pretrain_datasets: pre_datasets,
        assignment,
    })
}

fn build_assignments_with(
    dataset: &SubjectDataset,
    split: &slsia_core::data::SubjectSplit,
    fl_cfg: &FLConfig,
    ledger: &mut SubjectLedger,
    seed: u64,
) -> Result<ClientAssignment> {
    slsia_core::fl::build_assignments(dataset, split, fl_cfg, ledger, seed)
}

/// Mean accuracy of the target clients on their own target-subject training
/// points ("train") and on the evaluation share ("test").
fn target_task_accuracy(
    spec: &NetworkSpec,
    assignment: &ClientAssignment,
    locals: &[ParamSet],
    fl_share: &[slsia_core::data::DataPoint],
    eval_points: &[slsia_core::data::DataPoint],
) -> Result<TaskAccuracy> {
    let (eval_batch, eval_labels) = to_batch(eval_points)?;
    let mut train_accs = Vec::new();
    let mut test_accs = Vec::new();
    let target_subject = fl_share.first().map(|p| p.subject.clone());
    for (client, params) in assignment.clients.iter().zip(locals) {
        if !client.is_target {
            continue;
        }
        // the client's own target-subject points (its partition in
        // partitioned mode, the full share otherwise)
        let own: Vec<slsia_core::data::DataPoint> = client
            .points
            .iter()
            .filter(|p| Some(&p.subject) == target_subject.as_ref())
            .cloned()
            .collect();
        if own.is_empty() {
            continue;
        }
        let (b, l) = to_batch(&own)?;
        train_accs.push(accuracy(spec, params, &b, &l)?);
        test_accs.push(accuracy(spec, params, &eval_batch, &eval_labels)?);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(TaskAccuracy { train: mean(&train_accs), test: mean(&test_accs) })
}

/// Epsilon per client: q = B/N sample-sampling composition over all local
/// steps, plus the subject-sampling diagnostic for subject-level runs.
fn account_run_privacy(
    assignment: &ClientAssignment,
    fl_cfg: &FLConfig,
    dp: &slsia_core::defense::DPConfig,
) -> Result<PrivacyRecord> {
    let mut per_client = Vec::with_capacity(assignment.clients.len());
    let mut target_eps = Vec::new();
    let mut target_subject_eps = Vec::new();
    for client in &assignment.clients {
        let n = client.points.len();
        let steps_per_epoch = n.div_ceil(fl_cfg.batch_size);
        let steps = (fl_cfg.local_epochs * steps_per_epoch * fl_cfg.rounds.max(1)) as u64;
        let q = (fl_cfg.batch_size as f64 / n as f64).min(1.0);
        let spent = account_epsilon(q, dp.noise_multiplier, steps, dp.delta)?;
        if client.is_target {
            target_eps.push(spent.epsilon);
            if dp.level == DpLevel::Subject {
                let mut counts: Vec<usize> = Vec::new();
                let mut order: Vec<&SubjectId> = Vec::new();
                for p in &client.points {
                    match order.iter().position(|s| **s == p.subject) {
                        Some(i) => counts[i] += 1,
                        None => {
                            order.push(&p.subject);
                            counts.push(1);
                        }
                    }
                }
                let q_subject = subject_sampling_rate(&counts, fl_cfg.batch_size);
                target_subject_eps
                    .push(account_epsilon(q_subject, dp.noise_multiplier, steps, dp.delta)?.epsilon);
            }
        }
        per_client.push(spent);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(PrivacyRecord {
        per_client,
        mean_target_epsilon: mean(&target_eps),
        mean_target_subject_epsilon: if target_subject_eps.is_empty() {
            None
        } else {
            Some(mean(&target_subject_eps))
        },
    })
}

/// Run (or resume) a full experiment. The manifest is rewritten after every
/// subject, so an interrupted run restarts at the first incomplete subject
/// with identical downstream results.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    validate_config(cfg).map_err(|problems| Error::Config(problems.join("; ")))?;
    let dataset = load_dataset(cfg)?.filter_min_points(cfg.effective_min_points());
    if dataset.n_subjects() == 0 {
        return Err(Error::Data("no subjects survive the minimum-points filter".into()));
    }
    let spec = cfg.model.build_spec(
        dataset.feature_shape.iter().product(),
        dataset.num_classes,
    );
    let targets = choose_subjects(cfg, &dataset)?;

    let manifest_path = cfg.output_dir.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        let existing = RunManifest::load(&manifest_path)?;
        if existing.config != *cfg {
            return Err(Error::Config(format!(
                "output dir {} holds a manifest for a different config",
                cfg.output_dir.display()
            )));
        }
        log::info!("resuming run with {} completed subjects", existing.subjects.len());
        existing
    } else {
        RunManifest { schema_version: MANIFEST_SCHEMA_VERSION, config: cfg.clone(), subjects: Vec::new() }
    };

    for (index, target) in targets.iter().enumerate() {
        if manifest.subjects.iter().any(|s| s.index == index && s.error.is_none()) {
            continue;
        }
        manifest.subjects.retain(|s| s.index != index);
        let subject_seed = derive_u64(cfg.seed, "subject-run", index as u64);
        let record = match run_subject(cfg, &dataset, &spec, target, subject_seed) {
            Ok(output) => {
                report::write_subject_artifacts(cfg, &spec, target, &output)?;
                SubjectRunRecord {
                    index,
                    subject: target.to_string(),
                    seed: subject_seed,
                    ground_truth: Some(output.ground_truth),
                    methods: output.methods,
                    task_accuracy: Some(output.task_accuracy),
                    privacy: output.privacy,
                    loss_decreases: output.loss_decreases,
                    error: None,
                }
            }
            Err(e) => {
                log::error!("subject {target} failed: {e}");
                SubjectRunRecord {
                    index,
                    subject: target.to_string(),
                    seed: subject_seed,
                    ground_truth: None,
                    methods: Vec::new(),
                    task_accuracy: None,
                    privacy: None,
                    loss_decreases: None,
                    error: Some(e.to_string()),
                }
            }
        };
        manifest.subjects.push(record);
        manifest.subjects.sort_by_key(|s| s.index);
        manifest.save(&manifest_path)?;
    }

    report::write_run_reports(cfg, &manifest)?;
    Ok(manifest)
}

/// One ablation axis: sweeps a single knob, holding everything else at the
/// base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Rate,
    Layers,
    Epochs,
}

/// Run one experiment per axis value, each in its own subdirectory, and
/// write the combined accuracy table.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<(String, RunManifest)>> {
    let mut variants: Vec<(String, ExperimentConfig)> = Vec::new();
    match axis {
        AblationAxis::Rate => {
            for rate in [0.5, 0.3, 0.1] {
                let mut cfg = base.clone();
                cfg.fl.target_rate = rate;
                variants.push((format!("rate_{rate}"), cfg));
            }
        }
        AblationAxis::Epochs => {
            for epochs in [5usize, 10, 15] {
                let mut cfg = base.clone();
                cfg.fl.local_epochs = epochs;
                variants.push((format!("epochs_{epochs}"), cfg));
            }
        }
        AblationAxis::Layers => {
            for tap in 0..base.model.taps().len() {
                let mut cfg = base.clone();
                cfg.layer_tap = tap;
                cfg.raw_layer_tap = None;
                variants.push((format!("layer_{tap}"), cfg));
            }
        }
    }
    let mut out = Vec::with_capacity(variants.len());
    for (label, mut cfg) in variants {
        cfg.output_dir = base.output_dir.join(&label);
        let manifest = run_experiment(&cfg)?;
        out.push((label, manifest));
    }
    report::write_ablation_table(base, axis, &out)?;
    Ok(out)
}

/// Re-derive the highest- and lowest-accuracy subjects of a finished run
/// (deterministically, from their recorded seeds), export their embedding
/// sets, and write the target-to-random-subject distance table.
pub fn analyze_run(manifest_path: &Path, out_dir: Option<std::path::PathBuf>) -> Result<()> {
    let manifest = RunManifest::load(manifest_path)?;
    let out = out_dir.unwrap_or_else(|| manifest.config.output_dir.clone());

    let method = [METHOD_CONV, METHOD_SVM, METHOD_AVG_LOSS, METHOD_MIN_LOSS_TIME]
        .into_iter()
        .find(|m| manifest.records().any(|(_, o)| o.method == *m))
        .ok_or_else(|| Error::Input("manifest holds no method outcomes".into()))?;
    let mut ranked: Vec<(usize, String, f64)> = manifest
        .records()
        .filter(|(_, o)| o.method == method)
        .map(|(s, o)| (s.index, s.subject.clone(), o.metrics.accuracy))
        .collect();
    if ranked.is_empty() {
        return Err(Error::Input("no completed subjects to analyze".into()));
    }
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut picks = vec![ranked[0].clone()];
    if ranked.len() > 1 {
        picks.push(ranked[ranked.len() - 1].clone());
    }

    let mut cfg = manifest.config.clone();
    cfg.export_embeddings = true;
    let dataset = load_dataset(&cfg)?.filter_min_points(cfg.effective_min_points());
    let spec = cfg
        .model
        .build_spec(dataset.feature_shape.iter().product(), dataset.num_classes);

    let mut rows = Vec::new();
    for (index, subject, accuracy) in picks {
        let target = SubjectId(subject.clone());
        let subject_seed = derive_u64(cfg.seed, "subject-run", index as u64);
        let output = run_subject(&cfg, &dataset, &spec, &target, subject_seed)?;
        report::write_embeddings_csv(&output, &out.join("embeddings").join(format!("{target}.csv")))?;
        let target_points = dataset
            .points(&target)
            .ok_or_else(|| Error::Input(format!("subject {target} missing from dataset")))?;
        let distances = slsia_core::metrics::distance_report(
            &output.assignment,
            &output.pretrain_datasets,
            target_points,
            &target,
        )?;
        rows.push((subject, accuracy, distances));
    }
    report::write_distance_csv(&rows, &out.join("tables").join("distance.csv"))
}
