//! Subject-level source inference: pre-trained support models, embedding
//! dataset construction, attack classifiers, per-client scoring, and the
//! loss-based baselines.

use crate::data::{to_batch, DataPoint, SubjectDataset, SubjectId, SubjectLedger, SubjectSplit};
use crate::engine::{embed, per_point_losses, train_step};
use crate::error::{Error, Result};
use crate::fl::{local_train, FLConfig, SourceList};
use crate::net::{LayerSpec, NetworkSpec, ParamSet};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::{derive_rng, derive_u64};
use crate::svm::{train_rbf_svm, RbfSvm, SvmParams};
use crate::tensor::Tensor;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How many support models the server pre-trains. Half of them see the
/// target subject's pre-training share, half only random subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainPlan {
    pub n_pre: usize,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        PretrainPlan { n_pre: 20 }
    }
}

impl PretrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_pre < 2 || self.n_pre % 2 != 0 {
            return Err(Error::Config(format!("n_pre must be even and >= 2, got {}", self.n_pre)));
        }
        Ok(())
    }
}

/// One pre-training dataset plus its type (target-type datasets contain the
/// target subject's pre-train share).
#[derive(Debug, Clone)]
pub struct PretrainDataset {
    pub points: Vec<DataPoint>,
    pub is_target_type: bool,
}

/// A layer-tap activation row with its in/out label and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingExample {
    pub vector: Vec<f64>,
    /// 1 = "in" (from a target-type model), 0 = "out".
    pub label: usize,
    pub model_id: usize,
    pub input_idx: usize,
}

fn sample_subject_points<R: Rng>(
    dataset: &SubjectDataset,
    subject: &SubjectId,
    count: usize,
    rng: &mut R,
) -> Vec<DataPoint> {
    let pts = dataset.points(subject).unwrap_or(&[]);
    let take = count.min(pts.len());
    pts.iter().choose_multiple(rng, take).into_iter().cloned().collect()
}

/// Build the `n_pre` pre-training datasets: target-type = target pre-train
/// share + a similar number of points from one fresh subject; random-type =
/// equal halves from two fresh subjects. No random subject is reused.
pub fn build_pretrain_datasets(
    dataset: &SubjectDataset,
    split: &SubjectSplit,
    plan: &PretrainPlan,
    ledger: &mut SubjectLedger,
    seed: u64,
) -> Result<Vec<PretrainDataset>> {
    plan.validate()?;
    if split.pretrain.is_empty() {
        return Err(Error::Input("target subject has no pre-train share".into()));
    }
    let mut rng = derive_rng(seed, "pretrain-datasets", 0);
    let half_size = split.pretrain.len();
    let mut out = Vec::with_capacity(plan.n_pre);
    for _ in 0..plan.n_pre / 2 {
        let filler = ledger.draw_fresh(&mut rng).map_err(|_| {
            Error::Assignment("not enough fresh subjects for target-type pre-training".into())
        })?;
        let mut points = split.pretrain.clone();
        points.extend(sample_subject_points(dataset, &filler, half_size, &mut rng));
        points.shuffle(&mut rng);
        out.push(PretrainDataset { points, is_target_type: true });
    }
    for _ in 0..plan.n_pre / 2 {
        let a = ledger.draw_fresh(&mut rng).map_err(|_| {
            Error::Assignment("not enough fresh subjects for random-type pre-training".into())
        })?;
        let b = ledger.draw_fresh(&mut rng).map_err(|_| {
            Error::Assignment("not enough fresh subjects for random-type pre-training".into())
        })?;
        let mut points = sample_subject_points(dataset, &a, half_size, &mut rng);
        points.extend(sample_subject_points(dataset, &b, half_size, &mut rng));
        points.shuffle(&mut rng);
        out.push(PretrainDataset { points, is_target_type: false });
    }
    Ok(out)
}

/// Train every pre-trained model from the shared init with the same local
/// recipe as FL clients. Models train in parallel on per-model streams.
pub fn pretrain_models(
    spec: &NetworkSpec,
    w0: &ParamSet,
    datasets: &[PretrainDataset],
    cfg: &FLConfig,
    seed: u64,
) -> Result<Vec<ParamSet>> {
    datasets
        .par_iter()
        .enumerate()
        .map(|(i, ds)| {
            let model_seed = derive_u64(seed, "pretrain-model", i as u64);
            local_train(spec, w0, &ds.points, cfg, None, model_seed)
        })
        .collect()
}

/// Embedding rows of `points` through one model at the given tap.
pub fn embedding_rows(
    spec: &NetworkSpec,
    params: &ParamSet,
    points: &[DataPoint],
    layer_tap: usize,
) -> Result<Vec<Vec<f64>>> {
    let (batch, _) = to_batch(points)?;
    let emb = embed(spec, params, layer_tap, &batch)?;
    Ok((0..emb.batch_size()).map(|i| emb.row(i).to_vec()).collect())
}

/// Query every pre-trained model with the evaluation share and label each
/// embedding by the model's type.
pub fn extract_embeddings(
    spec: &NetworkSpec,
    models: &[ParamSet],
    datasets: &[PretrainDataset],
    eval_points: &[DataPoint],
    layer_tap: usize,
) -> Result<Vec<EmbeddingExample>> {
    if models.len() != datasets.len() {
        return Err(Error::Input("one pre-training dataset per model required".into()));
    }
    if eval_points.is_empty() {
        return Err(Error::Input("empty evaluation share".into()));
    }
    let per_model: Vec<Vec<EmbeddingExample>> = models
        .par_iter()
        .zip(datasets)
        .enumerate()
        .map(|(model_id, (params, ds))| {
            let rows = embedding_rows(spec, params, eval_points, layer_tap)?;
            Ok(rows
                .into_iter()
                .enumerate()
                .map(|(input_idx, vector)| EmbeddingExample {
                    vector,
                    label: usize::from(ds.is_target_type),
                    model_id,
                    input_idx,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_model.into_iter().flatten().collect())
}

// Shortest input the two conv/pool blocks can reduce without vanishing
// (17 -> 15 -> 5 -> 3 -> 1); shorter embeddings (e.g. logit taps) are
// zero-padded up to this length.
const ATTACK_MIN_LEN: usize = 17;

/// The 1-d conv attack network for embeddings of length `input_len`:
/// conv(1->4,k3) -> pool3 -> batchnorm -> conv(4->8,k3) -> pool3 ->
/// batchnorm -> flatten -> linear -> softmax.
pub fn attack_conv_spec(input_len: usize) -> Result<NetworkSpec> {
    let len = input_len.max(ATTACK_MIN_LEN);
    let after_block1 = (len - 2) / 3;
    let after_block2 = (after_block1 - 2) / 3;
    NetworkSpec::new(
        vec![
            LayerSpec::Conv1D { in_channels: 1, out_channels: 4, kernel: 3 },
            LayerSpec::MaxPool1D { kernel: 3 },
            LayerSpec::BatchNorm1D { channels: 4 },
            LayerSpec::Conv1D { in_channels: 4, out_channels: 8, kernel: 3 },
            LayerSpec::MaxPool1D { kernel: 3 },
            LayerSpec::BatchNorm1D { channels: 8 },
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 8 * after_block2, outputs: 2 },
            LayerSpec::Softmax,
        ],
        vec![1, len],
        2,
    )
}

/// Trained attack model: either the 1-d conv network or the RBF SVM.
#[derive(Debug, Clone)]
pub enum AttackClassifier {
    Conv { spec: NetworkSpec, params: ParamSet, input_dim: usize, padded_len: usize },
    Svm { model: RbfSvm, input_dim: usize },
}

impl AttackClassifier {
    pub fn input_dim(&self) -> usize {
        match self {
            AttackClassifier::Conv { input_dim, .. } => *input_dim,
            AttackClassifier::Svm { input_dim, .. } => *input_dim,
        }
    }

    /// Hard {0,1} votes for a batch of embedding vectors.
    pub fn predict_batch(&self, vectors: &[Vec<f64>]) -> Result<Vec<usize>> {
        if vectors.iter().any(|v| v.len() != self.input_dim()) {
            return Err(Error::Input(format!(
                "classifier expects dimension {}",
                self.input_dim()
            )));
        }
        match self {
            AttackClassifier::Svm { model, .. } => {
                Ok(vectors.iter().map(|v| model.predict(v)).collect())
            }
            AttackClassifier::Conv { spec, params, padded_len, .. } => {
                let batch = embeddings_to_batch(vectors, *padded_len)?;
                let probs = crate::engine::predict_probs(spec, params, &batch)?;
                Ok((0..vectors.len())
                    .map(|i| {
                        let row = probs.row(i);
                        usize::from(row[1] > row[0])
                    })
                    .collect())
            }
        }
    }
}

fn embeddings_to_batch(vectors: &[Vec<f64>], padded_len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(vectors.len() * padded_len);
    for v in vectors {
        data.extend_from_slice(v);
        data.resize(data.len() + (padded_len - v.len()), 0.0);
    }
    Tensor::new(vec![vectors.len(), 1, padded_len], data)
}

fn check_both_labels(examples: &[EmbeddingExample]) -> Result<usize> {
    let first = examples.first().ok_or_else(|| Error::Input("no embedding examples".into()))?;
    let dim = first.vector.len();
    if examples.iter().any(|e| e.vector.len() != dim) {
        return Err(Error::Input("embedding examples of mixed dimension".into()));
    }
    let ones = examples.iter().filter(|e| e.label == 1).count();
    if ones == 0 || ones == examples.len() {
        return Err(Error::Input("attack training needs both labels".into()));
    }
    Ok(dim)
}

/// Train the conv attack classifier: Adam(1e-4, weight decay 0.1), batch 16,
/// 100 epochs of cross-entropy on a 90/10 train/validation split, keeping
/// the parameters of the best validation epoch.
pub fn train_attack_conv(examples: &[EmbeddingExample], seed: u64) -> Result<AttackClassifier> {
    let dim = check_both_labels(examples)?;
    let spec = attack_conv_spec(dim)?;
    let padded_len = dim.max(ATTACK_MIN_LEN);

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut derive_rng(seed, "attack-split", 0));
    let n_val = examples.len() / 10;
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };

    let mut params = ParamSet::init(&spec, &mut derive_rng(seed, "attack-init", 0));
    let mut opt = OptimizerState::new(OptimizerKind::adam(1e-4, 0.1), spec.flat_len());

    let val_vectors: Vec<Vec<f64>> = val_idx.iter().map(|i| examples[*i].vector.clone()).collect();
    let val_batch = embeddings_to_batch(&val_vectors, padded_len)?;
    let val_labels: Vec<usize> = val_idx.iter().map(|i| examples[*i].label).collect();

    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut epoch_order = train_idx;
    for epoch in 0..100 {
        epoch_order.shuffle(&mut derive_rng(seed, "attack-shuffle", epoch));
        for chunk in epoch_order.chunks(16) {
            let vectors: Vec<Vec<f64>> = chunk.iter().map(|i| examples[*i].vector.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|i| examples[*i].label).collect();
            let batch = embeddings_to_batch(&vectors, padded_len)?;
            train_step(&spec, &mut params, &mut opt, &batch, &labels)?;
        }
        let val_acc = crate::engine::accuracy(&spec, &params, &val_batch, &val_labels)?;
        // ties go to the later epoch: validation saturates early on cleanly
        // separable embedding sets and the extra epochs grow the margin
        if val_acc >= best.0 {
            best = (val_acc, params.clone());
        }
    }
    Ok(AttackClassifier::Conv { spec, params: best.1, input_dim: dim, padded_len })
}

/// Train the RBF-SVM attack classifier with library-default settings
/// (C = 1.0, gamma = 1/(d * Var), tolerance 1e-3).
pub fn train_attack_svm(examples: &[EmbeddingExample]) -> Result<AttackClassifier> {
    let dim = check_both_labels(examples)?;
    let x: Vec<Vec<f64>> = examples.iter().map(|e| e.vector.clone()).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let model = train_rbf_svm(&x, &labels, &SvmParams::default())?;
    Ok(AttackClassifier::Svm { model, input_dim: dim })
}

/// Per-client target scores (count of "in" votes over the evaluation share)
/// and the predicted source list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub scores: Vec<usize>,
    pub predicted: SourceList,
}

/// A client is predicted as a source when at least half of its evaluation
/// embeddings are classified "in".
pub fn votes_to_bit(score: usize, n_eval: usize) -> bool {
    2 * score >= n_eval
}

/// Score every first-round local snapshot against the evaluation share.
pub fn score_and_predict(
    classifier: &AttackClassifier,
    spec: &NetworkSpec,
    locals: &[ParamSet],
    eval_points: &[DataPoint],
    layer_tap: usize,
) -> Result<AttackOutcome> {
    let scores: Vec<usize> = locals
        .par_iter()
        .map(|params| {
            let rows = embedding_rows(spec, params, eval_points, layer_tap)?;
            let votes = classifier.predict_batch(&rows)?;
            Ok(votes.into_iter().sum())
        })
        .collect::<Result<_>>()?;
    let predicted =
        SourceList(scores.iter().map(|s| votes_to_bit(*s, eval_points.len())).collect());
    Ok(AttackOutcome { scores, predicted })
}

/// Mark the `m_known` clients with the smallest mean loss (ties broken by
/// lower client index).
pub fn select_smallest_mean(mean_losses: &[f64], m_known: usize) -> SourceList {
    let mut idx: Vec<usize> = (0..mean_losses.len()).collect();
    idx.sort_by(|a, b| mean_losses[*a].partial_cmp(&mean_losses[*b]).unwrap().then(a.cmp(b)));
    let mut bits = vec![false; mean_losses.len()];
    for i in idx.into_iter().take(m_known) {
        bits[i] = true;
    }
    SourceList(bits)
}

/// Loss-comparison baseline: clients with the smallest average loss on the
/// evaluation share are predicted as sources (the attacker is assumed to
/// know how many there are).
pub fn baseline_avg_loss(
    spec: &NetworkSpec,
    locals: &[ParamSet],
    eval_points: &[DataPoint],
    m_known: usize,
) -> Result<SourceList> {
    if m_known > locals.len() {
        return Err(Error::Input("m_known exceeds client count".into()));
    }
    let (batch, labels) = to_batch(eval_points)?;
    let means: Vec<f64> = locals
        .par_iter()
        .map(|params| {
            let losses = per_point_losses(spec, params, &batch, &labels)?;
            Ok(losses.iter().sum::<f64>() / losses.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(select_smallest_mean(&means, m_known))
}

/// Count, per client, how often it registers the lowest loss on an
/// evaluation point (ties to the lowest index).
pub fn min_loss_counts(losses_per_client: &[Vec<f64>]) -> Vec<usize> {
    let n_points = losses_per_client.first().map(Vec::len).unwrap_or(0);
    let mut counts = vec![0usize; losses_per_client.len()];
    for p in 0..n_points {
        let mut best = 0;
        for (c, losses) in losses_per_client.iter().enumerate() {
            if losses[p] < losses_per_client[best][p] {
                best = c;
            }
        }
        counts[best] += 1;
    }
    counts
}

/// Frequency baseline: clients that most often achieve the minimum loss on
/// an evaluation point are predicted as sources.
pub fn baseline_min_loss_time(
    spec: &NetworkSpec,
    locals: &[ParamSet],
    eval_points: &[DataPoint],
    m_known: usize,
) -> Result<SourceList> {
    if m_known > locals.len() {
        return Err(Error::Input("m_known exceeds client count".into()));
    }
    let (batch, labels) = to_batch(eval_points)?;
    let losses: Vec<Vec<f64>> = locals
        .par_iter()
        .map(|params| per_point_losses(spec, params, &batch, &labels))
        .collect::<Result<_>>()?;
    let counts = min_loss_counts(&losses);
    let mut idx: Vec<usize> = (0..counts.len()).collect();
    idx.sort_by(|a, b| counts[*b].cmp(&counts[*a]).then(a.cmp(b)));
    let mut bits = vec![false; counts.len()];
    for i in idx.into_iter().take(m_known) {
        bits[i] = true;
    }
    Ok(SourceList(bits))
}

/// Count how many times the summed loss of the target subject's points on
/// the per-round global models decreases between consecutive rounds.
pub fn loss_across_rounds(
    spec: &NetworkSpec,
    round_globals: &[ParamSet],
    points: &[DataPoint],
) -> Result<usize> {
    if round_globals.len() < 2 {
        return Err(Error::Input("loss-across-rounds needs at least two rounds".into()));
    }
    let (batch, labels) = to_batch(points)?;
    let sums: Vec<f64> = round_globals
        .iter()
        .map(|params| Ok(per_point_losses(spec, params, &batch, &labels)?.iter().sum()))
        .collect::<Result<_>>()?;
    Ok(sums.windows(2).filter(|w| w[1] < w[0]).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split_target_subject, SyntheticConfig};
    use crate::net::mlp_spec;

    fn toy_world() -> (SubjectDataset, SubjectId, SubjectSplit) {
        let ds = gen_synthetic(&SyntheticConfig {
            n_subjects: 40,
            pts_per_subject: 24,
            dim: 8,
            min_sep: 0.35,
            mean_range: 2.0,
            cov_scale: 0.25,
            seed: 99,
        })
        .unwrap();
        let target = ds.subject_ids().next().unwrap().clone();
        let split = split_target_subject(&ds, &target, [0.5, 0.25, 0.25], 1).unwrap();
        (ds, target, split)
    }

    #[test]
    fn pretrain_datasets_have_expected_structure() {
        let (ds, target, split) = toy_world();
        let mut ledger = SubjectLedger::new(&ds, std::slice::from_ref(&target));
        let plan = PretrainPlan::default();
        let datasets = build_pretrain_datasets(&ds, &split, &plan, &mut ledger, 5).unwrap();
        assert_eq!(datasets.len(), 20);
        assert_eq!(datasets.iter().filter(|d| d.is_target_type).count(), 10);

        let mut seen_randoms: Vec<SubjectId> = Vec::new();
        for d in &datasets {
            let target_pts = d.points.iter().filter(|p| p.subject == target).count();
            if d.is_target_type {
                assert_eq!(target_pts, split.pretrain.len());
                assert_eq!(d.points.len(), 2 * split.pretrain.len());
            } else {
                assert_eq!(target_pts, 0);
                assert_eq!(d.points.len(), 2 * split.pretrain.len());
            }
            let mut randoms: Vec<SubjectId> = d
                .points
                .iter()
                .map(|p| p.subject.clone())
                .filter(|s| *s != target)
                .collect();
            randoms.sort();
            randoms.dedup();
            let expected = if d.is_target_type { 1 } else { 2 };
            assert_eq!(randoms.len(), expected);
            for r in randoms {
                assert!(!seen_randoms.contains(&r), "random subject {r} reused");
                seen_randoms.push(r);
            }
        }
    }

    #[test]
    fn odd_n_pre_rejected() {
        assert!(PretrainPlan { n_pre: 7 }.validate().is_err());
        assert!(PretrainPlan { n_pre: 20 }.validate().is_ok());
    }

    #[test]
    fn zero_epoch_pretraining_returns_w0() {
        let (ds, target, split) = toy_world();
        let mut ledger = SubjectLedger::new(&ds, std::slice::from_ref(&target));
        let plan = PretrainPlan { n_pre: 4 };
        let datasets = build_pretrain_datasets(&ds, &split, &plan, &mut ledger, 2).unwrap();
        let spec = mlp_spec(8, 6, 2);
        let w0 = ParamSet::init(&spec, &mut derive_rng(3, "w0", 0));
        let cfg = FLConfig { local_epochs: 0, ..FLConfig::default() };
        let models = pretrain_models(&spec, &w0, &datasets, &cfg, 7).unwrap();
        assert_eq!(models.len(), 4);
        for m in &models {
            assert_eq!(m.flat_view(), w0.flat_view());
        }
        // per-model determinism
        let again = pretrain_models(&spec, &w0, &datasets, &cfg, 7).unwrap();
        for (a, b) in models.iter().zip(&again) {
            assert_eq!(a.flat_view(), b.flat_view());
        }
    }

    #[test]
    fn embeddings_count_balance_and_width() {
        let (ds, target, split) = toy_world();
        let mut ledger = SubjectLedger::new(&ds, std::slice::from_ref(&target));
        let plan = PretrainPlan { n_pre: 4 };
        let datasets = build_pretrain_datasets(&ds, &split, &plan, &mut ledger, 4).unwrap();
        let spec = mlp_spec(8, 200, 2);
        let w0 = ParamSet::init(&spec, &mut derive_rng(4, "w0", 0));
        let cfg = FLConfig { local_epochs: 0, ..FLConfig::default() };
        let models = pretrain_models(&spec, &w0, &datasets, &cfg, 4).unwrap();
        let examples = extract_embeddings(&spec, &models, &datasets, &split.eval, 0).unwrap();
        assert_eq!(examples.len(), 4 * split.eval.len());
        let ones = examples.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones, examples.len() / 2);
        assert!(examples.iter().all(|e| e.vector.len() == 200));

        // same model + same input -> identical vector
        let rows_a = embedding_rows(&spec, &models[0], &split.eval, 0).unwrap();
        let rows_b = embedding_rows(&spec, &models[0], &split.eval, 0).unwrap();
        assert_eq!(rows_a, rows_b);
    }

    fn blob_examples(n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Vec<EmbeddingExample> {
        // two spherical blobs, centers `separation * sigma` apart (sigma = 0.1)
        let mut rng = derive_rng(seed, "blobs", 0);
        let sigma = 0.1;
        let mut out = Vec::new();
        for i in 0..2 * n_per_class {
            let label = i % 2;
            let mut vector: Vec<f64> = (0..dim).map(|_| rng.gen_range(-sigma..sigma)).collect();
            if label == 1 {
                vector[0] += separation * sigma;
            }
            out.push(EmbeddingExample { vector, label, model_id: i, input_idx: 0 });
        }
        out
    }

    #[test]
    fn conv_attack_learns_separable_blobs() {
        let examples = blob_examples(1000, 24, 10.0, 21);
        let clf = train_attack_conv(&examples, 0).unwrap();
        let vectors: Vec<Vec<f64>> = examples.iter().map(|e| e.vector.clone()).collect();
        let votes = clf.predict_batch(&vectors).unwrap();
        let correct = votes
            .iter()
            .zip(&examples)
            .filter(|(v, e)| **v == e.label)
            .count();
        assert!(
            correct as f64 / examples.len() as f64 >= 0.95,
            "training accuracy {correct}/{}",
            examples.len()
        );
        // eval-mode predictions are deterministic
        let votes2 = clf.predict_batch(&vectors).unwrap();
        assert_eq!(votes, votes2);
    }

    #[test]
    fn constant_label_input_rejected() {
        let mut examples = blob_examples(10, 24, 10.0, 22);
        for e in &mut examples {
            e.label = 1;
        }
        assert!(train_attack_conv(&examples, 0).is_err());
        assert!(train_attack_svm(&examples).is_err());
    }

    #[test]
    fn disjoint_populations_transfer_to_held_out_embeddings() {
        // min inter-class distance > max intra-class distance: both
        // classifiers must be perfect on held-out samples
        let examples = blob_examples(1000, 24, 30.0, 23);
        let (train, held_out): (Vec<_>, Vec<_>) =
            examples.iter().cloned().partition(|e| e.model_id % 3 != 0);
        for clf in [
            train_attack_conv(&train, 1).unwrap(),
            train_attack_svm(&train).unwrap(),
        ] {
            let vectors: Vec<Vec<f64>> = held_out.iter().map(|e| e.vector.clone()).collect();
            let votes = clf.predict_batch(&vectors).unwrap();
            assert!(votes.iter().zip(&held_out).all(|(v, e)| *v == e.label));
        }
    }

    #[test]
    fn short_embeddings_are_padded_for_the_conv_net() {
        let mut examples = blob_examples(30, 2, 10.0, 24);
        for e in &mut examples {
            e.vector.truncate(2);
        }
        let clf = train_attack_conv(&examples, 0).unwrap();
        let vectors: Vec<Vec<f64>> = examples.iter().map(|e| e.vector.clone()).collect();
        assert_eq!(clf.predict_batch(&vectors).unwrap().len(), examples.len());
    }

    #[test]
    fn vote_threshold_uses_at_least_half() {
        assert!(votes_to_bit(100, 100));
        assert!(votes_to_bit(50, 100)); // exactly half counts
        assert!(!votes_to_bit(49, 100));
        assert!(votes_to_bit(51, 101));
        assert!(!votes_to_bit(50, 101));
        // flipping one vote up never clears a bit
        for n in [1usize, 2, 7, 100] {
            for s in 0..n {
                assert!(votes_to_bit(s, n) <= votes_to_bit(s + 1, n));
            }
        }
    }

    #[test]
    fn smallest_mean_selection_matches_brute_force() {
        let mut rng = derive_rng(31, "losses", 0);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let m = rng.gen_range(0..=n);
            let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let got = select_smallest_mean(&losses, m);
            // brute force: exhaustive sort oracle
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| losses[*a].partial_cmp(&losses[*b]).unwrap().then(a.cmp(b)));
            let mut want = vec![false; n];
            for i in &order[..m] {
                want[*i] = true;
            }
            assert_eq!(got.0, want);
            assert_eq!(got.popcount(), m);
        }
    }

    #[test]
    fn min_loss_counts_match_brute_force() {
        let mut rng = derive_rng(32, "losses", 0);
        for _ in 0..50 {
            let n_clients = rng.gen_range(1..8);
            let n_points = rng.gen_range(1..20);
            let losses: Vec<Vec<f64>> = (0..n_clients)
                .map(|_| (0..n_points).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let counts = min_loss_counts(&losses);
            assert_eq!(counts.iter().sum::<usize>(), n_points);
            for p in 0..n_points {
                let best = (0..n_clients)
                    .min_by(|a, b| {
                        losses[*a][p].partial_cmp(&losses[*b][p]).unwrap().then(a.cmp(b))
                    })
                    .unwrap();
                assert!(counts[best] > 0);
            }
        }
    }

    #[test]
    fn loss_across_rounds_counts_decreases() {
        let spec = mlp_spec(4, 3, 2);
        let p = ParamSet::init(&spec, &mut derive_rng(33, "w0", 0));
        let points = vec![DataPoint {
            features: Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.4]),
            label: 1,
            subject: SubjectId::synthetic(0),
        }];
        assert!(loss_across_rounds(&spec, std::slice::from_ref(&p), &points).is_err());
        // identical rounds -> summed loss constant -> zero decreases
        let c = loss_across_rounds(&spec, &[p.clone(), p.clone(), p.clone()], &points).unwrap();
        assert_eq!(c, 0);
    }
}
