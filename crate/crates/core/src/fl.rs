//! Cross-silo FedAvg simulation: client assignment with a known ground-truth
//! source list, local SGD training (optionally privatized), and weighted
//! aggregation.

use crate::data::{to_batch, DataPoint, SubjectDataset, SubjectId, SubjectLedger, SubjectSplit};
use crate::defense::{dp_step_item, dp_step_subject, DPConfig, DpLevel};
use crate::engine::{loss_grad_trace, per_sample_gradients, update_running_stats, GradientRecord};
use crate::error::{Error, Result};
use crate::net::{NetworkSpec, ParamSet};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::{derive_rng, derive_u64};
use crate::tensor::Tensor;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Federation configuration. Defaults mirror the standard experiment:
/// 10 clients, 5 of them holding target-subject data at a 50% rate, one
/// round of 5 local epochs with SGD(0.01, 0.9) and batch 12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FLConfig {
    pub n_clients: usize,
    pub m_target: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of a target client's dataset drawn from the target subject.
    pub target_rate: f64,
    /// Partition the FL share among target clients instead of sharing it.
    pub partition_target_share: bool,
    pub dp: Option<DPConfig>,
    pub seed: u64,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            n_clients: 10,
            m_target: 5,
            rounds: 1,
            local_epochs: 5,
            batch_size: 12,
            lr: 0.01,
            momentum: 0.9,
            target_rate: 0.5,
            partition_target_share: false,
            dp: None,
            seed: 0,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_target > self.n_clients {
            return Err(Error::Config(format!(
                "m_target {} exceeds n_clients {}",
                self.m_target, self.n_clients
            )));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::Config(format!("target_rate {} out of (0,1]", self.target_rate)));
        }
        if self.batch_size == 0 || self.n_clients == 0 {
            return Err(Error::Config("batch_size and n_clients must be positive".into()));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }
}

/// Bit vector over clients: which ones hold (or are predicted to hold)
/// target-subject data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceList(pub Vec<bool>);

impl SourceList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

impl std::fmt::Display for SourceList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", u8::from(*b))?;
        }
        write!(f, "]")
    }
}

/// One client's local dataset plus its target flag.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub points: Vec<DataPoint>,
    pub is_target: bool,
}

/// Per-client datasets and the ground-truth source list.
#[derive(Debug, Clone)]
pub struct ClientAssignment {
    pub clients: Vec<ClientData>,
    pub ground_truth: SourceList,
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Draw `needed` filler points from at least `min_subjects` fresh subjects,
/// spreading the demand as evenly as the subjects' sizes allow.
fn draw_filler<R: Rng>(
    dataset: &SubjectDataset,
    ledger: &mut SubjectLedger,
    needed: usize,
    min_subjects: usize,
    rng: &mut R,
) -> Result<Vec<DataPoint>> {
    let mut chosen: Vec<(SubjectId, usize)> = Vec::new();
    let mut capacity = 0;
    while capacity < needed || chosen.len() < min_subjects {
        let id = ledger.draw_fresh(rng).map_err(|_| {
            Error::Assignment(format!(
                "ran out of fresh subjects while drawing {needed} filler points \
                 ({capacity} available from {} subjects)",
                chosen.len()
            ))
        })?;
        let size = dataset.points(&id).map(|p| p.len()).unwrap_or(0);
        capacity += size;
        chosen.push((id, size));
    }
    let mut out = Vec::with_capacity(needed);
    let mut remaining = needed;
    let total_subjects = chosen.len();
    for (i, (id, size)) in chosen.into_iter().enumerate() {
        let left = total_subjects - i;
        let take = size.min(div_ceil(remaining, left)).min(remaining);
        let pts = dataset.points(&id).expect("ledger subject exists");
        out.extend(pts.iter().choose_multiple(rng, take).into_iter().cloned());
        remaining -= take;
    }
    debug_assert_eq!(remaining, 0);
    Ok(out)
}

/// Build the per-client datasets. Target clients hold the FL share of the
/// target subject (all of it by default, a partition of it behind the flag)
/// plus fresh-subject filler so target points make up `target_rate` of the
/// dataset; non-target clients hold an equal-size dataset drawn from at
/// least two fresh subjects.
pub fn build_assignments(
    dataset: &SubjectDataset,
    split: &SubjectSplit,
    cfg: &FLConfig,
    ledger: &mut SubjectLedger,
    seed: u64,
) -> Result<ClientAssignment> {
    cfg.validate()?;
    if cfg.m_target > 0 && split.fl.is_empty() {
        return Err(Error::Assignment("target subject has no FL share".into()));
    }
    let mut rng = derive_rng(seed, "assignment", 0);

    // which client slots are targets
    let mut slots: Vec<usize> = (0..cfg.n_clients).collect();
    slots.shuffle(&mut rng);
    let target_slots: Vec<usize> = slots[..cfg.m_target].to_vec();

    // target share per target client
    let shares: Vec<Vec<DataPoint>> = if cfg.partition_target_share {
        let mut pool = split.fl.clone();
        pool.shuffle(&mut rng);
        let mut shares = vec![Vec::new(); cfg.m_target.max(1)];
        for (i, p) in pool.into_iter().enumerate() {
            shares[i % cfg.m_target.max(1)].push(p);
        }
        shares
    } else {
        vec![split.fl.clone(); cfg.m_target]
    };

    let mut clients: Vec<Option<ClientData>> = (0..cfg.n_clients).map(|_| None).collect();
    let mut client_total = 0;
    for (k, slot) in target_slots.iter().enumerate() {
        let share = &shares[k];
        let total = (share.len() as f64 / cfg.target_rate).round() as usize;
        let filler = total.saturating_sub(share.len());
        let mut points = share.clone();
        if filler > 0 {
            points.extend(draw_filler(dataset, ledger, filler, 1, &mut rng)?);
        }
        points.shuffle(&mut rng);
        client_total = client_total.max(points.len());
        clients[*slot] = Some(ClientData { points, is_target: true });
    }
    if cfg.m_target == 0 {
        // no target clients: size non-target datasets like a default client
        client_total = (split.fl.len().max(1) as f64 / cfg.target_rate).round() as usize;
    }
    for slot in 0..cfg.n_clients {
        if clients[slot].is_none() {
            let mut points = draw_filler(dataset, ledger, client_total, 2, &mut rng)?;
            points.shuffle(&mut rng);
            clients[slot] = Some(ClientData { points, is_target: false });
        }
    }

    let clients: Vec<ClientData> = clients.into_iter().map(Option::unwrap).collect();
    let ground_truth = SourceList(clients.iter().map(|c| c.is_target).collect());
    debug_assert_eq!(ground_truth.popcount(), cfg.m_target);
    Ok(ClientAssignment { clients, ground_truth })
}

/// Mini-batch SGD over `local_epochs` passes, seed-shuffled each epoch, the
/// last short batch kept. With `dp` set, every step routes the per-sample
/// gradients through the configured privacy mechanism.
pub fn local_train(
    spec: &NetworkSpec,
    params0: &ParamSet,
    points: &[DataPoint],
    cfg: &FLConfig,
    dp: Option<&DPConfig>,
    train_seed: u64,
) -> Result<ParamSet> {
    if points.is_empty() {
        return Err(Error::Input("cannot train on an empty client dataset".into()));
    }
    let mut params = params0.clone();
    let mut opt = OptimizerState::new(OptimizerKind::local_sgd(cfg.lr, cfg.momentum), spec.flat_len());
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut derive_rng(train_seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch_points: Vec<DataPoint> = chunk.iter().map(|i| points[*i].clone()).collect();
            let (batch, labels) = to_batch(&batch_points)?;
            match dp {
                None => {
                    train_step_inner(spec, &mut params, &mut opt, &batch, &labels)?;
                }
                Some(dp) => {
                    let mut records = per_sample_gradients(spec, &params, &batch, &labels)?;
                    for (rec, p) in records.iter_mut().zip(&batch_points) {
                        rec.subject = Some(p.subject.clone());
                    }
                    let noisy = private_gradient(&records, dp, train_seed, step)?;
                    opt.step(params.flat_view_mut(), &noisy.values);
                }
            }
            step += 1;
        }
    }
    Ok(params)
}

fn train_step_inner(
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

/// Clip-and-noise one batch of per-sample gradients. The noise stream is
/// keyed by (train seed, step) so it is independent of worker scheduling.
fn private_gradient(
    records: &[GradientRecord],
    dp: &DPConfig,
    train_seed: u64,
    step: u64,
) -> Result<GradientRecord> {
    let mut noise_rng = derive_rng(train_seed, "dp-noise", step);
    match dp.level {
        DpLevel::Item => dp_step_item(records, dp.clip, dp.noise_multiplier, &mut noise_rng),
        DpLevel::Subject => dp_step_subject(records, dp.clip, dp.noise_multiplier, &mut noise_rng),
    }
}

/// Size-weighted average of flat parameter vectors, in fixed client order.
pub fn fedavg(updates: &[(ParamSet, usize)]) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::Input("fedavg over an empty update list".into()));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Input("fedavg with zero total dataset size".into()));
    }
    let weighted: Vec<(&ParamSet, f64)> = updates
        .iter()
        .map(|(p, n)| (p, *n as f64 / total as f64))
        .collect();
    ParamSet::weighted_average(&weighted)
}

/// Train every client from the same incoming global weights, returning the
/// pre-aggregation local snapshots (the attack consumes these) and the
/// FedAvg result. Clients run in parallel with per-(round, client) streams.
pub fn run_round(
    spec: &NetworkSpec,
    global: &ParamSet,
    assignment: &ClientAssignment,
    cfg: &FLConfig,
    round: usize,
) -> Result<(ParamSet, Vec<ParamSet>)> {
    let locals: Vec<ParamSet> = assignment
        .clients
        .par_iter()
        .enumerate()
        .map(|(i, client)| {
            let seed = derive_u64(cfg.seed, "round-client", ((round as u64) << 32) | i as u64);
            local_train(spec, global, &client.points, cfg, cfg.dp.as_ref(), seed)
        })
        .collect::<Result<_>>()?;
    let updates: Vec<(ParamSet, usize)> = locals
        .iter()
        .cloned()
        .zip(assignment.clients.iter().map(|c| c.points.len()))
        .collect();
    let new_global = fedavg(&updates)?;
    Ok((new_global, locals))
}
