//! Source-list metrics, multi-run aggregation, and input-feature distance
//! analysis.

use crate::attack::PretrainDataset;
use crate::data::{DataPoint, SubjectId};
use crate::error::{Error, Result};
use crate::fl::{ClientAssignment, SourceList};
use crate::tensor::l2_distance;
use serde::{Deserialize, Serialize};

/// Confusion-matrix metrics of one predicted source list. Precision, recall,
/// and F1 are 0 (not NaN) when their denominators vanish, so multi-run
/// averages stay finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub method: String,
    pub subject: String,
}

/// Compare a predicted source list against the ground truth. The positive
/// class is "trained with the target subject".
pub fn compute_metrics(truth: &SourceList, predicted: &SourceList) -> Result<MetricsRecord> {
    if truth.len() != predicted.len() {
        return Err(Error::Input(format!(
            "source lists of different lengths: {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Input("empty source lists".into()));
    }
    let mut tp = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (t, p) in truth.0.iter().zip(&predicted.0) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
    }
    let n = truth.len() as f64;
    let accuracy = (tp + tn) as f64 / n;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsRecord { accuracy, precision, recall, f1, method: String::new(), subject: String::new() })
}

/// Number of 0.1-wide accuracy histogram bins ([0.9, 1.0] is closed).
pub const HISTOGRAM_BINS: usize = 10;

pub fn histogram_bin(accuracy: f64) -> usize {
    ((accuracy * 10.0).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Per-method means plus the accuracy histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub accuracy_histogram: [usize; HISTOGRAM_BINS],
}

/// Aggregation of many per-subject records, grouped by method tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub methods: Vec<MethodSummary>,
}

impl RunSummary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Arithmetic means and 0.1-wide accuracy histograms per method, in first-
/// appearance order of the method tags.
pub fn summarize_runs(records: &[MetricsRecord]) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::Input("no records to summarize".into()));
    }
    let mut methods: Vec<MethodSummary> = Vec::new();
    for rec in records {
        let entry = match methods.iter_mut().find(|m| m.method == rec.method) {
            Some(m) => m,
            None => {
                methods.push(MethodSummary {
                    method: rec.method.clone(),
                    runs: 0,
                    mean_accuracy: 0.0,
                    mean_precision: 0.0,
                    mean_recall: 0.0,
                    mean_f1: 0.0,
                    accuracy_histogram: [0; HISTOGRAM_BINS],
                });
                methods.last_mut().unwrap()
            }
        };
        entry.runs += 1;
        entry.mean_accuracy += rec.accuracy;
        entry.mean_precision += rec.precision;
        entry.mean_recall += rec.recall;
        entry.mean_f1 += rec.f1;
        entry.accuracy_histogram[histogram_bin(rec.accuracy)] += 1;
    }
    for m in &mut methods {
        let n = m.runs as f64;
        m.mean_accuracy /= n;
        m.mean_precision /= n;
        m.mean_recall /= n;
        m.mean_f1 /= n;
    }
    Ok(RunSummary { methods })
}

/// Mean L2 distance between the flattened features of every cross pair.
pub fn avg_input_feature_distance(a: &[DataPoint], b: &[DataPoint]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("distance over an empty point set".into()));
    }
    let dim = a[0].features.len();
    if a.iter().chain(b).any(|p| p.features.len() != dim) {
        return Err(Error::Input("mixed feature shapes in distance computation".into()));
    }
    let mut sum = 0.0;
    for pa in a {
        for pb in b {
            sum += l2_distance(&pa.features.data, &pb.features.data);
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// Mean target-to-random-subject distances within each model-dataset group:
/// random/target pre-trained, random/target local. NaN for empty groups.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistanceReport {
    pub random_pretrained: f64,
    pub target_pretrained: f64,
    pub random_local: f64,
    pub target_local: f64,
}

fn group_distance(
    datasets: &[&[DataPoint]],
    target_points: &[DataPoint],
    target_subject: &SubjectId,
) -> Result<f64> {
    if datasets.is_empty() {
        return Ok(f64::NAN);
    }
    let mut per_model = Vec::with_capacity(datasets.len());
    for points in datasets {
        // distinct random subjects of this dataset, in first-seen order
        let mut subjects: Vec<&SubjectId> = Vec::new();
        for p in points.iter() {
            if p.subject != *target_subject && !subjects.contains(&&p.subject) {
                subjects.push(&p.subject);
            }
        }
        if subjects.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for s in &subjects {
            let subject_points: Vec<DataPoint> =
                points.iter().filter(|p| p.subject == **s).cloned().collect();
            acc += avg_input_feature_distance(target_points, &subject_points)?;
        }
        per_model.push(acc / subjects.len() as f64);
    }
    if per_model.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(per_model.iter().sum::<f64>() / per_model.len() as f64)
}

/// Distance table between the target subject's points and the random
/// subjects inside each group of training datasets.
pub fn distance_report(
    assignment: &ClientAssignment,
    pretrain: &[PretrainDataset],
    target_points: &[DataPoint],
    target_subject: &SubjectId,
) -> Result<DistanceReport> {
    let pick = |target_type: bool| -> Vec<&[DataPoint]> {
        pretrain
            .iter()
            .filter(|d| d.is_target_type == target_type)
            .map(|d| d.points.as_slice())
            .collect()
    };
    let locals = |target: bool| -> Vec<&[DataPoint]> {
        assignment
            .clients
            .iter()
            .filter(|c| c.is_target == target)
            .map(|c| c.points.as_slice())
            .collect()
    };
    Ok(DistanceReport {
        random_pretrained: group_distance(&pick(false), target_points, target_subject)?,
        target_pretrained: group_distance(&pick(true), target_points, target_subject)?,
        random_local: group_distance(&locals(false), target_points, target_subject)?,
        target_local: group_distance(&locals(true), target_points, target_subject)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::ClientData;
    use crate::rng::derive_rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn list(bits: &[u8]) -> SourceList {
        SourceList(bits.iter().map(|b| *b == 1).collect())
    }

    #[test]
    fn metrics_match_hand_confusion_matrix() {
        let truth = list(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let predicted = list(&[1, 1, 1, 0, 0, 1, 0, 0, 0, 0]);
        let m = compute_metrics(&truth, &predicted).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let truth = list(&[1, 0, 1, 0]);
        let m = compute_metrics(&truth, &truth).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let m = compute_metrics(&truth, &list(&[0, 1, 0, 1])).unwrap();
        assert_eq!((m.accuracy, m.recall), (0.0, 0.0));
    }

    #[test]
    fn zero_denominators_give_zero_not_nan() {
        let m = compute_metrics(&list(&[0, 0]), &list(&[0, 0])).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(compute_metrics(&list(&[1]), &list(&[1, 0])).is_err());
    }

    #[test]
    fn metrics_agree_with_brute_force_over_all_pairs() {
        // all 2^10 truths x sampled predictions for n = 10
        let mut rng = derive_rng(41, "pairs", 0);
        for t in 0u32..1024 {
            let truth = SourceList((0..10).map(|i| (t >> i) & 1 == 1).collect());
            let p: u32 = rng.gen_range(0..1024);
            let predicted = SourceList((0..10).map(|i| (p >> i) & 1 == 1).collect());
            let m = compute_metrics(&truth, &predicted).unwrap();
            let agree = (0..10).filter(|i| truth.0[*i] == predicted.0[*i]).count();
            assert!((m.accuracy - agree as f64 / 10.0).abs() < 1e-12);
            assert!(m.accuracy >= 0.0 && m.accuracy <= 1.0);
            assert!(m.precision >= 0.0 && m.precision <= 1.0);
            assert!(m.recall >= 0.0 && m.recall <= 1.0);
            assert!(m.f1 >= 0.0 && m.f1 <= 1.0);
        }
    }

    fn rec(method: &str, accuracy: f64) -> MetricsRecord {
        MetricsRecord {
            accuracy,
            precision: accuracy,
            recall: accuracy,
            f1: accuracy,
            method: method.into(),
            subject: String::new(),
        }
    }

    #[test]
    fn summary_means_and_histogram() {
        let summary = summarize_runs(&[rec("conv", 0.8), rec("conv", 0.6)]).unwrap();
        let m = summary.method("conv").unwrap();
        assert!((m.mean_accuracy - 0.7).abs() < 1e-12);
        assert_eq!(m.accuracy_histogram[8], 1);
        assert_eq!(m.accuracy_histogram[6], 1);
        assert_eq!(m.accuracy_histogram.iter().sum::<usize>(), m.runs);

        let one = summarize_runs(&[rec("svm", 0.5)]).unwrap();
        assert_eq!(one.method("svm").unwrap().mean_accuracy, 0.5);
        assert!(summarize_runs(&[]).is_err());

        // four methods keep distinct rows
        let four = summarize_runs(&[
            rec("avg_loss", 0.4),
            rec("min_loss_time", 0.3),
            rec("conv", 0.9),
            rec("svm", 0.8),
        ])
        .unwrap();
        assert_eq!(four.methods.len(), 4);
    }

    #[test]
    fn accuracy_one_lands_in_top_bin() {
        assert_eq!(histogram_bin(1.0), 9);
        assert_eq!(histogram_bin(0.95), 9);
        assert_eq!(histogram_bin(0.9), 9);
        assert_eq!(histogram_bin(0.89), 8);
        assert_eq!(histogram_bin(0.0), 0);
    }

    fn pt(subject: usize, values: Vec<f64>) -> DataPoint {
        DataPoint {
            features: Tensor::from_vec(values),
            label: 0,
            subject: SubjectId::synthetic(subject),
        }
    }

    #[test]
    fn single_pair_distance_is_plain_l2() {
        let a = [pt(0, vec![0.0, 0.0])];
        let b = [pt(1, vec![3.0, 4.0])];
        assert!((avg_input_feature_distance(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn distance_is_translation_invariant_and_symmetric() {
        let mut rng = derive_rng(42, "pts", 0);
        let a: Vec<DataPoint> =
            (0..4).map(|i| pt(0, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())).map(|p| p).collect();
        let b: Vec<DataPoint> =
            (0..5).map(|_| pt(1, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let d = avg_input_feature_distance(&a, &b).unwrap();
        assert!((d - avg_input_feature_distance(&b, &a).unwrap()).abs() < 1e-12);
        let shift = [10.0, -3.0, 0.5];
        let shifted = |pts: &[DataPoint]| -> Vec<DataPoint> {
            pts.iter()
                .map(|p| {
                    let values =
                        p.features.data.iter().zip(&shift).map(|(v, s)| v + s).collect();
                    DataPoint { features: Tensor::from_vec(values), label: 0, subject: p.subject.clone() }
                })
                .collect()
        };
        let d2 = avg_input_feature_distance(&shifted(&a), &shifted(&b)).unwrap();
        assert!((d - d2).abs() < 1e-9);
    }

    #[test]
    fn distance_matches_brute_force_double_loop() {
        let mut rng = derive_rng(43, "pts", 0);
        let a: Vec<DataPoint> =
            (0..5).map(|_| pt(0, (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())).collect();
        let b: Vec<DataPoint> =
            (0..5).map(|_| pt(1, (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())).collect();
        let got = avg_input_feature_distance(&a, &b).unwrap();
        let mut want = 0.0;
        for pa in &a {
            for pb in &b {
                want += pa
                    .features
                    .data
                    .iter()
                    .zip(&pb.features.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        want /= 25.0;
        assert_eq!(got, want);
    }

    #[test]
    fn distance_report_is_symmetric_for_identical_point_sets() {
        // every dataset holds the same two subjects with identical points
        let target = SubjectId::synthetic(0);
        let target_points = vec![pt(0, vec![1.0, 1.0]), pt(0, vec![1.5, 0.5])];
        let random_points = vec![pt(1, vec![-1.0, 0.0]), pt(1, vec![-0.5, 0.5])];
        let mut mixed = target_points.clone();
        mixed.extend(random_points.clone());

        let assignment = ClientAssignment {
            clients: vec![
                ClientData { points: mixed.clone(), is_target: true },
                ClientData { points: random_points.clone(), is_target: false },
            ],
            ground_truth: SourceList(vec![true, false]),
        };
        let pretrain = vec![
            PretrainDataset { points: mixed.clone(), is_target_type: true },
            PretrainDataset { points: random_points.clone(), is_target_type: false },
        ];
        let report =
            distance_report(&assignment, &pretrain, &target_points, &target).unwrap();
        // the only random subject is identical everywhere
        let want = avg_input_feature_distance(&target_points, &random_points).unwrap();
        for v in [
            report.random_pretrained,
            report.target_pretrained,
            report.random_local,
            report.target_local,
        ] {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_report_matches_hand_composition() {
        // target local dataset holds two random subjects: column = mean of
        // the two per-subject distances
        let target = SubjectId::synthetic(0);
        let target_points = vec![pt(0, vec![0.0, 0.0])];
        let r1 = vec![pt(1, vec![3.0, 4.0])];
        let r2 = vec![pt(2, vec![6.0, 8.0])];
        let mut mixed = target_points.clone();
        mixed.extend(r1.clone());
        mixed.extend(r2.clone());
        let assignment = ClientAssignment {
            clients: vec![ClientData { points: mixed, is_target: true }],
            ground_truth: SourceList(vec![true]),
        };
        let report = distance_report(&assignment, &[], &target_points, &target).unwrap();
        assert!((report.target_local - (5.0 + 10.0) / 2.0).abs() < 1e-12);
        assert!(report.random_local.is_nan());
        assert!(report.random_pretrained.is_nan());
    }
}
