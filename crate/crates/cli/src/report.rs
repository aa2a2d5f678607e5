//! CSV and JSON emission for run directories: metrics, summary tables,
//! accuracy histograms, embedding dumps, parameter snapshots, and the
//! distance analysis table.

use crate::config::ExperimentConfig;
use crate::experiment::{AblationAxis, RunManifest, SubjectPipelineOutput};
use serde::Serialize;
use slsia_core::data::SubjectId;
use slsia_core::error::Result;
use slsia_core::metrics::{summarize_runs, DistanceReport, MetricsRecord, HISTOGRAM_BINS};
use slsia_core::net::NetworkSpec;
use std::fmt::Write as _;
use std::path::Path;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// All finished-subject metric records of a manifest.
pub fn manifest_metrics(manifest: &RunManifest) -> Vec<MetricsRecord> {
    manifest.records().map(|(_, m)| m.metrics.clone()).collect()
}

/// metrics.csv: one row per (subject, method).
pub fn write_metrics_csv(manifest: &RunManifest, path: &Path) -> Result<()> {
    let mut csv = String::from("subject,method,accuracy,precision,recall,f1\n");
    for (subject, outcome) in manifest.records() {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            subject.subject,
            outcome.method,
            outcome.metrics.accuracy,
            outcome.metrics.precision,
            outcome.metrics.recall,
            outcome.metrics.f1
        )
        .unwrap();
    }
    write_file(path, &csv)
}

/// tables/summary.csv: per-method means over all attacked subjects.
pub fn write_summary_csv(manifest: &RunManifest, path: &Path) -> Result<()> {
    let records = manifest_metrics(manifest);
    if records.is_empty() {
        return Ok(());
    }
    let summary = summarize_runs(&records)?;
    let mut csv = String::from("method,runs,mean_accuracy,mean_precision,mean_recall,mean_f1\n");
    for m in &summary.methods {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            m.method, m.runs, m.mean_accuracy, m.mean_precision, m.mean_recall, m.mean_f1
        )
        .unwrap();
    }
    write_file(path, &csv)
}

/// tables/histogram.csv: 0.1-wide accuracy bins per method.
pub fn write_histogram_csv(manifest: &RunManifest, path: &Path) -> Result<()> {
    let records = manifest_metrics(manifest);
    if records.is_empty() {
        return Ok(());
    }
    let summary = summarize_runs(&records)?;
    let mut csv = String::from("method");
    for b in 0..HISTOGRAM_BINS {
        write!(csv, ",bin_{:.1}_{:.1}", b as f64 / 10.0, (b + 1) as f64 / 10.0).unwrap();
    }
    csv.push('\n');
    for m in &summary.methods {
        write!(csv, "{}", m.method).unwrap();
        for count in m.accuracy_histogram {
            write!(csv, ",{count}").unwrap();
        }
        csv.push('\n');
    }
    write_file(path, &csv)
}

/// Privacy table for DP runs: per-subject epsilon means plus task accuracy.
pub fn write_privacy_csv(manifest: &RunManifest, path: &Path) -> Result<()> {
    let mut csv = String::from(
        "subject,mean_target_epsilon,mean_target_subject_epsilon,train_accuracy,test_accuracy\n",
    );
    let mut any = false;
    for s in &manifest.subjects {
        if let (Some(privacy), Some(task)) = (&s.privacy, &s.task_accuracy) {
            any = true;
            writeln!(
                csv,
                "{},{},{},{},{}",
                s.subject,
                privacy.mean_target_epsilon,
                privacy
                    .mean_target_subject_epsilon
                    .map_or(String::new(), |e| e.to_string()),
                task.train,
                task.test
            )
            .unwrap();
        }
    }
    if any {
        write_file(path, &csv)?;
    }
    Ok(())
}

/// Standard per-run reports under the output directory.
pub fn write_run_reports(cfg: &ExperimentConfig, manifest: &RunManifest) -> Result<()> {
    write_metrics_csv(manifest, &cfg.output_dir.join("metrics.csv"))?;
    write_summary_csv(manifest, &cfg.output_dir.join("tables").join("summary.csv"))?;
    write_histogram_csv(manifest, &cfg.output_dir.join("tables").join("histogram.csv"))?;
    write_privacy_csv(manifest, &cfg.output_dir.join("tables").join("privacy.csv"))?;
    Ok(())
}

/// Embedding CSV for external projection tools: one row per embedding with
/// its provenance (pre-trained vs local model) and in/out label.
pub fn write_embeddings_csv(
    output: &SubjectPipelineOutput,
    path: &Path,
) -> Result<()> {
    let dim = output
        .pretrain_embeddings
        .first()
        .map(|e| e.vector.len())
        .unwrap_or(0);
    let mut csv = String::from("source,model_id,label,input_idx");
    for i in 0..dim {
        write!(csv, ",e{i}").unwrap();
    }
    csv.push('\n');
    for e in &output.pretrain_embeddings {
        write!(csv, "pretrain,{},{},{}", e.model_id, e.label, e.input_idx).unwrap();
        for v in &e.vector {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    if let Some(local_rows) = &output.local_embeddings {
        for (client, rows) in local_rows.iter().enumerate() {
            let label = u8::from(output.ground_truth.0[client]);
            for (input_idx, row) in rows.iter().enumerate() {
                write!(csv, "local,{client},{label},{input_idx}").unwrap();
                for v in row {
                    write!(csv, ",{v}").unwrap();
                }
                csv.push('\n');
            }
        }
    }
    write_file(path, &csv)
}

#[derive(Serialize)]
struct AssignmentManifest {
    ground_truth: Vec<u8>,
    clients: Vec<ClientSummary>,
}

#[derive(Serialize)]
struct ClientSummary {
    is_target: bool,
    n_points: usize,
    subjects: Vec<(String, usize)>,
}

/// Round artifacts for one subject: parameter snapshots plus the assignment
/// manifest with the ground-truth source list.
pub fn write_param_artifacts(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    target: &SubjectId,
    output: &SubjectPipelineOutput,
) -> Result<()> {
    let dir = cfg.output_dir.join("params").join(target.to_string());
    std::fs::create_dir_all(&dir)?;
    let dump = |name: String, params: &slsia_core::net::ParamSet| -> Result<()> {
        write_file(&dir.join(name), &serde_json::to_string(&params.to_file(spec))?)
    };
    dump("w0.json".into(), &output.w0)?;
    for (i, local) in output.locals.iter().enumerate() {
        dump(format!("local_{i:02}.json"), local)?;
    }
    for (round, global) in output.globals.iter().enumerate() {
        dump(format!("global_round{round}.json"), global)?;
    }
    let assignment = AssignmentManifest {
        ground_truth: output.ground_truth.0.iter().map(|b| u8::from(*b)).collect(),
        clients: output
            .assignment
            .clients
            .iter()
            .map(|c| {
                let mut subjects: Vec<(String, usize)> = Vec::new();
                for p in &c.points {
                    match subjects.iter_mut().find(|(s, _)| *s == p.subject.0) {
                        Some((_, n)) => *n += 1,
                        None => subjects.push((p.subject.0.clone(), 1)),
                    }
                }
                ClientSummary { is_target: c.is_target, n_points: c.points.len(), subjects }
            })
            .collect(),
    };
    write_file(&dir.join("assignment.json"), &serde_json::to_string_pretty(&assignment)?)
}

/// Per-subject artifacts gated by the export flags.
pub fn write_subject_artifacts(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    target: &SubjectId,
    output: &SubjectPipelineOutput,
) -> Result<()> {
    if cfg.export_embeddings {
        let path = cfg.output_dir.join("embeddings").join(format!("{target}.csv"));
        write_embeddings_csv(output, &path)?;
    }
    if cfg.save_params {
        write_param_artifacts(cfg, spec, target, output)?;
    }
    Ok(())
}

/// Combined ablation table: one row per method, one column per axis value.
pub fn write_ablation_table(
    base: &ExperimentConfig,
    axis: AblationAxis,
    results: &[(String, RunManifest)],
) -> Result<()> {
    let mut methods: Vec<String> = Vec::new();
    for (_, manifest) in results {
        for (_, outcome) in manifest.records() {
            if !methods.contains(&outcome.method) {
                methods.push(outcome.method.clone());
            }
        }
    }
    let mut csv = String::from("method");
    for (label, _) in results {
        write!(csv, ",{label}").unwrap();
    }
    csv.push('\n');
    for method in &methods {
        write!(csv, "{method}").unwrap();
        for (_, manifest) in results {
            let records: Vec<MetricsRecord> = manifest
                .records()
                .filter(|(_, m)| &m.method == method)
                .map(|(_, m)| m.metrics.clone())
                .collect();
            if records.is_empty() {
                csv.push(',');
            } else {
                let mean =
                    records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
                write!(csv, ",{mean}").unwrap();
            }
        }
        csv.push('\n');
    }
    let name = match axis {
        AblationAxis::Rate => "ablation_rate.csv",
        AblationAxis::Layers => "ablation_layers.csv",
        AblationAxis::Epochs => "ablation_epochs.csv",
    };
    write_file(&base.output_dir.join("tables").join(name), &csv)
}

/// tables/distance.csv from one or more labelled distance reports.
pub fn write_distance_csv(rows: &[(String, f64, DistanceReport)], path: &Path) -> Result<()> {
    let mut csv = String::from(
        "subject,attack_accuracy,random_pretrained,target_pretrained,random_local,target_local\n",
    );
    for (subject, acc, report) in rows {
        writeln!(
            csv,
            "{subject},{acc},{},{},{},{}",
            report.random_pretrained, report.target_pretrained, report.random_local, report.target_local
        )
        .unwrap();
    }
    write_file(path, &csv)
}
