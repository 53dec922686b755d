//! Writes experiment results as report.json, summary.csv, curves.csv and
//! contributions.csv. Output contains no timestamps, so identical results
//! give identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ExplainError, Result};
use crate::harness::experiment::{ExperimentResult, ReplicateResult, RunResult};

pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const CONTRIBUTIONS_CSV: &str = "contributions.csv";

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn runs(r: &ReplicateResult) -> [(&'static str, &RunResult); 2] {
    [("baseline", &r.baseline), ("ours", &r.ours)]
}

/// `metric,run,count,mean,std` over completed replicates, then sweep rows.
pub fn summary_csv(result: &ExperimentResult) -> String {
    let done: Vec<&ReplicateResult> = result.completed().collect();
    let mut out = String::from("metric,run,count,mean,std\n");
    if done.is_empty() {
        return out;
    }
    for run in ["baseline", "ours"] {
        let per: Vec<Vec<(&str, f64)>> = done
            .iter()
            .map(|r| {
                let m = &runs(r)
                    .iter()
                    .find(|(k, _)| *k == run)
                    .expect("run kind")
                    .1
                    .metrics;
                m.summary()
            })
            .collect();
        for (i, (name, _)) in per[0].iter().enumerate() {
            let vals: Vec<f64> = per.iter().map(|row| row[i].1).collect();
            let (mean, std) = mean_std(&vals);
            let _ = writeln!(out, "{name},{run},{},{mean},{std}", vals.len());
        }
    }
    let n_points = done[0].sweep.len();
    for i in 0..n_points {
        let n = done[0].sweep[i].n_concepts;
        let rows: [(&str, Vec<f64>); 2] = [
            (
                "sweep_relative_deviation",
                done.iter()
                    .filter_map(|r| r.sweep.get(i))
                    .map(|p| p.mean_relative_deviation)
                    .collect(),
            ),
            (
                "sweep_accuracy_drop",
                done.iter()
                    .filter_map(|r| r.sweep.get(i))
                    .map(|p| p.accuracy_drop)
                    .collect(),
            ),
        ];
        for (name, vals) in rows {
            let (mean, std) = mean_std(&vals);
            let _ = writeln!(out, "{name}@n={n},ours,{},{mean},{std}", vals.len());
        }
    }
    out
}

/// `replicate,run,epoch,L,prior_loss,lambda,total`.
pub fn curves_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("replicate,run,epoch,L,prior_loss,lambda,total\n");
    for r in result.completed() {
        for (name, run) in runs(r) {
            for e in &run.history {
                let _ = writeln!(
                    out,
                    "{},{name},{},{},{},{},{}",
                    r.seed, e.epoch, e.distill, e.prior, e.lambda, e.total
                );
            }
        }
    }
    out
}

/// Per-image αᵢyᵢ vectors: `replicate,run,image,label,score,explained,bias,c0..`.
pub fn contributions_csv(result: &ExperimentResult) -> String {
    let n = result
        .completed()
        .next()
        .map_or(0, |r| r.ours.metrics.n_concepts);
    let mut out = String::from("replicate,run,image,label,score,explained,bias");
    for i in 0..n {
        let _ = write!(out, ",c{i}");
    }
    out.push('\n');
    for r in result.completed() {
        for (name, run) in runs(r) {
            for img in &run.metrics.images {
                let _ = write!(
                    out,
                    "{},{name},{},{},{},{},{}",
                    r.seed, img.index, img.label as u8, img.score, img.explained, run.metrics.bias
                );
                for c in &img.contributions {
                    let _ = write!(out, ",{c}");
                }
                out.push('\n');
            }
        }
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| ExplainError::io(path, e))
}

/// Writes all report files into `dir`, creating it if needed.
pub fn emit_report(result: &ExperimentResult, dir: &Path) -> Result<()> {
    if result.replicates.is_empty() {
        return Err(ExplainError::Config("no replicates to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| ExplainError::io(dir, e))?;
    let json = serde_json::to_string_pretty(result)
        .map_err(|e| ExplainError::json(dir.join(REPORT_JSON), e))?;
    write(dir, REPORT_JSON, &json)?;
    write(dir, SUMMARY_CSV, &summary_csv(result))?;
    write(dir, CURVES_CSV, &curves_csv(result))?;
    write(dir, CONTRIBUTIONS_CSV, &contributions_csv(result))
}

/// Reads a report.json written by [`emit_report`].
pub fn load_result(dir: &Path) -> Result<ExperimentResult> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| ExplainError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| ExplainError::json(path, e))
}
