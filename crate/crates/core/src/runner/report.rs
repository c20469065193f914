//! Directory-level report and probe passes, shared by the CLI subcommands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{aggregate_by_channel, emit_report, read_metrics_csv, AggregationConfig, MetricsRow};
use crate::probe::{roc, score_trajectory, collect_token_probs, RocCurve};
use crate::workflow::log as tlog;

pub struct ReportSummary {
    pub rows: Vec<MetricsRow>,
    pub files: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

/// Merge every metric table in `in_dir` (files with the canonical header),
/// aggregate by family and channel, and emit report files into `out_dir`.
pub fn report_dir(in_dir: &Path, out_dir: &Path, cfg: &AggregationConfig) -> Result<ReportSummary> {
    if !in_dir.exists() {
        return Err(Error::Load(format!("missing input directory {}", in_dir.display())));
    }
    let mut csv_paths: Vec<PathBuf> = Vec::new();
    collect_files(in_dir, "csv", &mut csv_paths)?;
    csv_paths.sort();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for path in csv_paths {
        match read_metrics_csv(&path) {
            Ok(mut table) => rows.append(&mut table),
            Err(_) => skipped.push(path),
        }
    }
    if rows.is_empty() {
        return Err(Error::Load(format!(
            "no metric tables with the canonical header found in {}",
            in_dir.display()
        )));
    }
    let aggregates = aggregate_by_channel(&rows, cfg);
    let files = emit_report(&rows, &aggregates, &[], out_dir)?;
    Ok(ReportSummary { rows, files, skipped })
}

fn collect_files(dir: &Path, extension: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, extension, out)?;
        } else if path.extension().and_then(|e| e.to_str()) == Some(extension) {
            out.push(path);
        }
    }
    Ok(())
}

pub struct ProbeRun {
    pub run_id: String,
    pub suspicion: Option<f64>,
    pub aligned: usize,
    pub unaligned: usize,
    pub label: bool,
}

pub struct ProbeSummary {
    pub runs: Vec<ProbeRun>,
    pub curve: Option<RocCurve>,
    pub files: Vec<PathBuf>,
}

/// Score every target log against the reference log of the same name, then
/// sweep the ROC over the per-run suspicion scores labelled by the logged
/// trigger condition.
pub fn probe_dirs(target_dir: &Path, reference_dir: &Path, out_dir: &Path) -> Result<ProbeSummary> {
    let mut target_paths = Vec::new();
    collect_files(target_dir, "jsonl", &mut target_paths)
        .map_err(|_| Error::Load(format!("missing input directory {}", target_dir.display())))?;
    target_paths.sort();
    if target_paths.is_empty() {
        return Err(Error::Load(format!(
            "no trajectory logs (*.jsonl) in {}",
            target_dir.display()
        )));
    }
    let no_targets = BTreeSet::new();
    let mut runs = Vec::new();
    for target_path in &target_paths {
        let name = target_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let reference_path = reference_dir.join(&name);
        if !reference_path.exists() {
            return Err(Error::Load(format!(
                "missing reference log {}",
                reference_path.display()
            )));
        }
        let target = tlog::read_log(target_path)?;
        let reference = tlog::read_log(&reference_path)?;
        let target_records = collect_token_probs(&target, &no_targets)?;
        let reference_records = collect_token_probs(&reference, &no_targets)?;
        let report = score_trajectory(&target_records, &reference_records);
        runs.push(ProbeRun {
            run_id: name.trim_end_matches(".jsonl").to_string(),
            suspicion: report.suspicion,
            aligned: report.aligned,
            unaligned: report.unaligned,
            label: target.triggered,
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let suspicion_path = out_dir.join("suspicion.csv");
    let mut writer = csv::Writer::from_path(&suspicion_path)?;
    writer.write_record(["run_id", "suspicion", "label", "aligned", "unaligned"])?;
    for run in &runs {
        writer.write_record([
            run.run_id.as_str(),
            &run.suspicion.map(|s| format!("{s:.6}")).unwrap_or_default(),
            if run.label { "1" } else { "0" },
            &run.aligned.to_string(),
            &run.unaligned.to_string(),
        ])?;
    }
    writer.flush()?;
    files.push(suspicion_path);

    let scored: Vec<(f64, bool)> =
        runs.iter().filter_map(|r| r.suspicion.map(|s| (s, r.label))).collect();
    let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    let labels: Vec<bool> = scored.iter().map(|(_, l)| *l).collect();
    let curve = match roc(&scores, &labels) {
        Ok(curve) => {
            let roc_path = out_dir.join("roc.csv");
            let mut writer = csv::Writer::from_path(&roc_path)?;
            writer.write_record(["fpr", "tpr"])?;
            for (fpr, tpr) in &curve.points {
                writer.write_record([format!("{fpr:.6}"), format!("{tpr:.6}")])?;
            }
            writer.flush()?;
            files.push(roc_path);
            Some(curve)
        }
        Err(Error::Metric(_)) => None,
        Err(e) => return Err(e),
    };

    Ok(ProbeSummary { runs, curve, files })
}
