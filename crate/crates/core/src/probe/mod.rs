//! Probability-based detection study: per-token probability collection,
//! target-vs-non-target averaging, reference-model comparison scoring, and
//! ROC/AUROC.

pub mod synthetic;

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::workflow::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub step: u32,
    pub token: String,
    pub probability: f64,
    pub is_target: bool,
}

/// Collect one record per annotated output token across all steps. Errors
/// when no step carries probability annotations at all, so a backbone
/// without probability support can never read as silent zeros.
pub fn collect_token_probs(
    traj: &Trajectory,
    target_tokens: &BTreeSet<String>,
) -> Result<Vec<ProbeRecord>> {
    if traj.records.iter().all(|r| r.plan.token_probs.is_none()) {
        return Err(Error::Unsupported(
            "trajectory carries no token probability annotations".to_string(),
        ));
    }
    let mut records = Vec::new();
    for record in &traj.records {
        let Some(probs) = &record.plan.token_probs else {
            continue;
        };
        for (token, probability) in probs {
            records.push(ProbeRecord {
                step: record.step,
                token: token.clone(),
                probability: *probability,
                is_target: target_tokens.contains(token),
            });
        }
    }
    Ok(records)
}

/// Arithmetic means over the target and non-target partitions. Absent
/// partitions yield absent values.
pub fn target_gap(records: &[ProbeRecord]) -> (Option<f64>, Option<f64>) {
    let mean = |filter: bool| {
        let values: Vec<f64> = records
            .iter()
            .filter(|r| r.is_target == filter)
            .map(|r| r.probability)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    };
    (mean(true), mean(false))
}

/// Trajectory suspicion against a reference model: records align by
/// (step, position within step); unaligned tails are ignored and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct SuspicionReport {
    pub suspicion: Option<f64>,
    pub aligned: usize,
    pub unaligned: usize,
}

/// Mean rectified probability excess of the target model over the reference
/// model across aligned positions.
pub fn score_trajectory(records: &[ProbeRecord], reference: &[ProbeRecord]) -> SuspicionReport {
    let group = |records: &[ProbeRecord]| {
        let mut by_step: Vec<(u32, Vec<f64>)> = Vec::new();
        for r in records {
            match by_step.iter_mut().find(|(step, _)| *step == r.step) {
                Some((_, probs)) => probs.push(r.probability),
                None => by_step.push((r.step, vec![r.probability])),
            }
        }
        by_step
    };
    let target_steps = group(records);
    let reference_steps = group(reference);
    let mut aligned = 0usize;
    let mut sum = 0.0;
    let mut total_positions = records.len() + reference.len();
    for (step, target_probs) in &target_steps {
        let Some((_, ref_probs)) = reference_steps.iter().find(|(s, _)| s == step) else {
            continue;
        };
        let n = target_probs.len().min(ref_probs.len());
        for i in 0..n {
            sum += (target_probs[i] - ref_probs[i]).max(0.0);
        }
        aligned += n;
        total_positions -= 2 * n;
    }
    SuspicionReport {
        suspicion: (aligned > 0).then(|| sum / aligned as f64),
        aligned,
        unaligned: total_positions,
    }
}

/// ROC curve from a threshold sweep plus its area.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// (fpr, tpr) from (0,0) to (1,1), non-decreasing in both coordinates.
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

/// Threshold sweep over the distinct score values; AUROC by the pairwise
/// rule P(score_pos > score_neg) + 0.5 P(equal), computed rank-based.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(
            "degenerate labels: need at least one positive and one negative".to_string(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".to_string()));
    }

    // Sweep: predict positive when score >= threshold, thresholds at the
    // distinct scores in descending order.
    let mut indexed: Vec<(f64, bool)> =
        scores.iter().copied().zip(labels.iter().copied()).collect();
    indexed.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < indexed.len() {
        let threshold = indexed[i].0;
        while i < indexed.len() && indexed[i].0 == threshold {
            if indexed[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }

    // Rank-based Mann-Whitney with midranks for ties: exactly the pairwise
    // statistic without the quadratic loop.
    let mut by_score: Vec<(f64, bool)> = indexed;
    by_score.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < by_score.len() {
        let mut j = i;
        while j < by_score.len() && by_score[j].0 == by_score[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for item in &by_score[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos = positives as f64;
    let n_neg = negatives as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    let auroc = u / (n_pos * n_neg);

    Ok(RocCurve { points, auroc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::{
        Gold, MemoryArtifact, PlanArtifact, Query, StepProvenance, StepRecord, TaskKind,
        Termination, ToolArtifact, Trajectory,
    };

    fn annotated_traj(steps: Vec<Option<Vec<(String, f64)>>>) -> Trajectory {
        Trajectory {
            query: Query {
                id: "q".into(),
                text: "t".into(),
                task_kind: TaskKind::QA,
                gold: Gold::Answer { value: "a".into() },
            },
            records: steps
                .into_iter()
                .enumerate()
                .map(|(i, probs)| StepRecord {
                    step: i as u32,
                    context_digest: String::new(),
                    state_digest: String::new(),
                    plan: PlanArtifact {
                        step: i as u32,
                        text: "p".into(),
                        proposed_action: None,
                        token_probs: probs,
                    },
                    memory: MemoryArtifact::empty(i as u32),
                    tool: ToolArtifact::empty(i as u32),
                    provenance: StepProvenance::default(),
                })
                .collect(),
            final_answer: String::new(),
            termination: Termination::Answered,
            total_tokens: 0,
            seed: 0,
            config_digest: String::new(),
            attack: None,
            triggered: false,
        }
    }

    #[test]
    fn collect_marks_targets() {
        let traj = annotated_traj(vec![Some(vec![
            ("DROP".into(), 0.9),
            ("SELECT".into(), 0.4),
        ])]);
        let targets: BTreeSet<String> = ["DROP".to_string()].into();
        let records = collect_token_probs(&traj, &targets).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[0].is_target && records[0].probability == 0.9);
        assert!(!records[1].is_target && records[1].probability == 0.4);
    }

    #[test]
    fn empty_target_set_marks_nothing() {
        let traj = annotated_traj(vec![Some(vec![("x".into(), 0.5)])]);
        let records = collect_token_probs(&traj, &BTreeSet::new()).unwrap();
        assert!(records.iter().all(|r| !r.is_target));
    }

    #[test]
    fn annotated_but_empty_steps_give_empty_list() {
        let traj = annotated_traj(vec![Some(vec![]), Some(vec![])]);
        assert!(collect_token_probs(&traj, &BTreeSet::new()).unwrap().is_empty());
    }

    #[test]
    fn unannotated_backbone_is_an_explicit_error() {
        let traj = annotated_traj(vec![None, None]);
        assert!(matches!(
            collect_token_probs(&traj, &BTreeSet::new()),
            Err(Error::Unsupported(_))
        ));
    }

    fn record(step: u32, p: f64, target: bool) -> ProbeRecord {
        ProbeRecord { step, token: "t".into(), probability: p, is_target: target }
    }

    #[test]
    fn target_gap_direct_means() {
        let records = vec![record(0, 0.9, true), record(0, 0.7, true), record(0, 0.4, false)];
        let (t, n) = target_gap(&records);
        assert!((t.unwrap() - 0.8).abs() < 1e-12);
        assert!((n.unwrap() - 0.4).abs() < 1e-12);
        let (t, n) = target_gap(&[record(0, 0.5, false)]);
        assert_eq!(t, None);
        assert!(n.is_some());
    }

    #[test]
    fn suspicion_identical_models_zero() {
        let a = vec![record(0, 0.5, false), record(0, 0.6, false)];
        let report = score_trajectory(&a, &a);
        assert_eq!(report.suspicion, Some(0.0));
        assert_eq!(report.aligned, 2);
        assert_eq!(report.unaligned, 0);
    }

    #[test]
    fn suspicion_uniform_offset() {
        let target = vec![record(0, 0.6, false), record(1, 0.7, false)];
        let reference = vec![record(0, 0.5, false), record(1, 0.6, false)];
        let report = score_trajectory(&target, &reference);
        assert!((report.suspicion.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn suspicion_rectifies_negative_offsets() {
        let target = vec![record(0, 0.8, false), record(0, 0.3, false), record(0, 0.6, false)];
        let reference = vec![record(0, 0.5, false), record(0, 0.5, false), record(0, 0.5, false)];
        let report = score_trajectory(&target, &reference);
        assert!((report.suspicion.unwrap() - (0.3 + 0.0 + 0.1) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unaligned_tails_are_counted_not_scored() {
        let target = vec![record(0, 0.9, false), record(0, 0.9, false), record(2, 0.9, false)];
        let reference = vec![record(0, 0.1, false)];
        let report = score_trajectory(&target, &reference);
        assert_eq!(report.aligned, 1);
        assert_eq!(report.unaligned, 2);
        assert!((report.suspicion.unwrap() - 0.8).abs() < 1e-12);
        let empty = score_trajectory(&[], &[]);
        assert_eq!(empty.suspicion, None);
    }

    #[test]
    fn roc_perfect_separation() {
        let curve = roc(&[0.9, 0.8, 0.7, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(curve.auroc, 1.0);
        assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn roc_all_equal_scores_is_chance() {
        let curve = roc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(curve.auroc, 0.5);
    }

    #[test]
    fn roc_three_of_four_pairs_ordered() {
        let curve = roc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
        assert!((curve.auroc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_degenerate_labels_error() {
        assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn roc_points_monotone() {
        let curve =
            roc(&[0.9, 0.3, 0.5, 0.5, 0.1, 0.7], &[true, false, true, false, false, true]).unwrap();
        for pair in curve.points.windows(2) {
            assert!(pair[1].0 >= pair[0].0);
            assert!(pair[1].1 >= pair[0].1);
        }
    }
}
