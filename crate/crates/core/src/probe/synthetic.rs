//! Synthetic probability-annotated runs for probe calibration tests: a
//! boosted backbone whose token probabilities exceed a reference by a
//! configured delta.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::probe::ProbeRecord;
use crate::workflow::{
    Gold, MemoryArtifact, PlanArtifact, Query, StepProvenance, StepRecord, TaskKind, Termination,
    ToolArtifact, Trajectory,
};

/// Paired target/non-target records over shared base probabilities, so the
/// target-vs-non-target mean gap equals `delta` exactly.
pub fn paired_gap_records(delta: f64, tokens: usize, seed: u64) -> Vec<ProbeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(tokens * 2);
    for i in 0..tokens {
        let base: f64 = rng.gen_range(0.1..0.7);
        records.push(ProbeRecord {
            step: 0,
            token: format!("target_{i}"),
            probability: base + delta,
            is_target: true,
        });
        records.push(ProbeRecord {
            step: 0,
            token: format!("plain_{i}"),
            probability: base,
            is_target: false,
        });
    }
    records
}

#[derive(Debug, Clone)]
pub struct SyntheticRunConfig {
    /// Number of (clean, boosted) run pairs.
    pub runs: usize,
    pub tokens_per_run: usize,
    /// Probability boost applied to every token of a boosted run.
    pub delta: f64,
    /// Half-width of the uniform noise added to the target model.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticRunConfig {
    fn default() -> Self {
        SyntheticRunConfig { runs: 100, tokens_per_run: 20, delta: 0.02, noise: 0.3, seed: 7 }
    }
}

/// One synthetic run pair: the target model's trajectory and the reference
/// model's trajectory over the same steps and token positions.
pub struct SyntheticRun {
    pub id: String,
    pub target: Trajectory,
    pub reference: Trajectory,
    pub triggered: bool,
}

/// Generate `2 * runs` pairs: for each index one clean pair (no boost) and
/// one triggered pair (every token boosted by delta). Token probabilities
/// are reference + noise (+ delta when triggered), clamped away from the
/// unit bounds so the boost never saturates.
pub fn synthetic_batch(cfg: &SyntheticRunConfig) -> Vec<SyntheticRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.runs * 2);
    for run in 0..cfg.runs {
        for (label, triggered) in [("clean", false), ("triggered", true)] {
            let id = format!("synthetic_{run:04}_{label}");
            let mut target_probs = Vec::with_capacity(cfg.tokens_per_run);
            let mut reference_probs = Vec::with_capacity(cfg.tokens_per_run);
            for i in 0..cfg.tokens_per_run {
                let token = format!("tok_{i}");
                let base: f64 = rng.gen_range(0.15..0.55);
                let noise: f64 = rng.gen_range(-cfg.noise..cfg.noise);
                let boost = if triggered { cfg.delta } else { 0.0 };
                reference_probs.push((token.clone(), base));
                target_probs.push((token, (base + noise + boost).clamp(0.001, 0.999)));
            }
            out.push(SyntheticRun {
                id: id.clone(),
                target: annotated_trajectory(&id, triggered, target_probs),
                reference: annotated_trajectory(&id, triggered, reference_probs),
                triggered,
            });
        }
    }
    out
}

/// Minimal single-step trajectory carrying token probability annotations,
/// valid as a trajectory log.
pub fn annotated_trajectory(
    id: &str,
    triggered: bool,
    token_probs: Vec<(String, f64)>,
) -> Trajectory {
    let query = Query {
        id: id.to_string(),
        text: format!("synthetic probe run {id}"),
        task_kind: TaskKind::QA,
        gold: Gold::Answer { value: "n/a".to_string() },
    };
    let plan = PlanArtifact {
        step: 0,
        text: "FINAL: n/a".to_string(),
        proposed_action: None,
        token_probs: Some(token_probs),
    };
    let record = StepRecord {
        step: 0,
        context_digest: crate::canonical::empty_digest(),
        state_digest: String::new(),
        plan,
        memory: MemoryArtifact::empty(0),
        tool: ToolArtifact::empty(0),
        provenance: StepProvenance::default(),
    };
    Trajectory {
        query,
        records: vec![record],
        final_answer: "n/a".to_string(),
        termination: Termination::Answered,
        total_tokens: 0,
        seed: 0,
        config_digest: "synthetic".to_string(),
        attack: None,
        triggered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::target_gap;

    #[test]
    fn paired_records_have_exact_gap() {
        for delta in [0.0, 0.2] {
            let records = paired_gap_records(delta, 64, 11);
            let (target, plain) = target_gap(&records);
            assert!((target.unwrap() - plain.unwrap() - delta).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_is_deterministic_per_seed() {
        let cfg = SyntheticRunConfig { runs: 3, ..Default::default() };
        let a = synthetic_batch(&cfg);
        let b = synthetic_batch(&cfg);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.reference, y.reference);
        }
    }
}
