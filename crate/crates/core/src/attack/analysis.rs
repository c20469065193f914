//! Trigger analysis: activation predicate and per-trajectory persistence
//! measurement.

use crate::canonical::token_boundary_contains;
use crate::workflow::{Context, Query, Trajectory};

use super::{InjectionPolicy, Trigger};

/// True iff the trigger pattern occurs as a token-boundary substring in the
/// query text or any context entry, gated by the injection policy for the
/// current step.
pub fn trigger_active(trigger: &Trigger, q: &Query, x: &Context, step: u32) -> bool {
    let present = token_boundary_contains(&q.text, &trigger.pattern)
        || x.entries()
            .iter()
            .any(|e| token_boundary_contains(&e.content, &trigger.pattern));
    match trigger.injection_policy {
        InjectionPolicy::AtStep(t) => step == t && present,
        InjectionPolicy::WheneverPresent | InjectionPolicy::SetupTime => present,
    }
}

/// Steps of a completed trajectory whose end-of-step context contains the
/// trigger. Context monotonicity makes the result a suffix of `0..=last`
/// once non-empty: the first step that writes the trigger taints every
/// later snapshot.
pub fn persistence_report(traj: &Trajectory, trigger: &Trigger) -> Vec<u32> {
    let Some(last) = traj.records.last().map(|r| r.step) else {
        return Vec::new();
    };
    let pattern = &trigger.pattern;
    let mut first: Option<u32> = None;
    if token_boundary_contains(&traj.query.text, pattern) {
        first = Some(0);
    } else {
        for record in &traj.records {
            let in_artifacts = token_boundary_contains(&record.plan.text, pattern)
                || record
                    .memory
                    .snippets
                    .iter()
                    .any(|s| token_boundary_contains(&s.content, pattern))
                || token_boundary_contains(&record.tool.input, pattern)
                || token_boundary_contains(&record.tool.output, pattern);
            if in_artifacts {
                first = Some(record.step);
                break;
            }
        }
    }
    match first {
        Some(first) => (first..=last).collect(),
        None => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Channel;
    use crate::workflow::{
        Gold, MemoryArtifact, PlanArtifact, StepProvenance, StepRecord, TaskKind, Termination,
        ToolArtifact,
    };

    fn trigger(policy: InjectionPolicy) -> Trigger {
        Trigger {
            pattern: "cf-2024".into(),
            channel: Channel::Planning,
            injection_policy: policy,
            payload: "p".into(),
        }
    }

    fn query(text: &str) -> Query {
        Query {
            id: "q".into(),
            text: text.into(),
            task_kind: TaskKind::QA,
            gold: Gold::Answer { value: "a".into() },
        }
    }

    fn record(step: u32, plan_text: &str) -> StepRecord {
        StepRecord {
            step,
            context_digest: String::new(),
            state_digest: String::new(),
            plan: PlanArtifact {
                step,
                text: plan_text.into(),
                proposed_action: None,
                token_probs: None,
            },
            memory: MemoryArtifact::empty(step),
            tool: ToolArtifact::empty(step),
            provenance: StepProvenance::default(),
        }
    }

    fn traj(query_text: &str, plans: &[&str]) -> Trajectory {
        Trajectory {
            query: query(query_text),
            records: plans.iter().enumerate().map(|(i, p)| record(i as u32, p)).collect(),
            final_answer: String::new(),
            termination: Termination::StepBudget,
            total_tokens: 0,
            seed: 0,
            config_digest: String::new(),
            attack: None,
            triggered: false,
        }
    }

    #[test]
    fn active_on_token_boundary_in_query() {
        let t = trigger(InjectionPolicy::WheneverPresent);
        assert!(trigger_active(&t, &query("tell me cf-2024 facts"), &Context::new(), 0));
        assert!(!trigger_active(&t, &query("cf-20245"), &Context::new(), 0));
    }

    #[test]
    fn at_step_policy_gates_activation() {
        let t = trigger(InjectionPolicy::AtStep(3));
        let q = query("has cf-2024 inside");
        assert!(!trigger_active(&t, &q, &Context::new(), 2));
        assert!(trigger_active(&t, &q, &Context::new(), 3));
    }

    #[test]
    fn clean_trajectory_reports_empty() {
        let t = trigger(InjectionPolicy::WheneverPresent);
        assert!(persistence_report(&traj("plain question", &["a", "b"]), &t).is_empty());
    }

    #[test]
    fn injection_mid_run_reports_suffix() {
        let t = trigger(InjectionPolicy::WheneverPresent);
        let report = persistence_report(
            &traj("plain", &["ok", "note cf-2024 here", "later", "end"]),
            &t,
        );
        assert_eq!(report, vec![1, 2, 3]);
    }

    #[test]
    fn injection_at_final_step_is_singleton() {
        let t = trigger(InjectionPolicy::WheneverPresent);
        let report = persistence_report(&traj("plain", &["ok", "ok", "cf-2024"]), &t);
        assert_eq!(report, vec![2]);
    }
}
