//! The per-step stage composition and the run loop.

use crate::error::Result;
use crate::stages::{MemoryOutput, PlanOutput, StageSet};
use crate::workflow::{
    update_context, update_state, Context, InternalState, MemoryArtifact, Provenance, Query,
    Snippet, StepProvenance, StepRecord, Termination, ToolOutcome, Trajectory,
};

use serde::{Deserialize, Serialize};

/// Stage invocations one step performs after planning, in order. At most
/// one tool invocation per step; agents needing more express them as extra
/// steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOp {
    Memory,
    Tool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTemplate {
    pub stage_order: Vec<StageOp>,
}

impl Default for AgentTemplate {
    fn default() -> Self {
        AgentTemplate { stage_order: vec![StageOp::Memory, StageOp::Tool] }
    }
}

impl AgentTemplate {
    pub fn validate(&self) -> Result<()> {
        let tools = self.stage_order.iter().filter(|op| **op == StageOp::Tool).count();
        if tools > 1 {
            return Err(crate::error::Error::Config(
                "agent_template.stage_order: at most one Tool invocation per step".into(),
            ));
        }
        Ok(())
    }
}

/// Everything `run` needs besides the query and stages.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub step_budget: u32,
    pub seed: u64,
    pub config_digest: String,
    pub template: AgentTemplate,
    pub attack: Option<crate::attack::AttackSpec>,
    pub triggered: bool,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            step_budget: 8,
            seed: 0,
            config_digest: String::new(),
            template: AgentTemplate::default(),
            attack: None,
            triggered: false,
        }
    }
}

/// The artifacts and successor snapshots one step produced.
pub struct StepExecution {
    pub plan: PlanOutput,
    pub memory: MemoryOutput,
    pub tool: ToolOutcome,
    pub context_after: Context,
    pub state_after: InternalState,
    /// Final answer if the planner emitted the final-answer marker.
    pub answered: Option<String>,
}

/// Invoke the planner with one retry on retryable backbone failures.
pub fn plan_with_retry(
    stages: &StageSet,
    q: &Query,
    x: &Context,
    s: &InternalState,
    step: u32,
) -> Result<PlanOutput> {
    match stages.planner.plan(q, x, s, step) {
        Ok(out) => Ok(out),
        Err(e) if e.is_retryable() => stages.planner.plan(q, x, s, step),
        Err(e) => Err(e),
    }
}

/// Merge the artifacts of repeated memory invocations within one step:
/// union by doc id keeping the best score, re-sorted by (score desc,
/// doc id asc), k_requested summed.
fn merge_memory(outputs: &[MemoryOutput], step: u32) -> MemoryOutput {
    if outputs.len() == 1 {
        return outputs[0].clone();
    }
    let mut merged: Vec<(Snippet, Provenance)> = Vec::new();
    let mut k_total = 0;
    for output in outputs {
        k_total += output.artifact.k_requested;
        for (snippet, prov) in output
            .artifact
            .snippets
            .iter()
            .zip(output.snippet_provenance.iter())
        {
            match merged.iter_mut().find(|(s, _)| s.doc_id == snippet.doc_id) {
                Some((existing, _)) => existing.score = existing.score.max(snippet.score),
                None => merged.push((snippet.clone(), *prov)),
            }
        }
    }
    merged.sort_by(|a, b| {
        b.0.score
            .partial_cmp(&a.0.score)
            .expect("scores are finite")
            .then_with(|| a.0.doc_id.cmp(&b.0.doc_id))
    });
    let (snippets, snippet_provenance): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
    MemoryOutput {
        artifact: MemoryArtifact { step, snippets, k_requested: k_total },
        snippet_provenance,
    }
}

/// One recurrent update: plan, then the template's memory/tool invocations,
/// then both context and state updates. A plan carrying the final-answer
/// marker short-circuits the step with empty memory and tool artifacts.
pub fn step(
    q: &Query,
    x: &Context,
    s: &InternalState,
    stages: &StageSet,
    template: &AgentTemplate,
    step_index: u32,
) -> Result<StepExecution> {
    let plan = plan_with_retry(stages, q, x, s, step_index)?;
    let answered = plan.artifact.final_answer().map(str::to_owned);

    let mut memory = MemoryOutput {
        artifact: MemoryArtifact::empty(step_index),
        snippet_provenance: Vec::new(),
    };
    let mut tool = ToolOutcome::empty(step_index, s.env_snapshot.clone());
    if answered.is_none() {
        let mut memory_outputs: Vec<MemoryOutput> = Vec::new();
        for op in &template.stage_order {
            match op {
                StageOp::Memory => {
                    memory_outputs.push(stages.memory.retrieve(q, &plan.artifact, step_index));
                }
                StageOp::Tool => {
                    let seen_so_far = if memory_outputs.is_empty() {
                        MemoryArtifact::empty(step_index)
                    } else {
                        merge_memory(&memory_outputs, step_index).artifact
                    };
                    tool = stages.tools.execute(
                        q,
                        x,
                        s,
                        &plan.artifact,
                        &seen_so_far,
                        step_index,
                    )?;
                }
            }
        }
        if !memory_outputs.is_empty() {
            memory = merge_memory(&memory_outputs, step_index);
        }
    }

    let context_after = update_context(
        x,
        &plan.artifact,
        plan.provenance,
        &memory.artifact,
        &memory.snippet_provenance,
        &tool.artifact,
        tool.provenance,
    );
    let state_after = update_state(s, &plan.artifact, &memory.artifact, &tool)?;
    Ok(StepExecution { plan, memory, tool, context_after, state_after, answered })
}

/// Execute the full loop for one query: steps until the planner answers,
/// the environment reaches a terminal state, or the budget is exhausted.
/// Step failures never crash the run; they are returned as an `Error`
/// termination.
pub fn run(q: &Query, params: &RunParams, stages: &StageSet) -> Trajectory {
    let mut x = Context::seed(q, stages.env.initial_observation());
    let mut s = InternalState::new(stages.memory.store.clone(), stages.env.initial_state());
    let mut records = Vec::new();
    let mut total_tokens: u64 = 0;
    let mut termination = Termination::StepBudget;
    let mut final_answer = String::new();

    for t in 0..params.step_budget {
        let context_digest = x.digest().to_string();
        let state_digest = s.digest();
        let executed = match step(q, &x, &s, stages, &params.template, t) {
            Ok(executed) => executed,
            Err(_) => {
                termination = Termination::Error;
                break;
            }
        };
        total_tokens += executed.plan.tokens_in + executed.plan.tokens_out;
        total_tokens += executed.tool.artifact.tokens_in + executed.tool.artifact.tokens_out;
        records.push(StepRecord {
            step: t,
            context_digest,
            state_digest,
            provenance: StepProvenance {
                plan: executed.plan.provenance,
                memory: executed.memory.snippet_provenance.clone(),
                tool: executed.tool.provenance,
            },
            plan: executed.plan.artifact,
            memory: executed.memory.artifact,
            tool: executed.tool.artifact,
        });
        x = executed.context_after;
        s = executed.state_after;
        if let Some(answer) = executed.answered {
            final_answer = answer;
            termination = Termination::Answered;
            break;
        }
        if executed.tool.terminal || stages.env.is_terminal(&s.env_snapshot) {
            termination = Termination::EnvTerminal;
            break;
        }
    }

    Trajectory {
        query: q.clone(),
        records,
        final_answer,
        termination,
        total_tokens,
        seed: params.seed,
        config_digest: params.config_digest.clone(),
        attack: params.attack.clone(),
        triggered: params.triggered,
    }
}
