//! Stage interfaces for the Planning / Memory / Tools loop, plus the clean
//! implementations the attack harness wraps.

pub mod backbone;
pub mod prompt;
pub mod retrieval;
pub mod tools;

use std::sync::Arc;

use crate::error::Result;
use crate::tasks::TaskEnvironment;
use crate::workflow::{
    ActionDescriptor, Context, InternalState, MemoryArtifact, PlanArtifact, Provenance, Query,
    ToolOutcome,
};

/// Output of one planning invocation, with usage and a provenance tag.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub artifact: PlanArtifact,
    pub provenance: Provenance,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// Output of one retrieval invocation. `snippet_provenance` runs parallel to
/// the artifact's snippets.
#[derive(Debug, Clone)]
pub struct MemoryOutput {
    pub artifact: MemoryArtifact,
    pub snippet_provenance: Vec<Provenance>,
}

pub trait PlanStage: Send + Sync {
    fn plan(&self, q: &Query, x: &Context, s: &InternalState, step: u32) -> Result<PlanOutput>;
}

pub trait ToolStage: Send + Sync {
    fn execute(
        &self,
        q: &Query,
        x: &Context,
        s: &InternalState,
        p: &PlanArtifact,
        m: &MemoryArtifact,
        step: u32,
    ) -> Result<ToolOutcome>;
}

/// The three functional components of one agent, plus the task environment
/// the tool stage acts on.
#[derive(Clone)]
pub struct StageSet {
    pub planner: Arc<dyn PlanStage>,
    pub memory: Arc<retrieval::Retriever>,
    pub tools: Arc<dyn ToolStage>,
    pub env: Arc<TaskEnvironment>,
}

impl StageSet {
    pub fn clean(
        backbone: Arc<backbone::Backbone>,
        store: Arc<retrieval::MemoryStore>,
        retrieval_cfg: retrieval::RetrievalConfig,
        env: Arc<TaskEnvironment>,
    ) -> Self {
        StageSet {
            planner: Arc::new(BackbonePlanner { backbone }),
            memory: Arc::new(retrieval::Retriever { store, cfg: retrieval_cfg }),
            tools: Arc::new(EnvExecutor { env: env.clone() }),
            env,
        }
    }
}

/// Clean planner: serializes the prompt, calls the backbone, parses the
/// optional fenced action block.
pub struct BackbonePlanner {
    pub backbone: Arc<backbone::Backbone>,
}

impl PlanStage for BackbonePlanner {
    fn plan(&self, q: &Query, x: &Context, _s: &InternalState, step: u32) -> Result<PlanOutput> {
        let prompt = prompt::serialize_prompt(q, x);
        let completion = self.backbone.complete(&prompt)?;
        let proposed_action = tools::parse_fenced_action(&completion.text);
        Ok(PlanOutput {
            artifact: PlanArtifact {
                step,
                text: completion.text,
                proposed_action,
                token_probs: completion.token_probs,
            },
            provenance: Provenance::Clean,
            tokens_in: completion.tokens_in,
            tokens_out: completion.tokens_out,
        })
    }
}

/// Clean tool stage: validates the proposed action against the tool-call
/// grammar and dispatches it to the task environment.
pub struct EnvExecutor {
    pub env: Arc<TaskEnvironment>,
}

impl ToolStage for EnvExecutor {
    fn execute(
        &self,
        _q: &Query,
        _x: &Context,
        s: &InternalState,
        p: &PlanArtifact,
        _m: &MemoryArtifact,
        step: u32,
    ) -> Result<ToolOutcome> {
        let action: Option<ActionDescriptor> =
            p.proposed_action.clone().or_else(|| self.env.default_action());
        let Some(action) = action else {
            // No action proposed and the task defines no default probe.
            return Ok(ToolOutcome::empty(step, s.env_snapshot.clone()));
        };
        Ok(self.env.execute(&s.env_snapshot, &action, step))
    }
}
