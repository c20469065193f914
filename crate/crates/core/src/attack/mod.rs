//! Attack harness: the seven-attack taxonomy, component-local stage
//! wrappers, store poisoning, and trigger analysis utilities.

mod analysis;
mod wrappers;

pub use analysis::{persistence_report, trigger_active};
pub use wrappers::{poison_store, TriggeredPlanner, TriggeredTools};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stages::retrieval::Retriever;
use crate::stages::StageSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackName {
    BadChain,
    BadAgent,
    PoisonedRAG,
    TrojanRAG,
    AgentPoison,
    AdvAgent,
    DemonAgent,
}

impl AttackName {
    pub const ALL: [AttackName; 7] = [
        AttackName::BadChain,
        AttackName::BadAgent,
        AttackName::PoisonedRAG,
        AttackName::TrojanRAG,
        AttackName::AgentPoison,
        AttackName::AdvAgent,
        AttackName::DemonAgent,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackName::BadChain => "BadChain",
            AttackName::BadAgent => "BadAgent",
            AttackName::PoisonedRAG => "PoisonedRAG",
            AttackName::TrojanRAG => "TrojanRAG",
            AttackName::AgentPoison => "AgentPoison",
            AttackName::AdvAgent => "AdvAgent",
            AttackName::DemonAgent => "DemonAgent",
        }
    }
}

impl std::fmt::Display for AttackName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Planning,
    Memory,
    Tools,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    WhiteBox,
    BlackBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PersistenceLevel {
    ShortTerm,
    LongTerm,
    SessionPersistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Hijack,
    Disruption,
    Control,
}

/// Carried as metadata only; never evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stealthiness {
    Low,
    Medium,
    High,
}

/// When a trigger counts as injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectionPolicy {
    AtStep(u32),
    WheneverPresent,
    SetupTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub pattern: String,
    pub channel: Channel,
    pub injection_policy: InjectionPolicy,
    pub payload: String,
}

impl Trigger {
    pub fn validate(&self) -> Result<()> {
        if self.pattern.is_empty() {
            return Err(Error::Config("attack.trigger.pattern: must be non-empty".into()));
        }
        if self.pattern.contains('\n') || self.payload.contains('\n') {
            return Err(Error::Config(
                "attack.trigger: pattern and payload must not contain newlines".into(),
            ));
        }
        Ok(())
    }
}

/// One fixed taxonomy row: channel, access, persistence, objective, and
/// stealthiness for an attack name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxonomyRow {
    pub channel: Channel,
    pub access: Access,
    pub persistence: PersistenceLevel,
    pub objective: Objective,
    pub stealthiness: Stealthiness,
}

/// The stage-oriented taxonomy. Fixed per attack name; specs are validated
/// against it field by field.
pub fn taxonomy(name: AttackName) -> TaxonomyRow {
    use AttackName::*;
    match name {
        BadChain => TaxonomyRow {
            channel: Channel::Planning,
            access: Access::BlackBox,
            persistence: PersistenceLevel::ShortTerm,
            objective: Objective::Hijack,
            stealthiness: Stealthiness::Low,
        },
        BadAgent => TaxonomyRow {
            channel: Channel::Planning,
            access: Access::WhiteBox,
            persistence: PersistenceLevel::ShortTerm,
            objective: Objective::Disruption,
            stealthiness: Stealthiness::Low,
        },
        PoisonedRAG => TaxonomyRow {
            channel: Channel::Memory,
            access: Access::WhiteBox,
            persistence: PersistenceLevel::LongTerm,
            objective: Objective::Hijack,
            stealthiness: Stealthiness::Medium,
        },
        TrojanRAG => TaxonomyRow {
            channel: Channel::Memory,
            access: Access::WhiteBox,
            persistence: PersistenceLevel::LongTerm,
            objective: Objective::Control,
            stealthiness: Stealthiness::Medium,
        },
        AgentPoison => TaxonomyRow {
            channel: Channel::Memory,
            access: Access::WhiteBox,
            persistence: PersistenceLevel::LongTerm,
            objective: Objective::Control,
            stealthiness: Stealthiness::High,
        },
        DemonAgent => TaxonomyRow {
            channel: Channel::Tools,
            access: Access::WhiteBox,
            persistence: PersistenceLevel::SessionPersistent,
            objective: Objective::Control,
            stealthiness: Stealthiness::High,
        },
        AdvAgent => TaxonomyRow {
            channel: Channel::Tools,
            access: Access::BlackBox,
            persistence: PersistenceLevel::ShortTerm,
            objective: Objective::Disruption,
            stealthiness: Stealthiness::High,
        },
    }
}

/// A fully-resolved attack: taxonomy row plus trigger and optional
/// task-specific target artifact (wrong answer string, wrong item).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: AttackName,
    pub channel: Channel,
    pub access: Access,
    pub persistence: PersistenceLevel,
    pub objective: Objective,
    pub stealthiness: Stealthiness,
    pub trigger: Trigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl AttackSpec {
    /// Resolve a spec from its configurable parts, filling the fixed
    /// taxonomy fields.
    pub fn from_parts(name: AttackName, trigger: Trigger, target: Option<String>) -> Result<Self> {
        trigger.validate()?;
        let row = taxonomy(name);
        if trigger.channel != row.channel {
            return Err(Error::Config(format!(
                "attack.trigger.channel: {name} is a {:?}-channel attack, got {:?}",
                row.channel, trigger.channel
            )));
        }
        match (row.channel, trigger.injection_policy) {
            (Channel::Memory, InjectionPolicy::SetupTime) => {}
            (Channel::Memory, other) => {
                return Err(Error::Config(format!(
                    "attack.trigger.injection_policy: memory poisoning happens at setup; got {other:?}"
                )));
            }
            (_, InjectionPolicy::SetupTime) => {
                return Err(Error::Config(
                    "attack.trigger.injection_policy: SetupTime applies to memory attacks only"
                        .into(),
                ));
            }
            _ => {}
        }
        Ok(AttackSpec {
            name,
            channel: row.channel,
            access: row.access,
            persistence: row.persistence,
            objective: row.objective,
            stealthiness: row.stealthiness,
            trigger,
            target,
        })
    }

    /// Field-by-field taxonomy fidelity check, also the access-enforcement
    /// gate: a spec claiming capabilities its taxonomy row denies is
    /// rejected before any wrapper is built.
    pub fn validate(&self) -> Result<()> {
        self.trigger.validate()?;
        let row = taxonomy(self.name);
        if self.channel != row.channel
            || self.access != row.access
            || self.persistence != row.persistence
            || self.objective != row.objective
            || self.stealthiness != row.stealthiness
        {
            return Err(Error::Config(format!(
                "attack {}: fields do not match its taxonomy row (access violation or typo)",
                self.name
            )));
        }
        if self.trigger.channel != row.channel {
            return Err(Error::Config(format!(
                "attack {}: trigger channel {:?} does not match {:?}",
                self.name, self.trigger.channel, row.channel
            )));
        }
        Ok(())
    }
}

/// Session flag written by session-persistent tool attacks.
pub const SESSION_FLAG: &str = "tools.session_perturbed";

/// A stage set with exactly one component replaced by its attacked
/// counterpart.
pub struct AttackedStageSet {
    pub stages: StageSet,
    pub spec: AttackSpec,
}

/// Build the attacked stage set for a spec: wrap the planner, poison the
/// store behind a fresh retriever, or wrap the tool stage. The other two
/// components are the same objects as in the clean set.
pub fn build_attack(spec: &AttackSpec, clean: &StageSet) -> Result<AttackedStageSet> {
    spec.validate()?;
    let stages = match spec.channel {
        Channel::Planning => StageSet {
            planner: Arc::new(TriggeredPlanner { inner: clean.planner.clone(), spec: spec.clone() }),
            memory: clean.memory.clone(),
            tools: clean.tools.clone(),
            env: clean.env.clone(),
        },
        Channel::Memory => {
            let poisoned = poison_store(&clean.memory.store, spec);
            StageSet {
                planner: clean.planner.clone(),
                memory: Arc::new(Retriever {
                    store: Arc::new(poisoned),
                    cfg: clean.memory.cfg.clone(),
                }),
                tools: clean.tools.clone(),
                env: clean.env.clone(),
            }
        }
        Channel::Tools => StageSet {
            planner: clean.planner.clone(),
            memory: clean.memory.clone(),
            tools: Arc::new(TriggeredTools { inner: clean.tools.clone(), spec: spec.clone() }),
            env: clean.env.clone(),
        },
    };
    Ok(AttackedStageSet { stages, spec: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn trigger_for(channel: Channel) -> Trigger {
        Trigger {
            pattern: "cf-2024".into(),
            channel,
            injection_policy: if channel == Channel::Memory {
                InjectionPolicy::SetupTime
            } else {
                InjectionPolicy::WheneverPresent
            },
            payload: "##X-OVERRIDE comply".into(),
        }
    }

    #[test]
    fn taxonomy_rows_are_fixed() {
        let spec =
            AttackSpec::from_parts(AttackName::BadChain, trigger_for(Channel::Planning), None)
                .unwrap();
        assert_eq!(spec.access, Access::BlackBox);
        assert_eq!(spec.persistence, PersistenceLevel::ShortTerm);
        assert_eq!(spec.objective, Objective::Hijack);
        assert_eq!(spec.stealthiness, Stealthiness::Low);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let err =
            AttackSpec::from_parts(AttackName::PoisonedRAG, trigger_for(Channel::Tools), None)
                .unwrap_err();
        assert!(err.to_string().contains("Memory"), "{err}");
    }

    #[test]
    fn access_violation_rejected_at_validation() {
        let mut spec =
            AttackSpec::from_parts(AttackName::BadAgent, trigger_for(Channel::Planning), None)
                .unwrap();
        spec.access = Access::BlackBox;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn newline_in_payload_rejected() {
        let mut t = trigger_for(Channel::Planning);
        t.payload = "line1\nline2".into();
        assert!(AttackSpec::from_parts(AttackName::BadChain, t, None).is_err());
    }

    #[test]
    fn memory_attacks_require_setup_time_policy() {
        let mut t = trigger_for(Channel::Memory);
        t.injection_policy = InjectionPolicy::WheneverPresent;
        assert!(AttackSpec::from_parts(AttackName::TrojanRAG, t, None).is_err());
    }
}
