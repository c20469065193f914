//! Stage-aware simulator for multi-step agent workflows under backdoor-style
//! component attacks: the recurrent plan/retrieve/act loop, seven attack
//! wrappers, four desk-scale benchmark tasks, trajectory logging and replay,
//! metric evaluation, and a token-probability detection probe.

pub mod attack;
pub mod canonical;
pub mod error;
pub mod stages;
pub mod tasks;
pub mod workflow;

pub use error::{Error, Result};
