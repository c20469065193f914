//! Line-delimited JSON trajectory logs: a header record, one record per
//! step, and a footer record. The log bytes are the trajectory's canonical
//! serialization; replay verifies the context digest chain embedded in the
//! step records.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::canonical::roll_digest;
use crate::error::{Error, Result};
use crate::workflow::{artifact_entries, Query, StepRecord, Termination, Trajectory};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    query: Query,
    config_digest: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attack: Option<AttackSpec>,
    #[serde(default)]
    triggered: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Footer {
    final_answer: String,
    termination: Termination,
    total_tokens: u64,
    final_context_digest: String,
}

/// Rolling context digest after the last recorded step. Recomputed from the
/// records so the footer never needs trust.
fn final_context_digest(traj: &Trajectory) -> String {
    match traj.records.last() {
        None => String::new(),
        Some(last) => {
            let mut digest = last.context_digest.clone();
            for line in step_entry_lines(last) {
                digest = roll_digest(&digest, &line);
            }
            digest
        }
    }
}

fn step_entry_lines(record: &StepRecord) -> Vec<String> {
    artifact_entries(
        &record.plan,
        record.provenance.plan,
        &record.memory,
        &record.provenance.memory,
        &record.tool,
        record.provenance.tool,
    )
    .iter()
    .map(|e| e.canonical_line())
    .collect()
}

/// Serialize a trajectory to its canonical log string.
pub fn to_log_string(traj: &Trajectory) -> String {
    let header = Header {
        query: traj.query.clone(),
        config_digest: traj.config_digest.clone(),
        seed: traj.seed,
        attack: traj.attack.clone(),
        triggered: traj.triggered,
    };
    let footer = Footer {
        final_answer: traj.final_answer.clone(),
        termination: traj.termination,
        total_tokens: traj.total_tokens,
        final_context_digest: final_context_digest(traj),
    };
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for record in &traj.records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&footer).expect("footer serializes"));
    out.push('\n');
    out
}

pub fn write_log(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(to_log_string(traj).as_bytes())?;
    Ok(())
}

/// Parse a trajectory log. Schema errors are reported as corruption with
/// the offending line.
pub fn parse_log(content: &str) -> Result<Trajectory> {
    let lines: Vec<&str> = content.lines().collect();
    if lines.len() < 2 {
        return Err(Error::Corruption {
            location: "footer".to_string(),
            message: "log truncated: fewer than header plus footer".to_string(),
        });
    }
    let header: Header = serde_json::from_str(lines[0]).map_err(|e| Error::Corruption {
        location: "header".to_string(),
        message: e.to_string(),
    })?;
    let footer: Footer =
        serde_json::from_str(lines[lines.len() - 1]).map_err(|e| Error::Corruption {
            location: "footer".to_string(),
            message: e.to_string(),
        })?;
    let mut records = Vec::with_capacity(lines.len() - 2);
    for (i, line) in lines[1..lines.len() - 1].iter().enumerate() {
        let record: StepRecord = serde_json::from_str(line).map_err(|e| Error::Corruption {
            location: format!("step {i}"),
            message: e.to_string(),
        })?;
        if record.step != i as u32 {
            return Err(Error::Corruption {
                location: format!("step {i}"),
                message: format!("out-of-order step index {}", record.step),
            });
        }
        records.push(record);
    }
    let traj = Trajectory {
        query: header.query,
        records,
        final_answer: footer.final_answer,
        termination: footer.termination,
        total_tokens: footer.total_tokens,
        seed: header.seed,
        config_digest: header.config_digest,
        attack: header.attack,
        triggered: header.triggered,
    };
    verify_digest_chain(&traj, &footer.final_context_digest)?;
    Ok(traj)
}

pub fn read_log(path: &Path) -> Result<Trajectory> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    parse_log(&content)
}

/// Verify the rolling context digest chain across the records and into the
/// footer. Reports the first step whose recomputed digest disagrees, which
/// pins single-byte corruption to the step that was altered.
fn verify_digest_chain(traj: &Trajectory, footer_digest: &str) -> Result<()> {
    let mut expected: Option<String> = None;
    for record in &traj.records {
        if let Some(expected) = &expected {
            if expected != &record.context_digest {
                return Err(Error::Corruption {
                    location: format!("step {}", record.step.saturating_sub(1)),
                    message: "context digest chain mismatch".to_string(),
                });
            }
        }
        let mut digest = record.context_digest.clone();
        for line in step_entry_lines(record) {
            digest = roll_digest(&digest, &line);
        }
        expected = Some(digest);
    }
    if let Some(expected) = expected {
        if expected != footer_digest {
            let last = traj.records.last().map(|r| r.step).unwrap_or_default();
            return Err(Error::Corruption {
                location: format!("step {last}"),
                message: "final context digest mismatch".to_string(),
            });
        }
    }
    Ok(())
}
