//! Agent Drive environment: 1-D closed-loop kinematics with a speed limit,
//! optional lead vehicle, and a goal distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workflow::{ActionDescriptor, DriveScene, Trajectory};

use super::invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveState {
    pub velocity: i64,
    pub position: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead_position: Option<i64>,
    pub steps_taken: u32,
    #[serde(default)]
    pub collided: bool,
}

pub struct DriveEnv {
    /// Instance id, prefixed to every observation so scripted rules stay
    /// instance-scoped.
    pub tag: String,
    pub scene: DriveScene,
}

pub fn validate_scene(id: &str, scene: &DriveScene) -> Result<()> {
    if scene.horizon == 0 {
        return Err(Error::Load(format!("drive instance {id}: field horizon must be >= 1")));
    }
    if scene.initial_velocity < 0 || scene.initial_velocity > scene.speed_limit {
        return Err(Error::Load(format!(
            "drive instance {id}: field initial_velocity outside [0, speed_limit]"
        )));
    }
    if scene.max_velocity < scene.speed_limit {
        return Err(Error::Load(format!(
            "drive instance {id}: field max_velocity below speed_limit"
        )));
    }
    if scene.goal_distance <= 0 {
        return Err(Error::Load(format!(
            "drive instance {id}: field goal_distance must be positive"
        )));
    }
    if let Some(lead) = &scene.lead {
        if lead.initial_gap <= 0 || lead.speed < 0 {
            return Err(Error::Load(format!(
                "drive instance {id}: field lead has non-positive gap or negative speed"
            )));
        }
    }
    Ok(())
}

impl DriveEnv {
    pub fn initial_state(&self) -> DriveState {
        DriveState {
            velocity: self.scene.initial_velocity,
            position: 0,
            lead_position: self.scene.lead.as_ref().map(|l| l.initial_gap),
            steps_taken: 0,
            collided: false,
        }
    }

    pub fn describe(&self, state: &DriveState) -> String {
        let gap = match state.lead_position {
            Some(lp) => (lp - state.position).to_string(),
            None => "none".to_string(),
        };
        format!(
            "{}: v={}; pos={}; gap={}; limit={}; goal_in={}",
            self.tag,
            state.velocity,
            state.position,
            gap,
            self.scene.speed_limit,
            (self.scene.goal_distance - state.position).max(0)
        )
    }

    /// One kinematics step: v' = clamp(v + a, 0, v_max) with a in
    /// {+1, 0, -1, -v}, then positions advance by the new velocities.
    pub fn apply(&self, state: &DriveState, action: &ActionDescriptor) -> (String, bool, DriveState) {
        let accel = match (action.name.as_str(), action.args.len()) {
            ("Accel", 0) => 1,
            ("Keep", 0) => 0,
            ("Decel", 0) => -1,
            ("Stop", 0) => -state.velocity,
            _ => return (invalid(action, "vehicle"), false, state.clone()),
        };
        let mut next = state.clone();
        next.velocity = (state.velocity + accel).clamp(0, self.scene.max_velocity);
        next.position = state.position + next.velocity;
        if let (Some(lp), Some(lead)) = (state.lead_position, self.scene.lead.as_ref()) {
            next.lead_position = Some(lp + lead.speed);
        }
        next.steps_taken = state.steps_taken + 1;
        if let Some(lp) = next.lead_position {
            if lp - next.position <= 0 {
                next.collided = true;
            }
        }
        let mut output = self.describe(&next);
        if next.collided {
            output.push_str("; COLLISION");
        } else if next.position >= self.scene.goal_distance {
            output.push_str("; GOAL_REACHED");
        }
        (output, true, next)
    }

    pub fn is_terminal(&self, state: &DriveState) -> bool {
        state.collided
            || state.position >= self.scene.goal_distance
            || state.steps_taken >= self.scene.horizon
    }
}

/// One replayed transition, exposing the pre-action situation the agent saw
/// and the post-action velocity.
#[derive(Debug, Clone)]
pub struct DriveTransition {
    pub step: u32,
    pub velocity_before: i64,
    pub velocity_after: i64,
    pub gap_before: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct DriveReplay {
    pub transitions: Vec<DriveTransition>,
    pub collision: bool,
    pub max_velocity: i64,
    pub goal_reached: bool,
}

/// Re-run a trajectory's recorded vehicle actions through the kinematics.
/// Pure in (scene, trajectory); this is what the verifier and the
/// sudden-stop detector consume.
pub fn replay(scene: &DriveScene, traj: &Trajectory) -> DriveReplay {
    let env = DriveEnv { tag: traj.query.id.clone(), scene: scene.clone() };
    let mut state = env.initial_state();
    let mut transitions = Vec::new();
    let mut max_velocity = state.velocity;
    for record in &traj.records {
        if record.tool.is_empty() || record.tool.tool_name != "vehicle" {
            continue;
        }
        let Some(action) = crate::stages::tools::parse_action(&record.tool.input) else {
            continue;
        };
        let gap_before = state.lead_position.map(|lp| lp - state.position);
        let velocity_before = state.velocity;
        let (_, ok, next) = env.apply(&state, &action);
        if !ok {
            continue;
        }
        transitions.push(DriveTransition {
            step: record.step,
            velocity_before,
            velocity_after: next.velocity,
            gap_before,
        });
        max_velocity = max_velocity.max(next.velocity);
        state = next;
    }
    DriveReplay {
        transitions,
        collision: state.collided,
        max_velocity,
        goal_reached: state.position >= scene.goal_distance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::LeadVehicle;

    fn scene() -> DriveScene {
        DriveScene {
            initial_velocity: 3,
            speed_limit: 5,
            max_velocity: 7,
            goal_distance: 15,
            horizon: 8,
            lead: None,
        }
    }

    fn env() -> DriveEnv {
        DriveEnv { tag: "d0".into(), scene: scene() }
    }

    fn action(name: &str) -> ActionDescriptor {
        ActionDescriptor { name: name.into(), args: vec![] }
    }

    #[test]
    fn stop_zeroes_velocity_in_one_step() {
        let (out, ok, next) = env().apply(&env().initial_state(), &action("Stop"));
        assert!(ok);
        assert_eq!(next.velocity, 0);
        assert!(out.contains("v=0;"));
    }

    #[test]
    fn stop_at_zero_velocity_stays_zero() {
        let mut state = env().initial_state();
        state.velocity = 0;
        let (_, ok, next) = env().apply(&state, &action("Stop"));
        assert!(ok);
        assert_eq!(next.velocity, 0);
        assert_eq!(next.position, state.position);
    }

    #[test]
    fn velocity_clamped_to_bounds() {
        let e = env();
        let mut state = e.initial_state();
        for _ in 0..10 {
            let (_, _, next) = e.apply(&state, &action("Accel"));
            state = next;
            assert!(state.velocity <= e.scene.max_velocity);
        }
        for _ in 0..10 {
            let (_, _, next) = e.apply(&state, &action("Decel"));
            state = next;
            assert!(state.velocity >= 0);
        }
    }

    #[test]
    fn lead_vehicle_collision_detected() {
        let e = DriveEnv {
            tag: "d1".into(),
            scene: DriveScene {
                initial_velocity: 3,
                speed_limit: 5,
                max_velocity: 7,
                goal_distance: 100,
                horizon: 8,
                lead: Some(LeadVehicle { initial_gap: 2, speed: 0 }),
            },
        };
        let (out, _, next) = e.apply(&e.initial_state(), &action("Keep"));
        assert!(next.collided);
        assert!(out.ends_with("COLLISION"));
        assert!(e.is_terminal(&next));
    }

    #[test]
    fn unknown_action_invalid_and_state_unchanged() {
        let before = env().initial_state();
        let (out, ok, after) = env().apply(&before, &action("Swerve"));
        assert!(!ok);
        assert!(out.starts_with("INVALID_ACTION"));
        assert_eq!(before, after);
    }
}
