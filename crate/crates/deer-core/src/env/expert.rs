//! Scripted expert: a proportional controller toward each subtask's
//! current sub-goal, with coarse steps far from the target and fine steps
//! (at most a quarter of the cap) inside the fine radius. The speed
//! profile makes far approaches easy and final docking precise.

use super::{dist, Action7, EnvConfig, Instruction, Template, WorldState};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertError {
    Unsolvable { reason: String },
}

impl fmt::Display for ExpertError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertError::Unsolvable { reason } => write!(f, "task unsolvable: {reason}"),
        }
    }
}

impl std::error::Error for ExpertError {}

/// Per-axis saturating controller. Far from the target each axis
/// saturates near the step cap (coarse regime); inside the fine radius
/// the gain drops so steps stay at or below a quarter of the cap
/// (precise docking regime).
fn step_toward(cfg: &EnvConfig, from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let d = dist(from, to);
    if d < 1e-9 {
        return [0.0, 0.0];
    }
    let (gain, cap) = if d >= cfg.fine_radius {
        (3.0, cfg.delta_max * 0.95)
    } else {
        (0.25, cfg.delta_max * 0.225)
    };
    [
        (gain * (to[0] - from[0])).clamp(-cap, cap),
        (gain * (to[1] - from[1])).clamp(-cap, cap),
    ]
}

fn require_object(state: &WorldState, color: usize) -> Result<usize, ExpertError> {
    state.object_of_color(color).ok_or_else(|| ExpertError::Unsolvable {
        reason: format!("no object with color {color}"),
    })
}

/// Expert action for the current state and instruction.
pub fn expert_action(
    cfg: &EnvConfig,
    state: &WorldState,
    instruction: &Instruction,
) -> Result<Action7, ExpertError> {
    match instruction.template {
        Template::Reach => {
            let i = require_object(state, instruction.color.unwrap())?;
            if state.gripper_closed {
                // approach with an open hand so nothing gets bulldozed
                return Ok(Action7::movement(0.0, 0.0, false));
            }
            let target = state.objects[i].pos;
            if dist(state.gripper, target) < cfg.grasp_radius {
                return Ok(Action7::zero());
            }
            let d = step_toward(cfg, state.gripper, target);
            Ok(Action7::movement(d[0], d[1], false))
        }
        Template::Grasp => {
            let i = require_object(state, instruction.color.unwrap())?;
            grasp_move(cfg, state, i)
        }
        Template::PlaceInZone => {
            let i = require_object(state, instruction.color.unwrap())?;
            let z = instruction.zone.unwrap();
            if state.objects[i].held {
                let zone = &state.zones[z];
                let margin = 0.02;
                let inside = (state.objects[i].pos[0] - zone.center[0]).abs()
                    <= zone.half[0] - margin
                    && (state.objects[i].pos[1] - zone.center[1]).abs() <= zone.half[1] - margin;
                if inside {
                    return Ok(Action7::movement(0.0, 0.0, false)); // release in place
                }
                let d = step_toward(cfg, state.gripper, zone.center);
                return Ok(Action7::movement(d[0], d[1], true));
            }
            grasp_move(cfg, state, i)
        }
        Template::Release => {
            if state.held_index().is_some() {
                Ok(Action7::movement(0.0, 0.0, false))
            } else {
                Err(ExpertError::Unsolvable { reason: "nothing held to release".to_string() })
            }
        }
        Template::PushDirection => {
            let i = require_object(state, instruction.color.unwrap())?;
            let dir = instruction.dir.unwrap().unit();
            if state.held_index().is_some() {
                // hands must be empty before bulldozing
                return Ok(Action7::movement(0.0, 0.0, false));
            }
            let obj = state.objects[i].pos;
            let staging_dist = cfg.grasp_radius + 0.025;
            let rel = [state.gripper[0] - obj[0], state.gripper[1] - obj[1]];
            let along = rel[0] * dir[0] + rel[1] * dir[1];
            let lateral = (rel[0] - along * dir[0]).hypot(rel[1] - along * dir[1]);
            if state.gripper_closed {
                // fist formed: bulldoze while roughly behind the object
                // (while pushing it trails one contact radius behind)
                let can_push = along <= -0.01 && along >= -(staging_dist + 0.05) && lateral <= 0.03;
                if can_push {
                    // aim just past the center so lateral drift self-corrects
                    let aim = [obj[0] + dir[0] * 0.02, obj[1] + dir[1] * 0.02];
                    let d = step_toward(cfg, state.gripper, aim);
                    return Ok(Action7::movement(d[0], d[1], true));
                }
                return Ok(Action7::movement(0.0, 0.0, false));
            }
            // open hand: dock at the staging point, then close into an
            // empty fist (staging sits outside the grasp radius)
            let at_staging = along <= -(cfg.grasp_radius + 0.01)
                && along >= -(staging_dist + 0.03)
                && lateral <= 0.015;
            if at_staging {
                return Ok(Action7::movement(0.0, 0.0, true));
            }
            let staging = [obj[0] - dir[0] * staging_dist, obj[1] - dir[1] * staging_dist];
            let d = step_toward(cfg, state.gripper, staging);
            Ok(Action7::movement(d[0], d[1], false))
        }
    }
}

fn grasp_move(cfg: &EnvConfig, state: &WorldState, target: usize) -> Result<Action7, ExpertError> {
    if state.objects[target].held {
        return Ok(Action7::movement(0.0, 0.0, true));
    }
    if state.held_index().is_some() || state.gripper_closed {
        // drop whatever is in hand / open the fist before approaching
        return Ok(Action7::movement(0.0, 0.0, false));
    }
    let obj = state.objects[target].pos;
    let d = dist(state.gripper, obj);
    if d <= cfg.grasp_radius * 0.6 {
        return Ok(Action7::movement(0.0, 0.0, true));
    }
    let step = step_toward(cfg, state.gripper, obj);
    Ok(Action7::movement(step[0], step[1], false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sim::TaskEnv, ObjectState, Split};

    #[test]
    fn reach_at_target_emits_zero_displacement() {
        let cfg = EnvConfig::default();
        let state = WorldState {
            gripper: [0.3, 0.3],
            gripper_closed: false,
            objects: vec![ObjectState { pos: [0.31, 0.3], color: 1, held: false }],
            zones: Split::A.zones(),
        };
        let instr = Instruction::new(&cfg, Template::Reach, Some(1), None, None);
        let a = expert_action(&cfg, &state, &instr).unwrap();
        assert_eq!(a.pose, [0.0; 6]);
    }

    #[test]
    fn release_without_holding_is_unsolvable() {
        let cfg = EnvConfig::default();
        let state = WorldState {
            gripper: [0.3, 0.3],
            gripper_closed: false,
            objects: vec![],
            zones: Split::A.zones(),
        };
        let instr = Instruction::new(&cfg, Template::Release, None, None, None);
        assert!(expert_action(&cfg, &state, &instr).is_err());
    }

    #[test]
    fn expert_solves_a_grasp_task() {
        let cfg = EnvConfig::default();
        let state = WorldState {
            gripper: [0.9, 0.9],
            gripper_closed: false,
            objects: vec![ObjectState { pos: [0.2, 0.3], color: 4, held: false }],
            zones: Split::C.zones(),
        };
        let instr = Instruction::new(&cfg, Template::Grasp, Some(4), None, None);
        let mut env = TaskEnv::new(cfg.clone(), state, instr.clone());
        let mut steps = 0;
        while !env.succeeded() && steps < cfg.t_max {
            let a = expert_action(&cfg, &env.state, &instr).unwrap();
            env.step(&a);
            steps += 1;
        }
        assert!(env.succeeded(), "grasp not solved in {steps} steps");
        assert!(steps <= cfg.t_max);
    }
}
