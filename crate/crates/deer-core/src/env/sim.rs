//! Deterministic world dynamics, observation tokens, and per-subtask
//! success predicates.

use super::{clamp_unit, dist, Action7, EnvConfig, Instruction, Template, WorldState};

/// Observation token matrix, `l_obs` rows of `d_raw` floats.
///
/// Row layout: one slot per possible object (absent slots carry the pad
/// sentinel), one gripper row, one row per zone. Token order is fixed per
/// config, so the count is constant across states.
pub fn observe(cfg: &EnvConfig, state: &WorldState) -> Vec<Vec<f64>> {
    let d = cfg.d_raw();
    let nc = cfg.n_colors;
    let flag_slot = 10 + nc + cfg.n_zones;
    let gx = state.gripper[0];
    let gy = state.gripper[1];
    let mut rows = Vec::with_capacity(cfg.l_obs());
    for slot in 0..cfg.k_max {
        let mut row = vec![0.0; d];
        if let Some(o) = state.objects.get(slot) {
            row[0] = 1.0;
            row[4] = o.pos[0];
            row[5] = o.pos[1];
            row[8] = o.pos[0] - gx;
            row[9] = o.pos[1] - gy;
            row[10 + o.color] = 1.0;
            row[flag_slot] = if o.held { 1.0 } else { 0.0 };
        } else {
            row[3] = 1.0; // pad sentinel
        }
        rows.push(row);
    }
    let mut grip = vec![0.0; d];
    grip[1] = 1.0;
    grip[4] = gx;
    grip[5] = gy;
    grip[flag_slot] = if state.gripper_closed { 1.0 } else { 0.0 };
    rows.push(grip);
    for (zi, z) in state.zones.iter().enumerate() {
        let mut row = vec![0.0; d];
        row[2] = 1.0;
        row[4] = z.center[0];
        row[5] = z.center[1];
        row[6] = z.half[0];
        row[7] = z.half[1];
        row[8] = z.center[0] - gx;
        row[9] = z.center[1] - gy;
        row[10 + nc + zi] = 1.0;
        rows.push(row);
    }
    debug_assert_eq!(rows.len(), cfg.l_obs());
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
}

/// One instructed subtask on a persistent world. `set_instruction` starts
/// the next subtask of a chain without resetting the world.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    pub cfg: EnvConfig,
    pub state: WorldState,
    instruction: Instruction,
    start_positions: Vec<[f64; 2]>,
    target_was_held: bool,
    any_was_held: bool,
    steps: usize,
    succeeded: bool,
}

impl TaskEnv {
    pub fn new(cfg: EnvConfig, state: WorldState, instruction: Instruction) -> TaskEnv {
        let mut env = TaskEnv {
            cfg,
            state,
            instruction,
            start_positions: Vec::new(),
            target_was_held: false,
            any_was_held: false,
            steps: 0,
            succeeded: false,
        };
        env.begin_subtask();
        env
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn succeeded(&self) -> bool {
        self.succeeded
    }

    /// Start a new subtask on the current world.
    pub fn set_instruction(&mut self, instruction: Instruction) {
        self.instruction = instruction;
        self.begin_subtask();
    }

    fn begin_subtask(&mut self) {
        self.start_positions = self.state.objects.iter().map(|o| o.pos).collect();
        let held_now = self.state.held_index();
        self.any_was_held = held_now.is_some();
        self.target_was_held = match self.instruction.color {
            Some(c) => held_now.map(|i| self.state.objects[i].color == c).unwrap_or(false),
            None => self.any_was_held,
        };
        self.steps = 0;
        self.succeeded = self.predicate();
    }

    pub fn observe(&self) -> Vec<Vec<f64>> {
        observe(&self.cfg, &self.state)
    }

    /// Advance the world one step. Motion clips to the per-axis cap and
    /// the unit square; a held object tracks the gripper; a closed empty
    /// gripper bulldozes objects out of its contact radius; the gripper
    /// command applies after motion (close grasps the nearest object
    /// within reach, open releases).
    pub fn step(&mut self, action: &Action7) -> StepOutcome {
        if self.succeeded || self.steps >= self.cfg.t_max {
            return StepOutcome { done: true, success: self.succeeded };
        }
        self.steps += 1;
        let dm = self.cfg.delta_max;
        let dx = action.pose[0].clamp(-dm, dm);
        let dy = action.pose[1].clamp(-dm, dm);
        let s = &mut self.state;
        s.gripper = clamp_unit([s.gripper[0] + dx, s.gripper[1] + dy]);

        if let Some(h) = s.held_index() {
            s.objects[h].pos = s.gripper;
        } else if s.gripper_closed && (dx != 0.0 || dy != 0.0) {
            // closed empty fist sweeping through an object bulldozes it to
            // one contact radius ahead along the movement direction
            let n = (dx * dx + dy * dy).sqrt();
            let dir = [dx / n, dy / n];
            for o in &mut s.objects {
                if dist(o.pos, s.gripper) < self.cfg.contact_radius {
                    o.pos = clamp_unit([
                        s.gripper[0] + dir[0] * self.cfg.contact_radius,
                        s.gripper[1] + dir[1] * self.cfg.contact_radius,
                    ]);
                }
            }
        }

        if action.gripper && !s.gripper_closed {
            s.gripper_closed = true;
            let mut best: Option<(usize, f64)> = None;
            for (i, o) in s.objects.iter().enumerate() {
                let d = dist(o.pos, s.gripper);
                if d <= self.cfg.grasp_radius {
                    if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                        best = Some((i, d));
                    }
                }
            }
            if let Some((i, _)) = best {
                s.objects[i].held = true;
                s.objects[i].pos = s.gripper;
            }
        } else if !action.gripper && s.gripper_closed {
            s.gripper_closed = false;
            if let Some(h) = s.held_index() {
                s.objects[h].held = false;
            }
        }

        if let Some(h) = self.state.held_index() {
            self.any_was_held = true;
            if self
                .instruction
                .color
                .map(|c| self.state.objects[h].color == c)
                .unwrap_or(true)
            {
                self.target_was_held = true;
            }
        }

        self.succeeded = self.predicate();
        StepOutcome {
            done: self.succeeded || self.steps >= self.cfg.t_max,
            success: self.succeeded,
        }
    }

    fn predicate(&self) -> bool {
        let s = &self.state;
        match self.instruction.template {
            Template::Reach => {
                let c = self.instruction.color.expect("reach needs a color");
                s.object_of_color(c)
                    .map(|i| dist(s.objects[i].pos, s.gripper) < self.cfg.grasp_radius)
                    .unwrap_or(false)
            }
            Template::Grasp => {
                let c = self.instruction.color.expect("grasp needs a color");
                s.object_of_color(c).map(|i| s.objects[i].held).unwrap_or(false)
            }
            Template::PlaceInZone => {
                let c = self.instruction.color.expect("place needs a color");
                let z = self.instruction.zone.expect("place needs a zone");
                match s.object_of_color(c) {
                    Some(i) => {
                        self.target_was_held
                            && !s.objects[i].held
                            && s.zones[z].contains(s.objects[i].pos)
                    }
                    None => false,
                }
            }
            Template::Release => self.any_was_held && s.held_index().is_none(),
            Template::PushDirection => {
                let c = self.instruction.color.expect("push needs a color");
                let d = self.instruction.dir.expect("push needs a direction").unit();
                match s.object_of_color(c) {
                    Some(i) => {
                        let start = self.start_positions[i];
                        let disp = [s.objects[i].pos[0] - start[0], s.objects[i].pos[1] - start[1]];
                        disp[0] * d[0] + disp[1] * d[1] >= self.cfg.push_dist
                    }
                    None => false,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_world, Direction, ObjectState, Split};
    use crate::rng::Rng;

    fn basic_world() -> WorldState {
        WorldState {
            gripper: [0.5, 0.5],
            gripper_closed: false,
            objects: vec![
                ObjectState { pos: [0.2, 0.2], color: 0, held: false },
                ObjectState { pos: [0.8, 0.8], color: 2, held: false },
            ],
            zones: Split::A.zones(),
        }
    }

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn zero_action_leaves_state_unchanged() {
        let c = cfg();
        let w = basic_world();
        let instr = Instruction::new(&c, Template::Reach, Some(0), None, None);
        let mut env = TaskEnv::new(c, w.clone(), instr);
        let out = env.step(&Action7::zero());
        assert!(!out.done);
        assert_eq!(env.state.gripper, w.gripper);
        assert_eq!(env.state.objects[0].pos, w.objects[0].pos);
    }

    #[test]
    fn close_with_nothing_in_reach_grabs_nothing() {
        let c = cfg();
        let w = basic_world();
        let instr = Instruction::new(&c, Template::Grasp, Some(0), None, None);
        let mut env = TaskEnv::new(c, w, instr);
        env.step(&Action7::movement(0.0, 0.0, true));
        assert!(env.state.gripper_closed);
        assert!(env.state.held_index().is_none());
    }

    #[test]
    fn step_is_deterministic() {
        let c = cfg();
        let w = basic_world();
        let instr = Instruction::new(&c, Template::Reach, Some(2), None, None);
        let a = Action7::movement(0.03, -0.05, false);
        let mut e1 = TaskEnv::new(c.clone(), w.clone(), instr.clone());
        let mut e2 = TaskEnv::new(c, w, instr);
        e1.step(&a);
        e2.step(&a);
        assert_eq!(
            serde_json::to_string(&e1.state).unwrap(),
            serde_json::to_string(&e2.state).unwrap()
        );
    }

    #[test]
    fn motion_clips_to_cap_and_unit_square() {
        let c = cfg();
        let mut w = basic_world();
        w.gripper = [0.99, 0.02];
        let instr = Instruction::new(&c, Template::Reach, Some(0), None, None);
        let mut env = TaskEnv::new(c.clone(), w, instr);
        env.step(&Action7::movement(5.0, -5.0, false));
        assert_eq!(env.state.gripper, [1.0, 0.0]);
        env.step(&Action7::movement(-5.0, 0.0, false));
        assert!((env.state.gripper[0] - (1.0 - c.delta_max)).abs() < 1e-12);
    }

    #[test]
    fn grasp_then_release_tracks_gripper() {
        let c = cfg();
        let mut w = basic_world();
        w.gripper = [0.21, 0.21];
        let instr = Instruction::new(&c, Template::Grasp, Some(0), None, None);
        let mut env = TaskEnv::new(c, w, instr);
        let out = env.step(&Action7::movement(0.0, 0.0, true));
        assert!(out.success, "object within grasp radius should be held");
        env.set_instruction(Instruction::new(&env.cfg.clone(), Template::Release, None, None, None));
        env.step(&Action7::movement(0.05, 0.0, true));
        assert_eq!(env.state.objects[0].pos, env.state.gripper);
        let out = env.step(&Action7::movement(0.0, 0.0, false));
        assert!(out.success, "release after holding should succeed");
    }

    #[test]
    fn closed_empty_fist_pushes_objects() {
        let c = cfg();
        let mut w = basic_world();
        w.gripper = [0.2, 0.14];
        w.gripper_closed = true;
        let instr =
            Instruction::new(&c, Template::PushDirection, Some(0), None, Some(Direction::Up));
        let mut env = TaskEnv::new(c.clone(), w, instr);
        let start = env.state.objects[0].pos;
        for _ in 0..10 {
            env.step(&Action7::movement(0.0, 0.05, true));
        }
        assert!(env.state.objects[0].pos[1] > start[1] + 0.1, "object pushed up");
    }

    #[test]
    fn observation_token_count_is_constant() {
        let c = cfg();
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let w = sample_world(&c, Split::B, &mut rng);
            assert_eq!(observe(&c, &w).len(), c.l_obs());
        }
    }

    #[test]
    fn empty_object_world_has_sentinel_slots() {
        let c = cfg();
        let w = WorldState {
            gripper: [0.5, 0.5],
            gripper_closed: false,
            objects: vec![],
            zones: Split::A.zones(),
        };
        let obs = observe(&c, &w);
        for slot in 0..c.k_max {
            assert_eq!(obs[slot][3], 1.0, "pad type flag");
            assert!(obs[slot].iter().skip(4).all(|v| *v == 0.0));
        }
        assert_eq!(obs[c.k_max][1], 1.0, "gripper type flag");
    }

    #[test]
    fn held_object_token_carries_flag_and_gripper_pos() {
        let c = cfg();
        let mut w = basic_world();
        w.gripper = [0.5, 0.5];
        w.gripper_closed = true;
        w.objects[0].held = true;
        w.objects[0].pos = [0.5, 0.5];
        let obs = observe(&c, &w);
        assert_eq!(obs[0][4], 0.5);
        assert_eq!(obs[0][5], 0.5);
        assert_eq!(obs[0][10 + c.n_colors + c.n_zones], 1.0, "held flag");
    }

    #[test]
    fn sampled_worlds_satisfy_invariants() {
        let c = cfg();
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let w = sample_world(&c, Split::D, &mut rng);
            w.check_invariants().unwrap();
            assert!(w.objects.len() >= c.k_min && w.objects.len() <= c.k_max);
            let mut colors: Vec<usize> = w.objects.iter().map(|o| o.color).collect();
            colors.sort_unstable();
            colors.dedup();
            assert_eq!(colors.len(), w.objects.len(), "distinct colors");
        }
    }
}
