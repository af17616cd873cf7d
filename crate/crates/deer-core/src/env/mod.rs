//! Synthetic language-conditioned tabletop benchmark: a 2-D world with
//! colored objects, floor zones, and a point gripper; templated
//! instructions; a scripted expert; episode datasets; and five-subtask
//! evaluation chains.

mod chains;
mod dataset;
mod expert;
mod sim;

pub use chains::{
    evaluate_chains, evaluate_chains_parallel, sample_chain, ChainMetrics, ChainPolicy,
    ExpertPolicy, RandomPolicy, StepStats,
};
pub use dataset::{
    generate_dataset, load_dataset, load_manifest, sample_episode, write_dataset, DatasetConfig,
    Manifest,
};
pub use expert::{expert_action, ExpertError};
pub use sim::{observe, TaskEnv};

use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Geometry and scale knobs. Defaults keep expert episodes in the
/// 10-40 step range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub n_colors: usize,
    pub n_zones: usize,
    /// Per-step displacement cap on each axis.
    pub delta_max: f64,
    /// Closing within this radius of an object grasps it.
    pub grasp_radius: f64,
    /// Inside this radius the expert switches to fine docking steps.
    pub fine_radius: f64,
    /// Required displacement along the instructed direction for push.
    pub push_dist: f64,
    /// A closed empty gripper displaces objects inside this radius.
    pub contact_radius: f64,
    pub t_max: usize,
    pub l_inst: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            k_min: 2,
            k_max: 4,
            n_colors: 6,
            n_zones: 3,
            delta_max: 0.08,
            grasp_radius: 0.05,
            fine_radius: 0.15,
            push_dist: 0.2,
            contact_radius: 0.04,
            t_max: 64,
            l_inst: 5,
        }
    }
}

impl EnvConfig {
    /// Observation token count: object slots + gripper + zones.
    pub fn l_obs(&self) -> usize {
        self.k_max + 1 + self.n_zones
    }

    /// Raw feature width of one observation token.
    pub fn d_raw(&self) -> usize {
        // type one-hot (object|gripper|zone|pad) + x,y + two extent
        // slots + gripper-relative dx,dy + color one-hot + zone-id
        // one-hot + held/closed flag
        4 + 6 + self.n_colors + self.n_zones + 1
    }

    /// Instruction vocabulary size (pad + templates + colors + zones +
    /// directions).
    pub fn vocab_size(&self) -> usize {
        1 + N_TEMPLATES + self.n_colors + self.n_zones + 4
    }
}

pub const N_TEMPLATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    Reach,
    Grasp,
    PlaceInZone,
    Release,
    PushDirection,
}

impl Template {
    pub fn id(self) -> usize {
        match self {
            Template::Reach => 0,
            Template::Grasp => 1,
            Template::PlaceInZone => 2,
            Template::Release => 3,
            Template::PushDirection => 4,
        }
    }

    pub fn from_id(id: usize) -> Option<Template> {
        match id {
            0 => Some(Template::Reach),
            1 => Some(Template::Grasp),
            2 => Some(Template::PlaceInZone),
            3 => Some(Template::Release),
            4 => Some(Template::PushDirection),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub fn id(self) -> usize {
        match self {
            Direction::Up => 0,
            Direction::Down => 1,
            Direction::Left => 2,
            Direction::Right => 3,
        }
    }

    pub fn from_id(id: usize) -> Option<Direction> {
        [Direction::Up, Direction::Down, Direction::Left, Direction::Right]
            .get(id)
            .copied()
    }

    pub fn unit(self) -> [f64; 2] {
        match self {
            Direction::Up => [0.0, 1.0],
            Direction::Down => [0.0, -1.0],
            Direction::Left => [-1.0, 0.0],
            Direction::Right => [1.0, 0.0],
        }
    }

    pub const ALL: [Direction; 4] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];
}

/// Environmental splits differ in zone layout and color vocabulary; the
/// union of A-C covers D's colors so ABC->D generalization is learnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    A,
    B,
    C,
    D,
}

impl Split {
    pub fn parse_many(s: &str) -> Option<Vec<Split>> {
        let mut out = Vec::new();
        for ch in s.chars() {
            out.push(match ch.to_ascii_uppercase() {
                'A' => Split::A,
                'B' => Split::B,
                'C' => Split::C,
                'D' => Split::D,
                _ => return None,
            });
        }
        if out.is_empty() {
            None
        } else {
            Some(out)
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Split::A => "A",
            Split::B => "B",
            Split::C => "C",
            Split::D => "D",
        }
    }

    pub fn from_letter(s: &str) -> Option<Split> {
        match s {
            "A" => Some(Split::A),
            "B" => Some(Split::B),
            "C" => Some(Split::C),
            "D" => Some(Split::D),
            _ => None,
        }
    }

    /// Color palette available in this split.
    pub fn colors(self) -> &'static [usize] {
        match self {
            Split::A => &[0, 1, 2, 3],
            Split::B => &[1, 2, 3, 4],
            Split::C => &[2, 3, 4, 5],
            Split::D => &[0, 2, 4, 5],
        }
    }

    /// Zone rectangles (center, half-extent), one layout per split.
    pub fn zones(self) -> Vec<Zone> {
        let mk = |cx: f64, cy: f64| Zone { center: [cx, cy], half: [0.09, 0.09] };
        match self {
            Split::A => vec![mk(0.15, 0.15), mk(0.85, 0.15), mk(0.5, 0.88)],
            Split::B => vec![mk(0.15, 0.85), mk(0.5, 0.12), mk(0.85, 0.85)],
            Split::C => vec![mk(0.12, 0.5), mk(0.88, 0.35), mk(0.6, 0.9)],
            Split::D => vec![mk(0.2, 0.8), mk(0.8, 0.2), mk(0.85, 0.75)],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Zone {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

impl Zone {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half[0]
            && (p[1] - self.center[1]).abs() <= self.half[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectState {
    pub pos: [f64; 2],
    pub color: usize,
    pub held: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: [f64; 2],
    pub gripper_closed: bool,
    pub objects: Vec<ObjectState>,
    pub zones: Vec<Zone>,
}

impl WorldState {
    pub fn held_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    pub fn object_of_color(&self, color: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.color == color)
    }

    /// Check the structural invariants: positions in the unit square, at
    /// most one held object, and the held object glued to the gripper.
    pub fn check_invariants(&self) -> Result<(), String> {
        let in_unit = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        if !in_unit(self.gripper) {
            return Err(format!("gripper out of bounds: {:?}", self.gripper));
        }
        let mut held = 0;
        for o in &self.objects {
            if !in_unit(o.pos) {
                return Err(format!("object out of bounds: {:?}", o.pos));
            }
            if o.held {
                held += 1;
                if o.pos != self.gripper {
                    return Err("held object not at gripper".to_string());
                }
            }
        }
        if held > 1 {
            return Err(format!("{held} objects held"));
        }
        Ok(())
    }
}

/// Instruction vocabulary offsets: pad, then templates, colors, zones,
/// directions, each in its own id range so token identity encodes role.
pub const TOK_PAD: u32 = 0;

pub fn template_token(t: Template) -> u32 {
    1 + t.id() as u32
}

pub fn color_token(c: usize) -> u32 {
    (1 + N_TEMPLATES + c) as u32
}

pub fn zone_token(cfg: &EnvConfig, z: usize) -> u32 {
    (1 + N_TEMPLATES + cfg.n_colors + z) as u32
}

pub fn dir_token(cfg: &EnvConfig, d: Direction) -> u32 {
    (1 + N_TEMPLATES + cfg.n_colors + cfg.n_zones + d.id()) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub template: Template,
    pub color: Option<usize>,
    pub zone: Option<usize>,
    pub dir: Option<Direction>,
    /// Fixed-length padded token ids.
    pub tokens: Vec<u32>,
}

impl Instruction {
    pub fn new(
        cfg: &EnvConfig,
        template: Template,
        color: Option<usize>,
        zone: Option<usize>,
        dir: Option<Direction>,
    ) -> Instruction {
        let mut tokens = vec![template_token(template)];
        if let Some(c) = color {
            tokens.push(color_token(c));
        }
        if let Some(z) = zone {
            tokens.push(zone_token(cfg, z));
        }
        if let Some(d) = dir {
            tokens.push(dir_token(cfg, d));
        }
        assert!(tokens.len() <= cfg.l_inst);
        tokens.resize(cfg.l_inst, TOK_PAD);
        Instruction { template, color, zone, dir, tokens }
    }

    /// Argument ids in (color, zone, direction) order, for serialization.
    pub fn args(&self) -> Vec<usize> {
        let mut a = Vec::new();
        if let Some(c) = self.color {
            a.push(c);
        }
        if let Some(z) = self.zone {
            a.push(z);
        }
        if let Some(d) = self.dir {
            a.push(d.id());
        }
        a
    }
}

/// 6 continuous pose dims (only dx, dy drive the simulator; dims 2-5 are
/// emitted and supervised but ignored by the dynamics) plus a discrete
/// gripper open/close flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action7 {
    pub pose: [f64; 6],
    pub gripper: bool,
}

impl Action7 {
    pub fn zero() -> Action7 {
        Action7 { pose: [0.0; 6], gripper: false }
    }

    pub fn movement(dx: f64, dy: f64, gripper: bool) -> Action7 {
        Action7 { pose: [dx, dy, 0.0, 0.0, 0.0, 0.0], gripper }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeStep {
    /// Observation tokens, l_obs x d_raw.
    pub obs: Vec<Vec<f64>>,
    pub action: Action7,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub instruction: Instruction,
    pub steps: Vec<EpisodeStep>,
    pub success: bool,
    pub subtask_chain_position: usize,
    pub split: Split,
}

/// Sample a world for a split: 2-4 objects with distinct colors from the
/// split palette, mutually separated, away from walls.
pub fn sample_world(cfg: &EnvConfig, split: Split, rng: &mut Rng) -> WorldState {
    let k = cfg.k_min + rng.usize_below(cfg.k_max - cfg.k_min + 1);
    let mut palette: Vec<usize> = split.colors().to_vec();
    rng.shuffle(&mut palette);
    let colors: Vec<usize> = palette[..k].to_vec();
    let mut objects: Vec<ObjectState> = Vec::with_capacity(k);
    for color in colors {
        let pos = loop {
            let p = [rng.range_f64(0.08, 0.92), rng.range_f64(0.08, 0.92)];
            let clear = objects.iter().all(|o| dist(o.pos, p) > 0.12);
            if clear {
                break p;
            }
        };
        objects.push(ObjectState { pos, color, held: false });
    }
    let gripper = [rng.range_f64(0.1, 0.9), rng.range_f64(0.1, 0.9)];
    WorldState {
        gripper,
        gripper_closed: false,
        objects,
        zones: split.zones(),
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

pub(crate) fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}
