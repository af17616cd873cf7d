//! Five-subtask evaluation chains on a persistent world. A chain's score
//! is the number of leading successful subtasks; execution stops at the
//! first failure.

use super::{
    dataset::push_candidates, expert_action, sample_world, sim::TaskEnv, Action7, EnvConfig,
    Instruction, Split, Template, WorldState,
};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Per-step accounting a policy reports to the evaluator.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    /// Chosen exit index (0 for policies without exits).
    pub exit: usize,
    pub flops_backbone: u64,
    pub flops_head: u64,
    pub wall_ns: u64,
}

/// A policy that can be rolled through task chains.
pub trait ChainPolicy {
    fn begin_subtask(&mut self, instruction: &Instruction);
    fn act(&mut self, state: &WorldState, t: usize) -> (Action7, StepStats);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub n_chains: usize,
    /// Mean chain score in [0, 5].
    pub avg_successful_len: f64,
    /// Fraction of chains completing at least j subtasks, j = 1..5.
    pub subtask_rates: [f64; 5],
    /// Steps terminating at each exit index (slot 0 collects non-exit
    /// policies).
    pub exit_histogram: Vec<u64>,
    pub total_steps: u64,
    pub mean_backbone_flops: f64,
    pub mean_head_flops: f64,
    pub peak_backbone_flops: u64,
    pub peak_step_flops: u64,
    pub total_wall_ns: u64,
    pub scores: Vec<usize>,
}

impl ChainMetrics {
    /// Deterministic content (everything except wall-clock time).
    pub fn fingerprint(&self) -> String {
        format!(
            "{:?}|{:?}|{}|{}|{}|{}",
            self.scores,
            self.exit_histogram,
            self.total_steps,
            self.mean_backbone_flops,
            self.mean_head_flops,
            self.peak_backbone_flops,
        )
    }
}

/// Sample a chain: a world plus five instructions verified feasible by
/// simulating the expert through them in order.
pub fn sample_chain(
    cfg: &EnvConfig,
    split: Split,
    rng: &mut Rng,
) -> (WorldState, Vec<Instruction>) {
    let world = sample_world(cfg, split, rng);
    let mut sim = world.clone();
    let mut instructions = Vec::with_capacity(5);
    for _ in 0..5 {
        let instr = sample_feasible_subtask(cfg, &mut sim, rng);
        instructions.push(instr);
    }
    (world, instructions)
}

/// Pick a subtask the expert can finish from `sim`, and advance `sim`
/// through the expert's solution so the next subtask chains on from it.
fn sample_feasible_subtask(cfg: &EnvConfig, sim: &mut WorldState, rng: &mut Rng) -> Instruction {
    for _ in 0..64 {
        let held = sim.held_index();
        let instr = match held {
            Some(h) => {
                let color = sim.objects[h].color;
                if rng.chance(0.5) {
                    Instruction::new(cfg, Template::Release, None, None, None)
                } else {
                    let zone = rng.usize_below(sim.zones.len());
                    Instruction::new(cfg, Template::PlaceInZone, Some(color), Some(zone), None)
                }
            }
            None => {
                let template = *rng.pick(&[
                    Template::Reach,
                    Template::Grasp,
                    Template::PlaceInZone,
                    Template::PushDirection,
                ]);
                match template {
                    Template::PushDirection => {
                        let candidates = push_candidates(cfg, sim);
                        if candidates.is_empty() {
                            continue;
                        }
                        let (obj, dir) = *rng.pick(&candidates);
                        Instruction::new(
                            cfg,
                            template,
                            Some(sim.objects[obj].color),
                            None,
                            Some(dir),
                        )
                    }
                    Template::PlaceInZone => {
                        let obj = rng.usize_below(sim.objects.len());
                        let zone = rng.usize_below(sim.zones.len());
                        Instruction::new(
                            cfg,
                            template,
                            Some(sim.objects[obj].color),
                            Some(zone),
                            None,
                        )
                    }
                    _ => {
                        let obj = rng.usize_below(sim.objects.len());
                        Instruction::new(cfg, template, Some(sim.objects[obj].color), None, None)
                    }
                }
            }
        };
        let mut env = TaskEnv::new(cfg.clone(), sim.clone(), instr.clone());
        if env.succeeded() {
            continue; // already satisfied, no work to demonstrate
        }
        let mut solved = false;
        for _ in 0..cfg.t_max {
            match expert_action(cfg, &env.state, &instr) {
                Ok(a) => {
                    if env.step(&a).success {
                        solved = true;
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        if solved {
            *sim = env.state;
            return instr;
        }
    }
    panic!("could not sample a feasible chain subtask");
}

#[derive(Default, Clone)]
struct ChainTally {
    score: usize,
    steps: u64,
    exit_counts: Vec<u64>,
    sum_backbone: u128,
    sum_head: u128,
    peak_backbone: u64,
    peak_step: u64,
    wall_ns: u64,
}

/// Roll one chain (derived stream k of `seed`) with the given policy.
fn run_one_chain(
    cfg: &EnvConfig,
    policy: &mut dyn ChainPolicy,
    splits: &[Split],
    seed: u64,
    k: usize,
) -> ChainTally {
    let mut tally = ChainTally::default();
    let mut rng = Rng::stream(seed, "chain", &[k as u64]);
    let split = splits[k % splits.len()];
    let (world, instructions) = sample_chain(cfg, split, &mut rng);
    let mut env: Option<TaskEnv> = None;
    for instr in instructions {
        match env.as_mut() {
            None => env = Some(TaskEnv::new(cfg.clone(), world.clone(), instr.clone())),
            Some(e) => e.set_instruction(instr.clone()),
        }
        policy.begin_subtask(&instr);
        let e = env.as_mut().unwrap();
        let mut success = e.succeeded();
        let mut t = 0usize;
        while !success && t < cfg.t_max {
            let (action, stats) = policy.act(&e.state, t);
            success = e.step(&action).success;
            t += 1;
            tally.steps += 1;
            if stats.exit >= tally.exit_counts.len() {
                tally.exit_counts.resize(stats.exit + 1, 0);
            }
            tally.exit_counts[stats.exit] += 1;
            tally.sum_backbone += stats.flops_backbone as u128;
            tally.sum_head += stats.flops_head as u128;
            tally.peak_backbone = tally.peak_backbone.max(stats.flops_backbone);
            tally.peak_step = tally.peak_step.max(stats.flops_backbone + stats.flops_head);
            tally.wall_ns += stats.wall_ns;
        }
        if success {
            tally.score += 1;
        } else {
            break;
        }
    }
    tally
}

fn merge_tallies(n_chains: usize, tallies: Vec<ChainTally>) -> ChainMetrics {
    let mut exit_histogram: Vec<u64> = vec![0];
    let mut total_steps = 0u64;
    let mut sum_backbone = 0u128;
    let mut sum_head = 0u128;
    let mut peak_backbone = 0u64;
    let mut peak_step = 0u64;
    let mut total_ns = 0u64;
    let mut scores = Vec::with_capacity(n_chains);
    for t in tallies {
        scores.push(t.score);
        total_steps += t.steps;
        if t.exit_counts.len() > exit_histogram.len() {
            exit_histogram.resize(t.exit_counts.len(), 0);
        }
        for (i, c) in t.exit_counts.iter().enumerate() {
            exit_histogram[i] += c;
        }
        sum_backbone += t.sum_backbone;
        sum_head += t.sum_head;
        peak_backbone = peak_backbone.max(t.peak_backbone);
        peak_step = peak_step.max(t.peak_step);
        total_ns += t.wall_ns;
    }
    let n = n_chains.max(1) as f64;
    let avg = scores.iter().sum::<usize>() as f64 / n;
    let mut rates = [0.0; 5];
    for (j, r) in rates.iter_mut().enumerate() {
        *r = scores.iter().filter(|&&s| s >= j + 1).count() as f64 / n;
    }
    let steps = total_steps.max(1) as f64;
    ChainMetrics {
        n_chains,
        avg_successful_len: avg,
        subtask_rates: rates,
        exit_histogram,
        total_steps,
        mean_backbone_flops: sum_backbone as f64 / steps,
        mean_head_flops: sum_head as f64 / steps,
        peak_backbone_flops: peak_backbone,
        peak_step_flops: peak_step,
        total_wall_ns: total_ns,
        scores,
    }
}

/// Roll a policy through `n_chains` five-subtask chains. Chain k draws
/// from its own derived stream, so results are independent of execution
/// order.
pub fn evaluate_chains(
    cfg: &EnvConfig,
    policy: &mut dyn ChainPolicy,
    splits: &[Split],
    n_chains: usize,
    seed: u64,
) -> ChainMetrics {
    let tallies = (0..n_chains)
        .map(|k| run_one_chain(cfg, policy, splits, seed, k))
        .collect();
    merge_tallies(n_chains, tallies)
}

/// Concurrent variant: workers own independent policy instances from the
/// factory and process disjoint chain indices. Per-chain tallies use
/// integer sums, so the merged metrics are identical to the sequential
/// evaluation regardless of scheduling.
pub fn evaluate_chains_parallel<F>(
    cfg: &EnvConfig,
    factory: F,
    splits: &[Split],
    n_chains: usize,
    seed: u64,
    workers: usize,
) -> ChainMetrics
where
    F: Fn() -> Box<dyn ChainPolicy + Send> + Sync,
{
    let workers = workers.max(1).min(n_chains.max(1));
    if workers <= 1 {
        let mut policy = factory();
        return evaluate_chains(cfg, policy.as_mut(), splits, n_chains, seed);
    }
    let mut slots: Vec<Option<ChainTally>> = vec![None; n_chains];
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs: Vec<std::sync::Mutex<&mut Option<ChainTally>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let next = &next;
            let slot_refs = &slot_refs;
            let factory = &factory;
            scope.spawn(move || {
                let mut policy = factory();
                loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if k >= n_chains {
                        break;
                    }
                    let tally = run_one_chain(cfg, policy.as_mut(), splits, seed, k);
                    **slot_refs[k].lock().unwrap() = Some(tally);
                }
            });
        }
    });
    drop(slot_refs);
    merge_tallies(n_chains, slots.into_iter().map(|s| s.expect("chain ran")).collect())
}

/// Oracle policy: replays the scripted expert.
pub struct ExpertPolicy {
    cfg: EnvConfig,
    instruction: Option<Instruction>,
}

impl ExpertPolicy {
    pub fn new(cfg: EnvConfig) -> Self {
        ExpertPolicy { cfg, instruction: None }
    }
}

impl ChainPolicy for ExpertPolicy {
    fn begin_subtask(&mut self, instruction: &Instruction) {
        self.instruction = Some(instruction.clone());
    }

    fn act(&mut self, state: &WorldState, _t: usize) -> (Action7, StepStats) {
        let instr = self.instruction.as_ref().expect("begin_subtask not called");
        let action = expert_action(&self.cfg, state, instr).unwrap_or_else(|_| Action7::zero());
        (action, StepStats::default())
    }
}

/// Uniform-random actions; the floor baseline.
pub struct RandomPolicy {
    rng: Rng,
    delta_max: f64,
}

impl RandomPolicy {
    pub fn new(seed: u64, cfg: &EnvConfig) -> Self {
        RandomPolicy { rng: Rng::stream(seed, "random-policy", &[]), delta_max: cfg.delta_max }
    }
}

impl ChainPolicy for RandomPolicy {
    fn begin_subtask(&mut self, _instruction: &Instruction) {}

    fn act(&mut self, _state: &WorldState, _t: usize) -> (Action7, StepStats) {
        let dx = self.rng.range_f64(-self.delta_max, self.delta_max);
        let dy = self.rng.range_f64(-self.delta_max, self.delta_max);
        let grip = self.rng.chance(0.5);
        (Action7::movement(dx, dy, grip), StepStats::default())
    }
}
