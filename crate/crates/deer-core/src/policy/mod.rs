//! Adaptive per-timestep inference: probe exits in order, stop when the
//! termination criterion fires, commit exactly the chosen exit's action
//! and recurrent state, and account every FLOP.

use crate::env::{Action7, EnvConfig, Instruction, WorldState};
use crate::net::infer::{ExitCache, HeadState, InferModel};
use crate::net::ActionPrediction;
use crate::env::{ChainPolicy, StepStats};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Calibrated exit thresholds. `eta[i-1]` guards exit i; exits at or
/// beyond `n_cap` behave as infinity (everything still active exits at
/// the cap).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    pub eta: Vec<f64>,
    pub n_cap: usize,
}

impl ThresholdVector {
    pub fn new(eta: Vec<f64>, n_cap: usize) -> ThresholdVector {
        assert!(n_cap >= 1 && n_cap <= eta.len(), "cap {n_cap} vs {} exits", eta.len());
        for (i, v) in eta.iter().enumerate().take(n_cap.saturating_sub(1)) {
            assert!(*v >= 0.0, "eta[{i}] negative");
        }
        ThresholdVector { eta, n_cap }
    }

    /// Threshold applied at exit i (1-based); infinity at and beyond the
    /// cap so every sample exits.
    pub fn at(&self, exit: usize) -> f64 {
        if exit >= self.n_cap {
            f64::INFINITY
        } else {
            self.eta[exit - 1]
        }
    }

    /// Always exits at `k` via an infinite first threshold (k = 1) or
    /// zero thresholds below the cap.
    pub fn static_exit(k: usize, n_exits: usize) -> ThresholdVector {
        assert!(k >= 1 && k <= n_exits);
        let mut eta = vec![0.0; n_exits];
        if k == 1 {
            eta[0] = f64::INFINITY;
        }
        ThresholdVector { eta, n_cap: k }
    }
}

/// Termination criterion for adaptive inference. Exactly one is active
/// per evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub enum Criterion {
    /// Exit at the smallest i with ||pred_i - pred_{i-1}||_2 < eta_i
    /// (predictions compared on the 7-float consistency vector; the i=1
    /// comparison uses the pooled pre-backbone feature).
    ActionConsistency(ThresholdVector),
    /// Exit at the smallest i with cosine(pooled_i, pooled_{i-1}) > s_i.
    FeatureSimilarity { thresholds: Vec<f64>, n_cap: usize },
    /// Exit index follows a non-decreasing step schedule over time.
    TimeProgressive { schedule: Vec<usize>, n_cap: usize },
}

impl Criterion {
    pub fn static_exit(k: usize, n_exits: usize) -> Criterion {
        Criterion::ActionConsistency(ThresholdVector::static_exit(k, n_exits))
    }

    pub fn n_cap(&self) -> usize {
        match self {
            Criterion::ActionConsistency(tv) => tv.n_cap,
            Criterion::FeatureSimilarity { n_cap, .. } => *n_cap,
            Criterion::TimeProgressive { n_cap, .. } => *n_cap,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Criterion::ActionConsistency(_) => "action",
            Criterion::FeatureSimilarity { .. } => "feature",
            Criterion::TimeProgressive { .. } => "time",
        }
    }
}

/// Everything observable about one adaptive step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub exit: usize,
    /// Criterion values per probed exit (consistency deltas or cosine
    /// similarities; empty for time-progressive).
    pub deltas: Vec<f64>,
    pub flops_backbone: u64,
    pub flops_head: u64,
    pub wall_ns: u64,
    pub action_pose: [f64; 6],
    pub action_grip: bool,
}

/// Outcome of one exit decision: chosen exit, its prediction, the
/// committed head state, and the itemized compute.
pub struct Decision<S> {
    pub exit: usize,
    pub prediction: ActionPrediction,
    pub state: HeadState<S>,
    pub deltas: Vec<f64>,
    pub flops_backbone: u64,
    pub flops_head: u64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0 // zero-vector feature: force continuation
    } else {
        dot / (na * nb)
    }
}

/// Probe exits 1..=n_cap with the action-consistency rule. Earlier
/// probes never touch `state`; the candidate state computed for the
/// chosen exit is returned for the caller to commit.
pub fn decide_action_consistency<S: Float>(
    model: &InferModel<S>,
    cache: &mut ExitCache<S>,
    state: &HeadState<S>,
    thresholds: &ThresholdVector,
    n_cap: usize,
) -> Decision<S> {
    assert!(n_cap >= 1 && n_cap <= model.cfg.n_exits, "cap {n_cap}");
    let mut flops_backbone = 0;
    let mut flops_head = 0;
    let (mut prev, _, hf) = model.head_forward(cache.pooled(0), state);
    flops_head += hf;
    let mut deltas = Vec::with_capacity(n_cap);
    let mut i = 1;
    loop {
        flops_backbone += model.forward_to_exit(cache, i);
        let (pred, cand, hf) = model.head_forward(cache.pooled(i), state);
        flops_head += hf;
        let delta = pred.l2_delta(&prev);
        deltas.push(delta);
        let eta = if i >= n_cap { f64::INFINITY } else { thresholds.at(i) };
        if delta < eta {
            return Decision { exit: i, prediction: pred, state: cand, deltas, flops_backbone, flops_head };
        }
        prev = pred;
        i += 1;
    }
}

/// Feature-similarity criterion: pick the exit by cosine similarity of
/// adjacent pooled features, then evaluate the head once.
pub fn decide_feature_similarity<S: Float>(
    model: &InferModel<S>,
    cache: &mut ExitCache<S>,
    state: &HeadState<S>,
    thresholds: &[f64],
    n_cap: usize,
) -> Decision<S> {
    assert!(n_cap >= 1 && n_cap <= model.cfg.n_exits);
    let mut flops_backbone = 0;
    let mut sims = Vec::with_capacity(n_cap);
    let mut chosen = n_cap;
    for i in 1..=n_cap {
        flops_backbone += model.forward_to_exit(cache, i);
        let sim = cosine(&cache.pooled_f64(i - 1), &cache.pooled_f64(i));
        sims.push(sim);
        if i == n_cap || sim > thresholds[i - 1] {
            chosen = i;
            break;
        }
    }
    let (pred, cand, flops_head) = model.head_forward(cache.pooled(chosen), state);
    Decision {
        exit: chosen,
        prediction: pred,
        state: cand,
        deltas: sims,
        flops_backbone,
        flops_head,
    }
}

/// Time-progressive criterion: the exit is a non-decreasing function of
/// the timestep, capped at n_cap; the head runs once.
pub fn decide_time_progressive<S: Float>(
    model: &InferModel<S>,
    cache: &mut ExitCache<S>,
    state: &HeadState<S>,
    schedule: &[usize],
    n_cap: usize,
    t: usize,
) -> Decision<S> {
    assert!(!schedule.is_empty());
    debug_assert!(schedule.windows(2).all(|w| w[0] <= w[1]), "schedule must be non-decreasing");
    let raw = *schedule.get(t).unwrap_or(schedule.last().unwrap());
    let exit = raw.clamp(1, n_cap);
    let flops_backbone = model.forward_to_exit(cache, exit);
    let (pred, cand, flops_head) = model.head_forward(cache.pooled(exit), state);
    Decision {
        exit,
        prediction: pred,
        state: cand,
        deltas: Vec::new(),
        flops_backbone,
        flops_head,
    }
}

pub fn decide<S: Float>(
    model: &InferModel<S>,
    cache: &mut ExitCache<S>,
    state: &HeadState<S>,
    criterion: &Criterion,
    t: usize,
) -> Decision<S> {
    match criterion {
        Criterion::ActionConsistency(tv) => {
            decide_action_consistency(model, cache, state, tv, tv.n_cap)
        }
        Criterion::FeatureSimilarity { thresholds, n_cap } => {
            decide_feature_similarity(model, cache, state, thresholds, *n_cap)
        }
        Criterion::TimeProgressive { schedule, n_cap } => {
            decide_time_progressive(model, cache, state, schedule, *n_cap, t)
        }
    }
}

/// Adaptive policy: owns the per-episode recurrent state and step traces.
pub struct DeerPolicy<'m, S: Float> {
    pub model: &'m InferModel<S>,
    pub env_cfg: EnvConfig,
    pub criterion: Criterion,
    state: HeadState<S>,
    tokens: Vec<u32>,
    t: usize,
    pub traces: Vec<StepTrace>,
    /// Record a StepTrace per step (off by default; evaluation over many
    /// chains only needs the aggregated stats).
    pub keep_traces: bool,
    /// When false, skip wall-clock measurement (keeps hot loops cheap).
    pub record_wall_time: bool,
}

impl<'m, S: Float> DeerPolicy<'m, S> {
    pub fn new(model: &'m InferModel<S>, env_cfg: EnvConfig, criterion: Criterion) -> Self {
        let state = HeadState::zeros(&model.cfg);
        DeerPolicy {
            model,
            env_cfg,
            criterion,
            state,
            tokens: Vec::new(),
            t: 0,
            traces: Vec::new(),
            keep_traces: false,
            record_wall_time: false,
        }
    }

    /// One adaptive step on an already-encoded observation.
    pub fn step_obs(&mut self, obs: &[Vec<f64>]) -> (Action7, StepStats) {
        let started = if self.record_wall_time { Some(Instant::now()) } else { None };
        let mut cache = self.model.encode(&self.tokens, obs);
        let decision = decide(self.model, &mut cache, &self.state, &self.criterion, self.t);
        let wall_ns = started.map(|s| s.elapsed().as_nanos() as u64).unwrap_or(0);
        self.state = decision.state;
        let action = decision.prediction.to_action();
        if self.keep_traces {
            self.traces.push(StepTrace {
                t: self.t,
                exit: decision.exit,
                deltas: decision.deltas,
                flops_backbone: decision.flops_backbone,
                flops_head: decision.flops_head,
                wall_ns,
                action_pose: action.pose,
                action_grip: action.gripper,
            });
        }
        self.t += 1;
        (
            action,
            StepStats {
                exit: decision.exit,
                flops_backbone: decision.flops_backbone,
                flops_head: decision.flops_head,
                wall_ns,
            },
        )
    }
}

impl<'m, S: Float> ChainPolicy for DeerPolicy<'m, S> {
    fn begin_subtask(&mut self, instruction: &Instruction) {
        self.state = HeadState::zeros(&self.model.cfg);
        self.tokens = instruction.tokens.clone();
        self.t = 0;
    }

    fn act(&mut self, state: &WorldState, _t: usize) -> (Action7, StepStats) {
        let obs = crate::env::observe(&self.env_cfg, state);
        self.step_obs(&obs)
    }
}

/// Per-episode record of adaptive steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepTrace>,
    pub success: bool,
}

impl EpisodeLog {
    pub fn total_backbone_flops(&self) -> u64 {
        self.steps.iter().map(|s| s.flops_backbone).sum()
    }

    pub fn total_head_flops(&self) -> u64 {
        self.steps.iter().map(|s| s.flops_head).sum()
    }

    pub fn peak_backbone_flops(&self) -> u64 {
        self.steps.iter().map(|s| s.flops_backbone).max().unwrap_or(0)
    }
}

/// Roll one instructed episode in `env` with an adaptive policy.
pub fn run_episode<S: Float>(
    model: &InferModel<S>,
    env: &mut crate::env::TaskEnv,
    criterion: &Criterion,
) -> EpisodeLog {
    let mut policy = DeerPolicy::new(model, env.cfg.clone(), criterion.clone());
    policy.keep_traces = true;
    policy.record_wall_time = true;
    policy.begin_subtask(&env.instruction().clone());
    let mut success = env.succeeded();
    let mut t = 0;
    while !success && t < env.cfg.t_max {
        let obs = env.observe();
        let (action, _) = policy.step_obs(&obs);
        success = env.step(&action).success;
        t += 1;
    }
    EpisodeLog { steps: policy.traces, success }
}

/// One JSON line per step: `{"t":..,"exit":..,"flops_backbone":..,
/// "flops_head":..,"delta":[..],"action":{..},"ns":..}`.
pub fn write_episode_log(w: &mut dyn Write, log: &EpisodeLog) -> std::io::Result<()> {
    for s in &log.steps {
        let line = serde_json::json!({
            "t": s.t,
            "exit": s.exit,
            "flops_backbone": s.flops_backbone,
            "flops_head": s.flops_head,
            "delta": s.deltas,
            "action": {"pose": s.action_pose.to_vec(), "grip": u8::from(s.action_grip)},
            "ns": s.wall_ns,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}
