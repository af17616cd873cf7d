//! Cost modeling and threshold calibration under compute budgets.
//!
//! Offline path: model per-exit costs, cap the reachable exit by peak
//! FLOPs and memory, solve the geometric exit-proportion model against
//! the average budget by bisection, and fit per-exit thresholds as
//! quantiles of calibration statistics. Online path: sequential
//! model-based optimization ([`bayes`]).

pub mod bayes;

pub use bayes::{bo_log_csv_header, bo_log_csv_row, solve_online, BoConfig, BoLogRow, ObjectiveSample};

use crate::env::Episode;
use crate::net::infer::{group_matmul_flops, head_matmul_flops, InferModel};
use crate::net::{HeadState, NetConfig};
use crate::policy::{Criterion, ThresholdVector};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum BudgetError {
    /// Peak-FLOPs or memory constraint excludes even the first exit.
    Infeasible { reason: String },
    /// Average budget below the cost of always exiting first.
    BudgetBelowMinimum { per_step: f64, c1: f64 },
    NonMonotoneTable { detail: String },
    TooFewSamples { got: usize, need: usize },
}

impl fmt::Display for BudgetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BudgetError::Infeasible { reason } => write!(f, "infeasible budget: {reason}"),
            BudgetError::BudgetBelowMinimum { per_step, c1 } => write!(
                f,
                "per-step budget {per_step} is below the minimum exit cost C_1 = {c1}"
            ),
            BudgetError::NonMonotoneTable { detail } => {
                write!(f, "cost table must be monotone: {detail}")
            }
            BudgetError::TooFewSamples { got, need } => {
                write!(f, "calibration needs at least {need} samples, got {got}")
            }
        }
    }
}

impl std::error::Error for BudgetError {}

// ── Cost model ──────────────────────────────────────────────────────

/// Per-exit cumulative backbone FLOPs and modeled resident memory, plus
/// the per-probe head cost for itemized accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostModel {
    /// C_i, cumulative backbone FLOPs to reach exit i (1-based at
    /// index i-1). Strictly increasing.
    pub flops: Vec<u64>,
    /// Modeled memory in GB when exits up to i are loaded. Non-decreasing.
    pub mem_gb: Vec<f64>,
    /// One action-head evaluation, in FLOPs.
    pub head_flops: u64,
}

impl CostModel {
    /// Analytic mode: exact matmul counts from the layer dimensions, and
    /// memory modeled as resident f32 weight bytes (encoder + loaded
    /// blocks + head).
    pub fn analytic(cfg: &NetConfig) -> CostModel {
        let group = group_matmul_flops(cfg);
        let flops = (1..=cfg.n_exits).map(|i| i as u64 * group).collect();
        let d = cfg.d_model;
        let block_params = 4 * d * d + 2 * d * cfg.block_mlp_hidden
            + cfg.block_mlp_hidden
            + d
            + 4 * d; // attn + mlp + ln gains/biases
        let h = cfg.head.lstm_hidden;
        let mut head_params = 0usize;
        for l in 0..cfg.head.lstm_layers {
            let d_in = if l == 0 { d } else { h };
            head_params += d_in * 4 * h + h * 4 * h + 4 * h;
        }
        head_params += 2 * (h * cfg.head.mlp_hidden + 3 * cfg.head.mlp_hidden)
            + cfg.head.mlp_hidden * 6
            + cfg.head.mlp_hidden
            + 7;
        let encoder_params = cfg.vocab_size * d + cfg.d_raw * d + d;
        let bytes_per = 4.0; // f32 inference weights
        let mem_gb = (1..=cfg.n_exits)
            .map(|i| {
                let params =
                    encoder_params + head_params + i * cfg.blocks_per_exit * block_params;
                params as f64 * bytes_per / 1e9
            })
            .collect();
        CostModel { flops, mem_gb, head_flops: head_matmul_flops(cfg) }
    }

    /// Table mode: published per-layer GFLOPs and GB figures, cumulated
    /// into exits of `layers_per_exit` layers each.
    pub fn from_layer_table(
        gflops_per_layer: &[f64],
        gb_per_layer: &[f64],
        layers_per_exit: usize,
    ) -> Result<CostModel, BudgetError> {
        assert_eq!(gflops_per_layer.len(), gb_per_layer.len());
        assert!(layers_per_exit >= 1);
        let n_layers = gflops_per_layer.len();
        let n_exits = n_layers / layers_per_exit;
        if n_exits == 0 {
            return Err(BudgetError::NonMonotoneTable {
                detail: "table shorter than one exit".to_string(),
            });
        }
        let mut flops = Vec::with_capacity(n_exits);
        let mut mem_gb = Vec::with_capacity(n_exits);
        let mut facc = 0.0f64;
        let mut macc = 0.0f64;
        for layer in 0..n_exits * layers_per_exit {
            if gflops_per_layer[layer] <= 0.0 {
                return Err(BudgetError::NonMonotoneTable {
                    detail: format!("layer {layer} has non-positive GFLOPs"),
                });
            }
            if gb_per_layer[layer] < 0.0 {
                return Err(BudgetError::NonMonotoneTable {
                    detail: format!("layer {layer} has negative memory"),
                });
            }
            facc += gflops_per_layer[layer];
            macc += gb_per_layer[layer];
            if (layer + 1) % layers_per_exit == 0 {
                flops.push((facc * 1e9).round() as u64);
                mem_gb.push(macc);
            }
        }
        Ok(CostModel { flops, mem_gb, head_flops: 0 })
    }

    /// Uniform published figures (the common case: one GFLOPs/GB number
    /// for every layer).
    pub fn from_uniform_layers(
        n_layers: usize,
        gflops_per_layer: f64,
        gb_per_layer: f64,
        layers_per_exit: usize,
    ) -> Result<CostModel, BudgetError> {
        CostModel::from_layer_table(
            &vec![gflops_per_layer; n_layers],
            &vec![gb_per_layer; n_layers],
            layers_per_exit,
        )
    }

    pub fn n_exits(&self) -> usize {
        self.flops.len()
    }

    /// C_i in FLOPs, 1-based exit index.
    pub fn c(&self, exit: usize) -> u64 {
        self.flops[exit - 1]
    }

    pub fn mem(&self, exit: usize) -> f64 {
        self.mem_gb[exit - 1]
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        for i in 1..self.flops.len() {
            if self.flops[i] <= self.flops[i - 1] {
                return Err(BudgetError::NonMonotoneTable {
                    detail: format!("C_{} = {} <= C_{} = {}", i + 1, self.flops[i], i, self.flops[i - 1]),
                });
            }
            if self.mem_gb[i] < self.mem_gb[i - 1] {
                return Err(BudgetError::NonMonotoneTable {
                    detail: format!("mem_{} < mem_{}", i + 1, i),
                });
            }
        }
        Ok(())
    }

    /// Stable content hash used to tie threshold files to the cost model
    /// they were calibrated against.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for f in &self.flops {
            eat(&f.to_le_bytes());
        }
        for m in &self.mem_gb {
            eat(&m.to_bits().to_le_bytes());
        }
        eat(&self.head_flops.to_le_bytes());
        format!("{h:016x}")
    }
}

// ── Budget spec ─────────────────────────────────────────────────────

/// Average, peak, and memory budgets for a task suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Total FLOPs budget B for the whole suite.
    pub total_flops: f64,
    /// Peak per-step FLOPs budget G.
    pub peak_flops: f64,
    /// Memory cap M in GB.
    pub mem_gb: f64,
    /// Number of tasks in the suite.
    pub n_tasks: usize,
    /// Mean task length from the dataset manifest.
    pub mean_len: f64,
}

impl BudgetSpec {
    /// Convenience: specify the average budget per step directly.
    pub fn per_step(avg_flops: f64, peak_flops: f64, mem_gb: f64) -> BudgetSpec {
        BudgetSpec { total_flops: avg_flops, peak_flops, mem_gb, n_tasks: 1, mean_len: 1.0 }
    }

    pub fn per_step_budget(&self) -> f64 {
        self.total_flops / (self.n_tasks as f64 * self.mean_len)
    }
}

/// Largest exit whose cumulative cost and memory satisfy the peak
/// constraints. Exits beyond it are never loaded.
pub fn cap_exit(cost: &CostModel, peak_flops: f64, mem_gb: f64) -> Result<usize, BudgetError> {
    let mut cap = 0;
    for i in 1..=cost.n_exits() {
        if cost.c(i) as f64 <= peak_flops && cost.mem(i) <= mem_gb {
            cap = i;
        }
    }
    if cap == 0 {
        return Err(BudgetError::Infeasible {
            reason: format!(
                "peak budget {peak_flops} FLOPs / {mem_gb} GB cannot load the first exit \
                 (C_1 = {} FLOPs, mem_1 = {} GB)",
                cost.c(1),
                cost.mem(1)
            ),
        });
    }
    Ok(cap)
}

// ── Exponential allocation ──────────────────────────────────────────

/// Geometric exit proportions q_i = z*q^i for i <= n, solved so the
/// expected per-step cost meets the average budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitAllocation {
    pub q: f64,
    pub z: f64,
    /// Proportion per exit, full length N with zeros beyond the cap.
    pub proportions: Vec<f64>,
    pub n_cap: usize,
}

/// Expected per-step cost of the geometric allocation with ratio q over
/// exits 1..=n.
pub fn expected_cost(cost: &CostModel, q: f64, n: usize) -> f64 {
    debug_assert!(q > 0.0 && q <= 1.0);
    let mut pow = 1.0;
    let mut norm = 0.0;
    let mut acc = 0.0;
    for i in 1..=n {
        pow *= q;
        norm += pow;
        acc += pow * cost.c(i) as f64;
    }
    acc / norm
}

fn proportions_for(cost: &CostModel, q: f64, n: usize) -> (f64, Vec<f64>) {
    let mut pows = Vec::with_capacity(n);
    let mut pow = 1.0;
    let mut norm = 0.0;
    for _ in 0..n {
        pow *= q;
        pows.push(pow);
        norm += pow;
    }
    let z = 1.0 / norm;
    let mut props = vec![0.0; cost.n_exits()];
    for (i, p) in pows.iter().enumerate() {
        props[i] = p * z;
    }
    (z, props)
}

/// Solve for q by bisection so the expected per-step cost equals
/// min(budget, uniform mean). The expected cost is continuous and
/// non-decreasing in q on (0, 1].
pub fn solve_allocation(
    cost: &CostModel,
    per_step_budget: f64,
    n_cap: usize,
) -> Result<ExitAllocation, BudgetError> {
    assert!(n_cap >= 1 && n_cap <= cost.n_exits());
    let c1 = cost.c(1) as f64;
    if per_step_budget < c1 {
        return Err(BudgetError::BudgetBelowMinimum { per_step: per_step_budget, c1 });
    }
    if n_cap == 1 {
        let (z, props) = proportions_for(cost, 1.0, 1);
        return Ok(ExitAllocation { q: 1.0, z, proportions: props, n_cap });
    }
    let uniform_mean = expected_cost(cost, 1.0, n_cap);
    if per_step_budget >= uniform_mean {
        let (z, props) = proportions_for(cost, 1.0, n_cap);
        return Ok(ExitAllocation { q: 1.0, z, proportions: props, n_cap });
    }
    let target = per_step_budget;
    let tol = 1e-9 * cost.c(cost.n_exits()) as f64;
    let mut lo = 1e-12;
    let mut hi = 1.0;
    let mut q = 0.5 * (lo + hi);
    for _ in 0..200 {
        q = 0.5 * (lo + hi);
        let g = expected_cost(cost, q, n_cap);
        if (g - target).abs() <= tol {
            break;
        }
        if g > target {
            hi = q;
        } else {
            lo = q;
        }
    }
    let (z, props) = proportions_for(cost, q, n_cap);
    Ok(ExitAllocation { q, z, proportions: props, n_cap })
}

// ── Threshold fitting ───────────────────────────────────────────────

pub const MIN_CALIBRATION_SAMPLES: usize = 100;

/// Fit per-exit thresholds so approximately q_i of the S calibration
/// samples exit at exit i under the strict-< rule. Sequential: exit i's
/// threshold is the midpoint of the order statistics around k_i =
/// round(q_i * S) among still-active samples, which are then removed.
pub fn fit_thresholds(
    allocation: &ExitAllocation,
    deltas: &[Vec<f64>],
) -> Result<ThresholdVector, BudgetError> {
    if deltas.len() < MIN_CALIBRATION_SAMPLES {
        return Err(BudgetError::TooFewSamples {
            got: deltas.len(),
            need: MIN_CALIBRATION_SAMPLES,
        });
    }
    Ok(fit_thresholds_unchecked(allocation, deltas))
}

/// The fitting rule itself, without the minimum-sample-count gate.
pub fn fit_thresholds_unchecked(
    allocation: &ExitAllocation,
    deltas: &[Vec<f64>],
) -> ThresholdVector {
    let s_total = deltas.len();
    let n = allocation.n_cap;
    let n_exits = allocation.proportions.len();
    let mut eta = vec![0.0; n_exits];
    let mut active: Vec<usize> = (0..s_total).collect();
    for exit in 1..n {
        let k = (allocation.proportions[exit - 1] * s_total as f64).round() as usize;
        if k == 0 {
            eta[exit - 1] = 0.0;
            continue;
        }
        if k >= active.len() {
            eta[exit - 1] = f64::INFINITY;
            active.clear();
            continue;
        }
        let mut vals: Vec<f64> = active.iter().map(|&s| deltas[s][exit - 1]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let threshold = 0.5 * (vals[k - 1] + vals[k]);
        eta[exit - 1] = threshold;
        active.retain(|&s| deltas[s][exit - 1] >= threshold);
    }
    for e in eta.iter_mut().skip(n - 1) {
        *e = f64::INFINITY;
    }
    ThresholdVector::new(eta, n)
}

/// Replay a delta table through the strict-< exit rule; returns how many
/// samples exit at each exit index (1-based at index i-1).
pub fn replay_exit_counts(deltas: &[Vec<f64>], tv: &ThresholdVector) -> Vec<usize> {
    let n = tv.n_cap;
    let mut counts = vec![0usize; tv.eta.len()];
    for row in deltas {
        let mut chosen = n;
        for exit in 1..=n {
            if exit == n || row[exit - 1] < tv.at(exit) {
                chosen = exit;
                break;
            }
        }
        counts[chosen - 1] += 1;
    }
    counts
}

/// Quantile fit for the feature-similarity criterion (exit when cosine
/// similarity exceeds the threshold): upper-tail analogue of
/// [`fit_thresholds`]. Sentinels 2.0 / -2.0 disable or force exits.
pub fn fit_similarity_thresholds(
    allocation: &ExitAllocation,
    sims: &[Vec<f64>],
) -> Result<Vec<f64>, BudgetError> {
    let s_total = sims.len();
    if s_total < MIN_CALIBRATION_SAMPLES {
        return Err(BudgetError::TooFewSamples { got: s_total, need: MIN_CALIBRATION_SAMPLES });
    }
    let n = allocation.n_cap;
    let mut thresholds = vec![2.0; allocation.proportions.len()];
    let mut active: Vec<usize> = (0..s_total).collect();
    for exit in 1..n {
        let k = (allocation.proportions[exit - 1] * s_total as f64).round() as usize;
        if k == 0 {
            thresholds[exit - 1] = 2.0; // nothing exceeds cosine 2
            continue;
        }
        if k >= active.len() {
            thresholds[exit - 1] = -2.0;
            active.clear();
            continue;
        }
        let mut vals: Vec<f64> = active.iter().map(|&s| sims[s][exit - 1]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cut = 0.5 * (vals[active.len() - k - 1] + vals[active.len() - k]);
        thresholds[exit - 1] = cut;
        active.retain(|&s| sims[s][exit - 1] <= cut);
    }
    Ok(thresholds)
}

/// Time schedule spending approximately q_i of a mean-length episode at
/// exit i, in ascending exit order (non-decreasing over time).
pub fn fit_time_schedule(allocation: &ExitAllocation, mean_len: f64, t_max: usize) -> Vec<usize> {
    let n = allocation.n_cap;
    let mut boundaries = Vec::with_capacity(n);
    let mut acc = 0.0;
    for exit in 1..=n {
        acc += allocation.proportions[exit - 1];
        boundaries.push((acc * mean_len).round() as usize);
    }
    let mut schedule = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut exit = n;
        for (i, b) in boundaries.iter().enumerate() {
            if t < *b {
                exit = i + 1;
                break;
            }
        }
        schedule.push(exit);
    }
    schedule
}

// ── Calibration data collection ─────────────────────────────────────

/// Per-sample exit statistics gathered by replaying demonstrations with
/// every exit computed (no early exit; the recurrent stream advances
/// with the deepest prediction).
pub struct CalibrationData {
    /// Consistency deltas per exit (columns 1..=N).
    pub deltas: Vec<Vec<f64>>,
    /// Cosine similarities of adjacent pooled features per exit.
    pub sims: Vec<Vec<f64>>,
}

pub fn collect_calibration_data<S: num_traits::Float>(
    model: &InferModel<S>,
    episodes: &[&Episode],
    max_samples: usize,
) -> CalibrationData {
    let n = model.cfg.n_exits;
    let mut deltas = Vec::new();
    let mut sims = Vec::new();
    'outer: for ep in episodes {
        let mut state: HeadState<S> = HeadState::zeros(&model.cfg);
        for step in &ep.steps {
            let mut cache = model.encode(&ep.instruction.tokens, &step.obs);
            model.forward_to_exit(&mut cache, n);
            let (mut prev, _, _) = model.head_forward(cache.pooled(0), &state);
            let mut drow = Vec::with_capacity(n);
            let mut srow = Vec::with_capacity(n);
            let mut deepest = None;
            for exit in 1..=n {
                let (pred, cand, _) = model.head_forward(cache.pooled(exit), &state);
                drow.push(pred.l2_delta(&prev));
                srow.push(cosine_f64(
                    &cache.pooled_f64(exit - 1),
                    &cache.pooled_f64(exit),
                ));
                prev = pred;
                if exit == n {
                    deepest = Some(cand);
                }
            }
            state = deepest.expect("n >= 1");
            deltas.push(drow);
            sims.push(srow);
            if deltas.len() >= max_samples {
                break 'outer;
            }
        }
    }
    CalibrationData { deltas, sims }
}

fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Replay recorded episodes through an exit criterion (early exit
/// active), measuring realized compute and exit fractions without
/// touching an environment.
pub struct ReplayStats {
    pub samples: usize,
    pub mean_backbone_flops: f64,
    pub mean_head_flops: f64,
    pub exit_counts: Vec<usize>,
}

pub fn replay_episodes<S: num_traits::Float>(
    model: &InferModel<S>,
    episodes: &[&Episode],
    criterion: &Criterion,
) -> ReplayStats {
    let mut samples = 0usize;
    let mut backbone = 0u128;
    let mut head = 0u128;
    let mut exit_counts = vec![0usize; model.cfg.n_exits];
    for ep in episodes {
        let mut state: HeadState<S> = HeadState::zeros(&model.cfg);
        for (t, step) in ep.steps.iter().enumerate() {
            let mut cache = model.encode(&ep.instruction.tokens, &step.obs);
            let d = crate::policy::decide(model, &mut cache, &state, criterion, t);
            state = d.state;
            samples += 1;
            backbone += d.flops_backbone as u128;
            head += d.flops_head as u128;
            exit_counts[d.exit - 1] += 1;
        }
    }
    ReplayStats {
        samples,
        mean_backbone_flops: backbone as f64 / samples.max(1) as f64,
        mean_head_flops: head as f64 / samples.max(1) as f64,
        exit_counts,
    }
}

// ── Constraint verification ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub total_backbone_flops: f64,
    pub mean_backbone_flops: f64,
    pub peak_backbone_flops: u64,
    pub peak_step_flops: u64,
    /// Modeled resident memory: weights up to the loaded cap.
    pub mem_gb: f64,
    pub avg_ok: bool,
    pub peak_ok: bool,
    pub mem_ok: bool,
}

impl ConstraintReport {
    pub fn all_ok(&self) -> bool {
        self.avg_ok && self.peak_ok && self.mem_ok
    }
}

/// Check measured chain metrics against the budget. The average
/// constraint compares per-step backbone FLOPs against the per-step
/// budget; the peak constraint uses the worst single step; memory is the
/// load-time model for the cap (independent of exits actually taken).
pub fn verify_constraints(
    metrics: &crate::env::ChainMetrics,
    budget: &BudgetSpec,
    cost: &CostModel,
    n_cap: usize,
) -> ConstraintReport {
    let mem = cost.mem(n_cap);
    let mean = metrics.mean_backbone_flops;
    ConstraintReport {
        total_backbone_flops: mean * metrics.total_steps as f64,
        mean_backbone_flops: mean,
        peak_backbone_flops: metrics.peak_backbone_flops,
        peak_step_flops: metrics.peak_step_flops,
        mem_gb: mem,
        avg_ok: mean <= budget.per_step_budget(),
        peak_ok: (metrics.peak_backbone_flops as f64) <= budget.peak_flops,
        mem_ok: mem <= budget.mem_gb,
    }
}

// ── Threshold file I/O ──────────────────────────────────────────────

/// Serialize a criterion plus its cost-model hash. Infinite thresholds
/// are written as the string "inf" (JSON has no infinity literal).
pub fn criterion_to_json(criterion: &Criterion, cost_hash: &str) -> String {
    use serde_json::{json, Value};
    let num = |v: f64| -> Value {
        if v.is_finite() {
            json!(v)
        } else if v > 0.0 {
            json!("inf")
        } else {
            json!("-inf")
        }
    };
    let value = match criterion {
        Criterion::ActionConsistency(tv) => json!({
            "criterion": "action",
            "eta": tv.eta.iter().map(|v| num(*v)).collect::<Vec<_>>(),
            "n_cap": tv.n_cap,
            "cost_model_hash": cost_hash,
        }),
        Criterion::FeatureSimilarity { thresholds, n_cap } => json!({
            "criterion": "feature",
            "eta": thresholds.iter().map(|v| num(*v)).collect::<Vec<_>>(),
            "n_cap": n_cap,
            "cost_model_hash": cost_hash,
        }),
        Criterion::TimeProgressive { schedule, n_cap } => json!({
            "criterion": "time",
            "schedule": schedule,
            "n_cap": n_cap,
            "cost_model_hash": cost_hash,
        }),
    };
    serde_json::to_string_pretty(&value).expect("criterion serialization")
}

pub fn criterion_from_json(text: &str) -> Result<(Criterion, String), String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let kind = v["criterion"].as_str().ok_or("missing criterion kind")?;
    let n_cap = v["n_cap"].as_u64().ok_or("missing n_cap")? as usize;
    let hash = v["cost_model_hash"].as_str().unwrap_or("").to_string();
    let parse_num = |x: &serde_json::Value| -> Result<f64, String> {
        if let Some(f) = x.as_f64() {
            Ok(f)
        } else {
            match x.as_str() {
                Some("inf") => Ok(f64::INFINITY),
                Some("-inf") => Ok(f64::NEG_INFINITY),
                _ => Err(format!("bad threshold value {x}")),
            }
        }
    };
    let criterion = match kind {
        "action" => {
            let eta = v["eta"]
                .as_array()
                .ok_or("missing eta")?
                .iter()
                .map(parse_num)
                .collect::<Result<Vec<_>, _>>()?;
            Criterion::ActionConsistency(ThresholdVector::new(eta, n_cap))
        }
        "feature" => {
            let thresholds = v["eta"]
                .as_array()
                .ok_or("missing eta")?
                .iter()
                .map(parse_num)
                .collect::<Result<Vec<_>, _>>()?;
            Criterion::FeatureSimilarity { thresholds, n_cap }
        }
        "time" => {
            let schedule = v["schedule"]
                .as_array()
                .ok_or("missing schedule")?
                .iter()
                .map(|x| x.as_u64().map(|u| u as usize).ok_or("bad schedule entry".to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            Criterion::TimeProgressive { schedule, n_cap }
        }
        other => return Err(format!("unknown criterion kind {other}")),
    };
    Ok((criterion, hash))
}

/// Calibration-delta dump: CSV `sample_id,exit,delta`.
pub fn deltas_to_csv(deltas: &[Vec<f64>]) -> String {
    let mut out = String::from("sample_id,exit,delta\n");
    for (sid, row) in deltas.iter().enumerate() {
        for (e, d) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", sid, e + 1, d));
        }
    }
    out
}

pub fn deltas_from_csv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(format!("line {}: expected 3 fields", ln + 1));
        }
        let sid: usize = parts[0].parse().map_err(|_| format!("line {}: bad sample id", ln + 1))?;
        let exit: usize = parts[1].parse().map_err(|_| format!("line {}: bad exit", ln + 1))?;
        let delta: f64 = parts[2].parse().map_err(|_| format!("line {}: bad delta", ln + 1))?;
        while rows.len() <= sid {
            rows.push(Vec::new());
        }
        while rows[sid].len() < exit {
            rows[sid].push(f64::NAN);
        }
        rows[sid][exit - 1] = delta;
    }
    Ok(rows)
}
