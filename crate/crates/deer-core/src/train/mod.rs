//! Exit-sampling imitation learning.
//!
//! Each training window runs two exit-index schedules through the shared
//! backbone forward: s1 draws a fresh uniform exit every step, s2 splits
//! the window into two segments with one uniform exit each. Every exit's
//! pooled feature also feeds its auxiliary head (own recurrent stream)
//! when auxiliary losses are enabled. Training is two-phase: a joint
//! phase, then a post-training phase that freezes everything except the
//! main action head.

use crate::env::{Action7, Episode};
use crate::net::infer::InferModel;
use crate::net::{graph_fwd, ActionPrediction, HeadState, NetParams, ParamGroup};
use crate::rng::Rng;
use crate::tensor::{
    adam_step, AdamConfig, AdamState, Gradients, Graph, NodeId, Tensor, TensorError,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Window size H.
    pub window: usize,
    /// Gripper cross-entropy weight.
    pub lambda: f64,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub epochs_joint: usize,
    pub epochs_posttrain: usize,
    pub aux_enabled: bool,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Linear warmup steps for both learning rates (0 = constant).
    pub warmup_steps: usize,
    /// Fraction of episodes held out for per-exit validation.
    pub val_fraction: f64,
    /// Windows drawn per epoch; defaults to the training episode count.
    pub windows_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 12,
            lambda: 0.01,
            batch_size: 8,
            lr_backbone: 1e-4,
            lr_head: 2.5e-5,
            epochs_joint: 2,
            epochs_posttrain: 1,
            aux_enabled: true,
            seed: 0,
            grad_clip: 1.0,
            warmup_steps: 0,
            val_fraction: 0.1,
            windows_per_epoch: None,
        }
    }
}

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    NonFinite { epoch: usize, step: usize, term: String },
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "dataset is empty"),
            TrainError::NonFinite { epoch, step, term } => {
                write!(f, "non-finite loss at epoch {epoch} step {step} in {term}")
            }
            TrainError::Tensor(e) => write!(f, "tensor error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

// ── Exit sampling ───────────────────────────────────────────────────

/// Strategy s1: an independent uniform exit in 1..=n at every step.
pub fn sample_s1(window: usize, n_exits: usize, rng: &mut Rng) -> Vec<usize> {
    (0..window).map(|_| 1 + rng.usize_below(n_exits)).collect()
}

/// Strategy s2: split the window at i ~ U{0..H-1}; steps 0..=i share one
/// uniform exit, steps i+1.. share another. i = H-1 degenerates to a
/// single segment.
pub fn sample_s2(window: usize, n_exits: usize, rng: &mut Rng) -> Vec<usize> {
    let (split, first, second) = sample_s2_parts(window, n_exits, rng);
    (0..window)
        .map(|i| if i <= split { first } else { second })
        .collect()
}

/// The raw (split index, first exit, second exit) draw behind
/// [`sample_s2`].
pub fn sample_s2_parts(window: usize, n_exits: usize, rng: &mut Rng) -> (usize, usize, usize) {
    assert!(window >= 1);
    let split = rng.usize_below(window);
    let first = 1 + rng.usize_below(n_exits);
    let second = 1 + rng.usize_below(n_exits);
    (split, first, second)
}

// ── Losses ──────────────────────────────────────────────────────────

/// Scalar single-action loss: mean squared error over the six pose dims
/// plus lambda times the gripper binary cross-entropy (on the logit).
pub fn single_action_loss(pred: &ActionPrediction, target: &Action7, lambda: f64) -> f64 {
    let mse = pred
        .pose
        .iter()
        .zip(target.pose.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / 6.0;
    let y = if target.gripper { 1.0 } else { 0.0 };
    let z = pred.gripper_logit;
    let bce = z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
    mse + lambda * bce
}

/// Graph node computing the single-action loss from pose/logit nodes.
fn action_loss_graph(
    g: &mut Graph,
    pose: NodeId,
    grip_logit: NodeId,
    target: &Action7,
    lambda: f64,
) -> Result<NodeId, TensorError> {
    let tgt = g.constant(Tensor::new(vec![1, 6], target.pose.to_vec()));
    let diff = g.sub(pose, tgt)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq)?;
    let y = if target.gripper { 1.0 } else { 0.0 };
    let bce = g.bce_with_logits(grip_logit, y)?;
    let wbce = g.scale(bce, lambda)?;
    g.add(mse, wbce)
}

// ── Windows ─────────────────────────────────────────────────────────

/// One H-step training clip. Episodes shorter than H are front-padded by
/// repeating the first frame; padded steps advance the recurrent streams
/// but are masked out of the loss.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub tokens: Vec<u32>,
    pub obs: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Action7>,
    pub mask: Vec<bool>,
}

pub fn sample_window(episodes: &[Episode], window: usize, rng: &mut Rng) -> WindowSample {
    let ep = &episodes[rng.usize_below(episodes.len())];
    window_from_episode(ep, window, rng)
}

pub fn window_from_episode(ep: &Episode, window: usize, rng: &mut Rng) -> WindowSample {
    let len = ep.steps.len();
    let mut obs = Vec::with_capacity(window);
    let mut targets = Vec::with_capacity(window);
    let mut mask = Vec::with_capacity(window);
    if len >= window {
        let start = rng.usize_below(len - window + 1);
        for step in &ep.steps[start..start + window] {
            obs.push(step.obs.clone());
            targets.push(step.action);
            mask.push(true);
        }
    } else {
        for _ in 0..window - len {
            obs.push(ep.steps[0].obs.clone());
            targets.push(Action7::zero());
            mask.push(false);
        }
        for step in &ep.steps {
            obs.push(step.obs.clone());
            targets.push(step.action);
            mask.push(true);
        }
    }
    WindowSample { tokens: ep.instruction.tokens.clone(), obs, targets, mask }
}

/// Loss nodes plus instrumentation counters for one window.
pub struct WindowLoss {
    pub seq_loss: NodeId,
    pub aux_loss: Option<NodeId>,
    pub seq_terms: usize,
    pub aux_terms: usize,
}

/// Build the sequence loss (both strategies) and, when enabled, the
/// auxiliary loss for one window inside `g`. The backbone runs once per
/// timestep, to the highest exit any consumer needs at that step.
pub fn window_loss_graph(
    g: &mut Graph,
    net: &NetParams,
    sample: &WindowSample,
    exits_s1: &[usize],
    exits_s2: &[usize],
    lambda: f64,
    aux_enabled: bool,
    mut dropout: Option<&mut graph_fwd::DropoutCtx>,
) -> Result<WindowLoss, TensorError> {
    let window = sample.obs.len();
    assert_eq!(exits_s1.len(), window);
    assert_eq!(exits_s2.len(), window);
    let n_exits = net.cfg.n_exits;
    let use_aux = aux_enabled && !net.ids.aux.is_empty();

    let mut st1 = graph_fwd::zero_head_state(g, net);
    let mut st2 = graph_fwd::zero_head_state(g, net);
    let mut aux_states: Vec<graph_fwd::HeadStateNodes> =
        (0..if use_aux { n_exits } else { 0 })
            .map(|_| graph_fwd::zero_head_state(g, net))
            .collect();

    let mut seq_terms = 0;
    let mut aux_terms = 0;
    let mut seq_acc: Option<NodeId> = None;
    let mut aux_acc: Option<NodeId> = None;
    let head_ids = net.ids.head.clone();
    let aux_ids = net.ids.aux.clone();

    for i in 0..window {
        let (e1, e2) = (exits_s1[i], exits_s2[i]);
        assert!(e1 >= 1 && e1 <= n_exits, "s1 exit {e1} out of range");
        assert!(e2 >= 1 && e2 <= n_exits, "s2 exit {e2} out of range");
        let need = if use_aux { n_exits } else { e1.max(e2) };
        let x0 = graph_fwd::encode(g, net, &sample.tokens, &sample.obs[i])?;
        let pooled = graph_fwd::backbone_pooled(g, net, x0, need)?;

        let (pose1, grip1, next1) =
            graph_fwd::head_forward(g, net, &head_ids, pooled[e1], &st1, dropout.as_deref_mut())?;
        st1 = next1;
        let (pose2, grip2, next2) =
            graph_fwd::head_forward(g, net, &head_ids, pooled[e2], &st2, dropout.as_deref_mut())?;
        st2 = next2;
        if sample.mask[i] {
            let l1 = action_loss_graph(g, pose1, grip1, &sample.targets[i], lambda)?;
            let l2 = action_loss_graph(g, pose2, grip2, &sample.targets[i], lambda)?;
            seq_terms += 2;
            let pair = g.add(l1, l2)?;
            seq_acc = Some(match seq_acc {
                None => pair,
                Some(acc) => g.add(acc, pair)?,
            });
        }

        if use_aux {
            for j in 0..n_exits {
                let (pose, grip, next) = graph_fwd::head_forward(
                    g,
                    net,
                    &aux_ids[j],
                    pooled[j + 1],
                    &aux_states[j],
                    dropout.as_deref_mut(),
                )?;
                aux_states[j] = next;
                if sample.mask[i] {
                    let l = action_loss_graph(g, pose, grip, &sample.targets[i], lambda)?;
                    aux_terms += 1;
                    aux_acc = Some(match aux_acc {
                        None => l,
                        Some(acc) => g.add(acc, l)?,
                    });
                }
            }
        }
    }

    let seq_loss = match seq_acc {
        Some(n) => n,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(WindowLoss { seq_loss, aux_loss: aux_acc, seq_terms, aux_terms })
}

/// Post-training variant: the backbone and aux heads are frozen, so the
/// pooled features come from the inference path as constants and only the
/// main head builds graph nodes.
fn window_loss_head_only(
    g: &mut Graph,
    net: &NetParams,
    frozen: &InferModel<f64>,
    sample: &WindowSample,
    exits_s1: &[usize],
    exits_s2: &[usize],
    lambda: f64,
    mut dropout: Option<&mut graph_fwd::DropoutCtx>,
) -> Result<WindowLoss, TensorError> {
    let window = sample.obs.len();
    let mut st1 = graph_fwd::zero_head_state(g, net);
    let mut st2 = graph_fwd::zero_head_state(g, net);
    let mut seq_acc: Option<NodeId> = None;
    let mut seq_terms = 0;
    let head_ids = net.ids.head.clone();

    for i in 0..window {
        let need = exits_s1[i].max(exits_s2[i]);
        let mut cache = frozen.encode(&sample.tokens, &sample.obs[i]);
        frozen.forward_to_exit(&mut cache, need);
        let mut nodes = [NodeId(0); 2];
        for (slot, &e) in [exits_s1[i], exits_s2[i]].iter().enumerate() {
            nodes[slot] = g.constant(Tensor::new(
                vec![1, net.cfg.d_model],
                cache.pooled_f64(e),
            ));
        }
        let (pose1, grip1, next1) =
            graph_fwd::head_forward(g, net, &head_ids, nodes[0], &st1, dropout.as_deref_mut())?;
        st1 = next1;
        let (pose2, grip2, next2) =
            graph_fwd::head_forward(g, net, &head_ids, nodes[1], &st2, dropout.as_deref_mut())?;
        st2 = next2;
        if sample.mask[i] {
            let l1 = action_loss_graph(g, pose1, grip1, &sample.targets[i], lambda)?;
            let l2 = action_loss_graph(g, pose2, grip2, &sample.targets[i], lambda)?;
            seq_terms += 2;
            let pair = g.add(l1, l2)?;
            seq_acc = Some(match seq_acc {
                None => pair,
                Some(acc) => g.add(acc, pair)?,
            });
        }
    }
    let seq_loss = match seq_acc {
        Some(n) => n,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(WindowLoss { seq_loss, aux_loss: None, seq_terms, aux_terms: 0 })
}

// ── Training loop ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub phase: u8,
    pub step: usize,
    pub loss_total: f64,
    pub loss_seq: f64,
    pub loss_aux: f64,
    pub grad_norm: f64,
}

pub fn log_csv_header() -> &'static str {
    "epoch,phase,step,loss_total,loss_seq,loss_aux,grad_norm"
}

pub fn log_csv_row(r: &TrainLogRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.phase, r.step, r.loss_total, r.loss_seq, r.loss_aux, r.grad_norm
    )
}

/// Everything needed to stop and resume training at an epoch boundary.
pub struct TrainState {
    pub net: NetParams,
    pub adam: AdamState,
    pub next_epoch: usize,
    pub log: Vec<TrainLogRow>,
    /// Per completed epoch: mean validation single-action loss per exit.
    pub val_history: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(net: NetParams) -> TrainState {
        let adam = AdamState::new(&net.params);
        TrainState { net, adam, next_epoch: 0, log: Vec::new(), val_history: Vec::new() }
    }
}

/// Deterministic train/validation split by episode index.
pub fn split_train_val(episodes: &[Episode], val_fraction: f64) -> (Vec<&Episode>, Vec<&Episode>) {
    if val_fraction <= 0.0 || episodes.len() < 2 {
        return (episodes.iter().collect(), Vec::new());
    }
    let period = (1.0 / val_fraction).round().max(2.0) as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        if i % period == period - 1 {
            val.push(e);
        } else {
            train.push(e);
        }
    }
    if val.is_empty() {
        val.push(&episodes[episodes.len() - 1]);
    }
    (train, val)
}

fn learning_rates(net: &NetParams, cfg: &TrainConfig, phase: u8, warmup_scale: f64) -> Vec<f64> {
    net.params
        .iter()
        .map(|(name, _)| {
            let group = NetParams::group_of(name);
            let base = match (phase, group) {
                (1, ParamGroup::Encoder) => {
                    if net.cfg.freeze_encoder {
                        0.0
                    } else {
                        cfg.lr_backbone
                    }
                }
                (1, ParamGroup::Backbone) => cfg.lr_backbone,
                (1, ParamGroup::Head) => cfg.lr_head,
                (1, ParamGroup::Aux) => {
                    if cfg.aux_enabled {
                        cfg.lr_head
                    } else {
                        0.0
                    }
                }
                (2, ParamGroup::Head) => cfg.lr_head,
                (2, _) => 0.0,
                _ => unreachable!("phase {phase}"),
            };
            base * warmup_scale
        })
        .collect()
}

/// Mean validation single-action loss of the main head forced to each
/// exit, over whole episodes (one recurrent stream per exit, backbone
/// computed once per step).
pub fn per_exit_validation_loss(net: &NetParams, episodes: &[&Episode], lambda: f64) -> Vec<f64> {
    let n_exits = net.cfg.n_exits;
    let model: InferModel<f64> = InferModel::from_net(net);
    let mut sums = vec![0.0; n_exits];
    let mut count = 0usize;
    for ep in episodes {
        let mut states: Vec<HeadState<f64>> =
            (0..n_exits).map(|_| HeadState::zeros(&net.cfg)).collect();
        for step in &ep.steps {
            let mut cache = model.encode(&ep.instruction.tokens, &step.obs);
            model.forward_to_exit(&mut cache, n_exits);
            for (k, sum) in sums.iter_mut().enumerate() {
                let (pred, next, _) = model.head_forward(cache.pooled(k + 1), &states[k]);
                states[k] = next;
                *sum += single_action_loss(&pred, &step.action, lambda);
            }
            count += 1;
        }
    }
    sums.iter().map(|s| s / count.max(1) as f64).collect()
}

/// Run epochs `state.next_epoch .. until_epoch`. Epoch indices below
/// `cfg.epochs_joint` are phase 1 (joint), the rest phase 2 (head-only
/// post-training). All randomness derives from (seed, epoch, step), so a
/// resumed run reproduces an uninterrupted one bit for bit.
pub fn train_epochs(
    state: &mut TrainState,
    episodes: &[Episode],
    cfg: &TrainConfig,
    until_epoch: usize,
) -> Result<(), TrainError> {
    if episodes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (train_eps, val_eps) = split_train_val(episodes, cfg.val_fraction);
    let train_owned: Vec<Episode> = train_eps.into_iter().cloned().collect();
    let windows_per_epoch = cfg.windows_per_epoch.unwrap_or(train_owned.len()).max(1);
    let steps_per_epoch = windows_per_epoch.div_ceil(cfg.batch_size);
    let adam_cfg = AdamConfig::default();

    while state.next_epoch < until_epoch {
        let epoch = state.next_epoch;
        let phase: u8 = if epoch < cfg.epochs_joint { 1 } else { 2 };
        let frozen: Option<InferModel<f64>> = if phase == 2 {
            Some(InferModel::from_net(&state.net))
        } else {
            None
        };
        for step in 0..steps_per_epoch {
            let mut rng = Rng::stream(cfg.seed, "train/step", &[epoch as u64, step as u64]);
            let mut total_grads = Gradients { by_param: state.net.params.zeros_like() };
            let mut loss_seq_sum = 0.0;
            let mut loss_aux_sum = 0.0;
            for _ in 0..cfg.batch_size {
                let sample = sample_window(&train_owned, cfg.window, &mut rng);
                let e1 = sample_s1(cfg.window, state.net.cfg.n_exits, &mut rng);
                let e2 = sample_s2(cfg.window, state.net.cfg.n_exits, &mut rng);
                let mut g = Graph::new();
                let mut dctx = graph_fwd::DropoutCtx {
                    rng: &mut rng,
                    lstm_p: state.net.cfg.lstm_dropout,
                    mlp_p: state.net.cfg.mlp_dropout,
                };
                let wl = match &frozen {
                    None => window_loss_graph(
                        &mut g,
                        &state.net,
                        &sample,
                        &e1,
                        &e2,
                        cfg.lambda,
                        cfg.aux_enabled,
                        Some(&mut dctx),
                    )?,
                    Some(frozen) => window_loss_head_only(
                        &mut g,
                        &state.net,
                        frozen,
                        &sample,
                        &e1,
                        &e2,
                        cfg.lambda,
                        Some(&mut dctx),
                    )?,
                };
                let seq_v = g.value(wl.seq_loss).item();
                let aux_v = wl.aux_loss.map(|n| g.value(n).item()).unwrap_or(0.0);
                if !seq_v.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        term: "sequence loss".to_string(),
                    });
                }
                if !aux_v.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        term: "auxiliary loss".to_string(),
                    });
                }
                loss_seq_sum += seq_v;
                loss_aux_sum += aux_v;
                let total = match wl.aux_loss {
                    Some(aux) => g.add(wl.seq_loss, aux)?,
                    None => wl.seq_loss,
                };
                let grads = g.backward(total, &state.net.params)?;
                total_grads.accumulate(&grads);
            }
            let grad_norm = total_grads.clip_global_norm(cfg.grad_clip);
            let global_step = epoch * steps_per_epoch + step;
            let warmup_scale = if cfg.warmup_steps > 0 {
                ((global_step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let lrs = learning_rates(&state.net, cfg, phase, warmup_scale);
            adam_step(&mut state.net.params, &total_grads, &mut state.adam, &lrs, &adam_cfg);
            state.log.push(TrainLogRow {
                epoch,
                phase,
                step,
                loss_total: loss_seq_sum + loss_aux_sum,
                loss_seq: loss_seq_sum,
                loss_aux: loss_aux_sum,
                grad_norm,
            });
        }
        if !val_eps.is_empty() {
            state
                .val_history
                .push(per_exit_validation_loss(&state.net, &val_eps, cfg.lambda));
        } else {
            state.val_history.push(Vec::new());
        }
        state.next_epoch += 1;
    }
    Ok(())
}

/// Full run over both phases.
pub fn train(net: NetParams, episodes: &[Episode], cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    let mut state = TrainState::new(net);
    train_epochs(&mut state, episodes, cfg, cfg.epochs_joint + cfg.epochs_posttrain)?;
    Ok(state)
}

// ── Optimizer-state serialization (for resume) ──────────────────────

#[derive(Serialize, Deserialize)]
struct AdamStateFile {
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    next_epoch: usize,
}

pub fn adam_state_to_string(net: &NetParams, adam: &AdamState, next_epoch: usize) -> String {
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (pid, (name, _)) in net.params.iter().enumerate() {
        m.insert(name.to_string(), adam.m[pid].data().to_vec());
        v.insert(name.to_string(), adam.v[pid].data().to_vec());
    }
    serde_json::to_string(&AdamStateFile { t: adam.t, m, v, next_epoch })
        .expect("adam state serialization")
}

pub fn adam_state_from_str(
    net: &NetParams,
    text: &str,
) -> Result<(AdamState, usize), serde_json::Error> {
    let file: AdamStateFile = serde_json::from_str(text)?;
    let mut adam = AdamState::new(&net.params);
    adam.t = file.t;
    for (pid, (name, _)) in net.params.iter().enumerate() {
        if let Some(mv) = file.m.get(name) {
            adam.m[pid].data_mut().copy_from_slice(mv);
        }
        if let Some(vv) = file.v.get(name) {
            adam.v[pid].data_mut().copy_from_slice(vv);
        }
    }
    Ok((adam, file.next_epoch))
}
