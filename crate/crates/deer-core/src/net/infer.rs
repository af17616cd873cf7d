//! Incremental inference path. Mirrors the graph forward op for op so the
//! two paths agree numerically at f64; generic over the float width so
//! evaluation can run at f32.
//!
//! FLOPs are accounted analytically (matmul terms only, 2*m*k*n per
//! product) and returned by the routines that do the work, so a step's
//! reported compute always equals the cost model's prediction for it.

use super::{ActionPrediction, NetConfig, NetParams};
use crate::tensor::Tensor;
use num_traits::Float;

/// Dense row-major matrix over the inference scalar.
#[derive(Debug, Clone)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Float> Mat<S> {
    fn from_tensor(t: &Tensor) -> Mat<S> {
        let (rows, cols) = match t.shape().len() {
            1 => (1, t.shape()[0]),
            2 => (t.shape()[0], t.shape()[1]),
            _ => panic!("rank > 2"),
        };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|v| S::from(*v).unwrap()).collect(),
        }
    }

    fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn vec_from_tensor<S: Float>(t: &Tensor) -> Vec<S> {
    t.data().iter().map(|v| S::from(*v).unwrap()).collect()
}

/// c = a . b with the same i-k-j loop order as the training path.
fn mm<S: Float>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.cols, b.rows, "matmul {}x{} . {}x{}", a.rows, a.cols, b.rows, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap != S::zero() {
                let brow = &b.data[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + ap * brow[j];
                }
            }
        }
    }
    Mat { rows: m, cols: n, data: out }
}

fn add_bias<S: Float>(x: &mut Mat<S>, b: &[S]) {
    for r in 0..x.rows {
        for c in 0..x.cols {
            x.data[r * x.cols + c] = x.data[r * x.cols + c] + b[c];
        }
    }
}

fn layer_norm<S: Float>(x: &Mat<S>, g: &[S], b: &[S], eps: S) -> Mat<S> {
    let mut out = vec![S::zero(); x.data.len()];
    let cols_s = S::from(x.cols).unwrap();
    for r in 0..x.rows {
        let row = x.row(r);
        let mut mean = S::zero();
        for v in row {
            mean = mean + *v;
        }
        mean = mean / cols_s;
        let mut var = S::zero();
        for v in row {
            var = var + (*v - mean) * (*v - mean);
        }
        var = var / cols_s;
        let inv = S::one() / (var + eps).sqrt();
        for c in 0..x.cols {
            out[r * x.cols + c] = (row[c] - mean) * inv * g[c] + b[c];
        }
    }
    Mat { rows: x.rows, cols: x.cols, data: out }
}

fn softmax_rows<S: Float>(x: &mut Mat<S>) {
    for r in 0..x.rows {
        let row = &mut x.data[r * x.cols..(r + 1) * x.cols];
        let mut max = row[0];
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

fn max_pool_rows<S: Float>(x: &Mat<S>) -> Vec<S> {
    let mut out = x.row(0).to_vec();
    for r in 1..x.rows {
        for c in 0..x.cols {
            let v = x.data[r * x.cols + c];
            if v > out[c] {
                out[c] = v;
            }
        }
    }
    out
}

fn sigmoid<S: Float>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ── Analytic matmul FLOPs ───────────────────────────────────────────

/// Matmul FLOPs of one backbone block: QKV and output projections,
/// attention score and apply products, and the two MLP layers.
pub fn block_matmul_flops(n_tokens: usize, d_model: usize, mlp_hidden: usize) -> u64 {
    let t = n_tokens as u64;
    let d = d_model as u64;
    let m = mlp_hidden as u64;
    8 * t * d * d + 4 * t * t * d + 4 * t * d * m
}

/// Matmul FLOPs of one exit group.
pub fn group_matmul_flops(cfg: &NetConfig) -> u64 {
    cfg.blocks_per_exit as u64
        * block_matmul_flops(cfg.n_tokens(), cfg.d_model, cfg.block_mlp_hidden)
}

/// Matmul FLOPs of one action-head evaluation (LSTM stack + both MLPs).
pub fn head_matmul_flops(cfg: &NetConfig) -> u64 {
    let h = cfg.head.lstm_hidden as u64;
    let mh = cfg.head.mlp_hidden as u64;
    let mut f = 0u64;
    for l in 0..cfg.head.lstm_layers {
        let d_in = if l == 0 { cfg.d_model as u64 } else { h };
        f += 2 * d_in * 4 * h + 2 * h * 4 * h;
    }
    f += 2 * h * mh + 2 * mh * 6; // pose MLP
    f += 2 * h * mh + 2 * mh; // gripper MLP
    f
}

/// Matmul FLOPs of the observation projection in the encoder.
pub fn encode_matmul_flops(cfg: &NetConfig) -> u64 {
    2 * cfg.l_obs as u64 * cfg.d_raw as u64 * cfg.d_model as u64
}

// ── Weights ─────────────────────────────────────────────────────────

struct BlockW<S> {
    ln1_g: Vec<S>,
    ln1_b: Vec<S>,
    wq: Mat<S>,
    wk: Mat<S>,
    wv: Mat<S>,
    wo: Mat<S>,
    ln2_g: Vec<S>,
    ln2_b: Vec<S>,
    w1: Mat<S>,
    b1: Vec<S>,
    w2: Mat<S>,
    b2: Vec<S>,
}

struct LstmW<S> {
    w_ih: Mat<S>,
    w_hh: Mat<S>,
    b: Vec<S>,
}

struct MlpW<S> {
    w1: Mat<S>,
    b1: Vec<S>,
    ln_g: Vec<S>,
    ln_b: Vec<S>,
    w2: Mat<S>,
    b2: Vec<S>,
}

struct HeadW<S> {
    in_ln_g: Vec<S>,
    in_ln_b: Vec<S>,
    lstm: Vec<LstmW<S>>,
    pose: MlpW<S>,
    grip: MlpW<S>,
}

/// Read-only inference weights. Deliberately excludes the auxiliary
/// heads: the evaluation path cannot call them.
pub struct InferModel<S> {
    pub cfg: NetConfig,
    embed: Mat<S>,
    obs_w: Mat<S>,
    obs_b: Vec<S>,
    blocks: Vec<BlockW<S>>,
    head: HeadW<S>,
    eps: S,
}

/// Per-LSTM-layer (h, c). Zero at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState<S> {
    pub layers: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Float> HeadState<S> {
    pub fn zeros(cfg: &NetConfig) -> HeadState<S> {
        let h = cfg.head.lstm_hidden;
        HeadState {
            layers: (0..cfg.head.lstm_layers)
                .map(|_| (vec![S::zero(); h], vec![S::zero(); h]))
                .collect(),
        }
    }
}

/// Per-timestep cache of computed exits: token states and pooled
/// features, indexed 0..=computed_up_to where index 0 holds the encoded
/// input.
pub struct ExitCache<S> {
    token_states: Vec<Mat<S>>,
    pooled: Vec<Vec<S>>,
}

impl<S: Float> ExitCache<S> {
    pub fn computed_up_to(&self) -> usize {
        self.token_states.len() - 1
    }

    pub fn pooled(&self, exit: usize) -> &[S] {
        &self.pooled[exit]
    }

    pub fn pooled_f64(&self, exit: usize) -> Vec<f64> {
        self.pooled[exit].iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn token_state(&self, exit: usize) -> &Mat<S> {
        &self.token_states[exit]
    }
}

impl<S: Float> InferModel<S> {
    pub fn from_net(net: &NetParams) -> InferModel<S> {
        let p = &net.params;
        let blocks = net
            .ids
            .blocks
            .iter()
            .map(|b| BlockW {
                ln1_g: vec_from_tensor(p.get(b.ln1_g)),
                ln1_b: vec_from_tensor(p.get(b.ln1_b)),
                wq: Mat::from_tensor(p.get(b.wq)),
                wk: Mat::from_tensor(p.get(b.wk)),
                wv: Mat::from_tensor(p.get(b.wv)),
                wo: Mat::from_tensor(p.get(b.wo)),
                ln2_g: vec_from_tensor(p.get(b.ln2_g)),
                ln2_b: vec_from_tensor(p.get(b.ln2_b)),
                w1: Mat::from_tensor(p.get(b.w1)),
                b1: vec_from_tensor(p.get(b.b1)),
                w2: Mat::from_tensor(p.get(b.w2)),
                b2: vec_from_tensor(p.get(b.b2)),
            })
            .collect();
        let mlp = |ids: &super::MlpIds| MlpW {
            w1: Mat::from_tensor(p.get(ids.w1)),
            b1: vec_from_tensor(p.get(ids.b1)),
            ln_g: vec_from_tensor(p.get(ids.ln_g)),
            ln_b: vec_from_tensor(p.get(ids.ln_b)),
            w2: Mat::from_tensor(p.get(ids.w2)),
            b2: vec_from_tensor(p.get(ids.b2)),
        };
        let head = HeadW {
            in_ln_g: vec_from_tensor(p.get(net.ids.head.in_ln_g)),
            in_ln_b: vec_from_tensor(p.get(net.ids.head.in_ln_b)),
            lstm: net
                .ids
                .head
                .lstm
                .iter()
                .map(|l| LstmW {
                    w_ih: Mat::from_tensor(p.get(l.w_ih)),
                    w_hh: Mat::from_tensor(p.get(l.w_hh)),
                    b: vec_from_tensor(p.get(l.bias)),
                })
                .collect(),
            pose: mlp(&net.ids.head.pose),
            grip: mlp(&net.ids.head.grip),
        };
        InferModel {
            cfg: net.cfg.clone(),
            embed: Mat::from_tensor(p.get(net.ids.embed)),
            obs_w: Mat::from_tensor(p.get(net.ids.obs_w)),
            obs_b: vec_from_tensor(p.get(net.ids.obs_b)),
            blocks,
            head,
            eps: S::from(net.cfg.layer_norm_eps).unwrap(),
        }
    }

    /// Embed the instruction, project the observation tokens, and start a
    /// cache holding the pre-backbone state.
    pub fn encode(&self, instr_tokens: &[u32], obs: &[Vec<f64>]) -> ExitCache<S> {
        let cfg = &self.cfg;
        assert_eq!(instr_tokens.len(), cfg.l_inst);
        assert_eq!(obs.len(), cfg.l_obs);
        let d = cfg.d_model;
        let mut data = Vec::with_capacity(cfg.n_tokens() * d);
        for tok in instr_tokens {
            let id = *tok as usize;
            assert!(id < cfg.vocab_size, "token {id} out of vocabulary");
            data.extend_from_slice(self.embed.row(id));
        }
        let mut raw = Vec::with_capacity(cfg.l_obs * cfg.d_raw);
        for row in obs {
            for v in row {
                raw.push(S::from(*v).unwrap());
            }
        }
        let raw = Mat { rows: cfg.l_obs, cols: cfg.d_raw, data: raw };
        let mut proj = mm(&raw, &self.obs_w);
        add_bias(&mut proj, &self.obs_b);
        data.extend_from_slice(&proj.data);
        let x0 = Mat { rows: cfg.n_tokens(), cols: d, data };
        let pooled0 = max_pool_rows(&x0);
        ExitCache { token_states: vec![x0], pooled: vec![pooled0] }
    }

    fn block_forward(&self, w: &BlockW<S>, x: &Mat<S>) -> Mat<S> {
        let d = self.cfg.d_model;
        let ln1 = layer_norm(x, &w.ln1_g, &w.ln1_b, self.eps);
        let q = mm(&ln1, &w.wq);
        let k = mm(&ln1, &w.wk);
        let v = mm(&ln1, &w.wv);
        // scores = q . k^T / sqrt(d)
        let mut scores = Mat {
            rows: x.rows,
            cols: x.rows,
            data: vec![S::zero(); x.rows * x.rows],
        };
        let scale = S::one() / S::from(d).unwrap().sqrt();
        for i in 0..x.rows {
            for j in 0..x.rows {
                let mut s = S::zero();
                for c in 0..d {
                    s = s + q.data[i * d + c] * k.data[j * d + c];
                }
                scores.data[i * x.rows + j] = s * scale;
            }
        }
        softmax_rows(&mut scores);
        let ctx = mm(&scores, &v);
        let proj = mm(&ctx, &w.wo);
        let mut x1 = x.clone();
        for i in 0..x1.data.len() {
            x1.data[i] = x1.data[i] + proj.data[i];
        }
        let ln2 = layer_norm(&x1, &w.ln2_g, &w.ln2_b, self.eps);
        let mut h = mm(&ln2, &w.w1);
        add_bias(&mut h, &w.b1);
        for v in h.data.iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let mut m = mm(&h, &w.w2);
        add_bias(&mut m, &w.b2);
        for i in 0..x1.data.len() {
            x1.data[i] = x1.data[i] + m.data[i];
        }
        x1
    }

    /// Compute exit groups (computed_up_to, target] into the cache.
    /// Returns the backbone FLOPs actually spent; a target at or below
    /// the computed frontier is a no-op costing zero.
    pub fn forward_to_exit(&self, cache: &mut ExitCache<S>, target_exit: usize) -> u64 {
        assert!(target_exit <= self.cfg.n_exits, "exit {target_exit} out of range");
        let mut flops = 0u64;
        while cache.computed_up_to() < target_exit {
            let exit = cache.computed_up_to(); // completed so far
            let mut x = cache.token_states[exit].clone();
            for b in 0..self.cfg.blocks_per_exit {
                x = self.block_forward(&self.blocks[exit * self.cfg.blocks_per_exit + b], &x);
            }
            flops += group_matmul_flops(&self.cfg);
            cache.pooled.push(max_pool_rows(&x));
            cache.token_states.push(x);
        }
        flops
    }

    fn mlp_forward(&self, w: &MlpW<S>, x: &[S]) -> Vec<S> {
        let xm = Mat { rows: 1, cols: x.len(), data: x.to_vec() };
        let mut z = mm(&xm, &w.w1);
        add_bias(&mut z, &w.b1);
        let zn = layer_norm(&z, &w.ln_g, &w.ln_b, self.eps);
        let mut a = zn;
        for v in a.data.iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let mut o = mm(&a, &w.w2);
        add_bias(&mut o, &w.b2);
        o.data
    }

    /// Pure head probe: evaluates the LSTM stack and both MLPs on a
    /// pooled feature. The input state is untouched; the candidate next
    /// state is returned alongside the prediction, and the reported cost
    /// is one head evaluation.
    pub fn head_forward(
        &self,
        pooled: &[S],
        state: &HeadState<S>,
    ) -> (ActionPrediction, HeadState<S>, u64) {
        let hidden = self.cfg.head.lstm_hidden;
        let xin = Mat { rows: 1, cols: pooled.len(), data: pooled.to_vec() };
        let mut x = layer_norm(&xin, &self.head.in_ln_g, &self.head.in_ln_b, self.eps).data;
        let mut next = Vec::with_capacity(self.head.lstm.len());
        for (l, w) in self.head.lstm.iter().enumerate() {
            let (h_prev, c_prev) = &state.layers[l];
            let xm = Mat { rows: 1, cols: x.len(), data: x };
            let hm = Mat { rows: 1, cols: hidden, data: h_prev.clone() };
            let mut gates = mm(&xm, &w.w_ih);
            let hg = mm(&hm, &w.w_hh);
            for i in 0..gates.data.len() {
                gates.data[i] = gates.data[i] + hg.data[i] + w.b[i];
            }
            let mut h = vec![S::zero(); hidden];
            let mut c = vec![S::zero(); hidden];
            for j in 0..hidden {
                let i_g = sigmoid(gates.data[j]);
                let f_g = sigmoid(gates.data[hidden + j]);
                let g_g = gates.data[2 * hidden + j].tanh();
                let o_g = sigmoid(gates.data[3 * hidden + j]);
                c[j] = f_g * c_prev[j] + i_g * g_g;
                h[j] = o_g * c[j].tanh();
            }
            x = h.clone();
            next.push((h, c));
        }
        let pose = self.mlp_forward(&self.head.pose, &x);
        let grip = self.mlp_forward(&self.head.grip, &x);
        let logit = grip[0].to_f64().unwrap();
        let mut pose6 = [0.0; 6];
        for (i, v) in pose.iter().enumerate() {
            pose6[i] = v.to_f64().unwrap();
        }
        let pred = ActionPrediction {
            pose: pose6,
            gripper_logit: logit,
            gripper_prob: crate::tensor::stable_sigmoid(logit),
        };
        (pred, HeadState { layers: next }, head_matmul_flops(&self.cfg))
    }
}
