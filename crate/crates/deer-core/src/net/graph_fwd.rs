//! Differentiable forward path: builds graph nodes for the encoder,
//! backbone blocks, and recurrent heads. Used by training only; the
//! inference path lives in [`super::infer`].

use super::{HeadIds, NetParams};
use crate::rng::Rng;
use crate::tensor::{lstm_cell, Graph, NodeId, Tensor, TensorResult};

/// Training-time dropout source. Masks draw from the training step's rng
/// stream so runs are reproducible.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut Rng,
    pub lstm_p: f64,
    pub mlp_p: f64,
}

fn dropout_mask(g: &mut Graph, x: NodeId, p: f64, rng: &mut Rng) -> TensorResult<NodeId> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::new(
        shape,
        (0..n).map(|_| if rng.chance(p) { 0.0 } else { keep }).collect(),
    );
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Instruction embedding + observation projection, concatenated into the
/// initial token matrix [n_tokens, d_model].
pub fn encode(
    g: &mut Graph,
    net: &NetParams,
    instr_tokens: &[u32],
    obs: &[Vec<f64>],
) -> TensorResult<NodeId> {
    let cfg = &net.cfg;
    assert_eq!(instr_tokens.len(), cfg.l_inst, "instruction token count");
    assert_eq!(obs.len(), cfg.l_obs, "observation token count");
    let table = g.param(&net.params, net.ids.embed);
    let ids: Vec<usize> = instr_tokens.iter().map(|t| *t as usize).collect();
    let inst = g.embedding(table, &ids)?;

    let mut flat = Vec::with_capacity(cfg.l_obs * cfg.d_raw);
    for row in obs {
        assert_eq!(row.len(), cfg.d_raw, "observation feature width");
        flat.extend_from_slice(row);
    }
    let raw = g.constant(Tensor::new(vec![cfg.l_obs, cfg.d_raw], flat));
    let w = g.param(&net.params, net.ids.obs_w);
    let b = g.param(&net.params, net.ids.obs_b);
    let proj = g.matmul(raw, w)?;
    let projb = g.add(proj, b)?;
    g.concat_rows(&[inst, projb])
}

fn block(g: &mut Graph, net: &NetParams, block_idx: usize, x: NodeId) -> TensorResult<NodeId> {
    let ids = &net.ids.blocks[block_idx];
    let p = &net.params;
    let eps = net.cfg.layer_norm_eps;
    let d = net.cfg.d_model;

    let (g1, b1) = (g.param(p, ids.ln1_g), g.param(p, ids.ln1_b));
    let ln1 = g.layer_norm(x, g1, b1, eps)?;
    let (wq, wk, wv, wo) = (
        g.param(p, ids.wq),
        g.param(p, ids.wk),
        g.param(p, ids.wv),
        g.param(p, ids.wo),
    );
    let q = g.matmul(ln1, wq)?;
    let k = g.matmul(ln1, wk)?;
    let v = g.matmul(ln1, wv)?;
    let kt = g.transpose(k)?;
    let qk = g.matmul(q, kt)?;
    let scaled = g.scale(qk, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax(scaled)?;
    let ctx = g.matmul(attn, v)?;
    let proj = g.matmul(ctx, wo)?;
    let x1 = g.add(x, proj)?;

    let (g2, b2) = (g.param(p, ids.ln2_g), g.param(p, ids.ln2_b));
    let ln2 = g.layer_norm(x1, g2, b2, eps)?;
    let (w1, bb1) = (g.param(p, ids.w1), g.param(p, ids.b1));
    let h = g.matmul(ln2, w1)?;
    let hb = g.add(h, bb1)?;
    let a = g.relu(hb)?;
    let (w2, bb2) = (g.param(p, ids.w2), g.param(p, ids.b2));
    let m = g.matmul(a, w2)?;
    let mb = g.add(m, bb2)?;
    g.add(x1, mb)
}

/// Run the backbone up to `up_to_exit`, returning the pooled feature per
/// exit, indexed 0..=up_to_exit (index 0 is the pooled pre-backbone
/// tokens).
pub fn backbone_pooled(
    g: &mut Graph,
    net: &NetParams,
    x0: NodeId,
    up_to_exit: usize,
) -> TensorResult<Vec<NodeId>> {
    assert!(up_to_exit <= net.cfg.n_exits);
    let mut pooled = Vec::with_capacity(up_to_exit + 1);
    pooled.push(g.max_pool_rows(x0)?);
    let mut x = x0;
    for exit in 1..=up_to_exit {
        for b in 0..net.cfg.blocks_per_exit {
            x = block(g, net, (exit - 1) * net.cfg.blocks_per_exit + b, x)?;
        }
        pooled.push(g.max_pool_rows(x)?);
    }
    Ok(pooled)
}

/// Recurrent state node pairs, one (h, c) per LSTM layer.
#[derive(Debug, Clone)]
pub struct HeadStateNodes(pub Vec<(NodeId, NodeId)>);

pub fn zero_head_state(g: &mut Graph, net: &NetParams) -> HeadStateNodes {
    let h = net.cfg.head.lstm_hidden;
    HeadStateNodes(
        (0..net.cfg.head.lstm_layers)
            .map(|_| {
                (
                    g.constant(Tensor::zeros(vec![1, h])),
                    g.constant(Tensor::zeros(vec![1, h])),
                )
            })
            .collect(),
    )
}

fn mlp_head(
    g: &mut Graph,
    net: &NetParams,
    ids: &super::MlpIds,
    x: NodeId,
    dropout: &mut Option<&mut DropoutCtx>,
) -> TensorResult<NodeId> {
    let p = &net.params;
    let (w1, b1) = (g.param(p, ids.w1), g.param(p, ids.b1));
    let z = g.matmul(x, w1)?;
    let zb = g.add(z, b1)?;
    let (lg, lb) = (g.param(p, ids.ln_g), g.param(p, ids.ln_b));
    let zn = g.layer_norm(zb, lg, lb, net.cfg.layer_norm_eps)?;
    let mut a = g.relu(zn)?;
    if let Some(ctx) = dropout.as_deref_mut() {
        a = dropout_mask(g, a, ctx.mlp_p, ctx.rng)?;
    }
    let (w2, b2) = (g.param(p, ids.w2), g.param(p, ids.b2));
    let o = g.matmul(a, w2)?;
    g.add(o, b2)
}

/// One recurrent-head step: LSTM stack then the pose and gripper MLPs.
/// Returns (pose [1,6], gripper logit [1,1], next state). The input state
/// nodes are not touched; committing or discarding the returned state is
/// the caller's choice.
pub fn head_forward(
    g: &mut Graph,
    net: &NetParams,
    head: &HeadIds,
    pooled: NodeId,
    state: &HeadStateNodes,
    mut dropout: Option<&mut DropoutCtx>,
) -> TensorResult<(NodeId, NodeId, HeadStateNodes)> {
    let hidden = net.cfg.head.lstm_hidden;
    let (ing, inb) = (g.param(&net.params, head.in_ln_g), g.param(&net.params, head.in_ln_b));
    let mut x = g.layer_norm(pooled, ing, inb, net.cfg.layer_norm_eps)?;
    let mut next = Vec::with_capacity(head.lstm.len());
    for (l, layer) in head.lstm.iter().enumerate() {
        let (h_prev, c_prev) = state.0[l];
        let (h, c) = lstm_cell(g, &net.params, layer, hidden, x, h_prev, c_prev)?;
        next.push((h, c));
        x = h;
        if l + 1 < head.lstm.len() {
            if let Some(ctx) = dropout.as_deref_mut() {
                x = dropout_mask(g, x, ctx.lstm_p, ctx.rng)?;
            }
        }
    }
    let pose = mlp_head(g, net, &head.pose, x, &mut dropout)?;
    let grip = mlp_head(g, net, &head.grip, x, &mut dropout)?;
    Ok((pose, grip, HeadStateNodes(next)))
}
