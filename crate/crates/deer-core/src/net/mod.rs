//! Multi-exit backbone with a recurrent action head.
//!
//! The backbone stacks `n_exits * blocks_per_exit` token-mixing blocks
//! (single-head self-attention + MLP, pre-norm residuals); after every
//! `blocks_per_exit` blocks an exit taps the token states and max-pools
//! them into a compact feature. The action head is a small LSTM stack
//! feeding two MLPs (pose and gripper). Auxiliary heads (one per exit,
//! same architecture, independent parameters) exist only in the training
//! parameter set.
//!
//! Two forward implementations share the parameters: a graph-building
//! path used for training ([`graph_fwd`]) and an allocation-light
//! incremental path for inference ([`infer`]), generic over f32/f64.

pub mod checkpoint;
pub mod graph_fwd;
pub mod infer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use infer::{ExitCache, HeadState, InferModel};

use crate::env::EnvConfig;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { lstm_layers: 2, lstm_hidden: 128, mlp_hidden: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_exits: usize,
    /// Backbone blocks between consecutive exits.
    pub blocks_per_exit: usize,
    pub d_model: usize,
    pub block_mlp_hidden: usize,
    pub l_inst: usize,
    pub l_obs: usize,
    pub d_raw: usize,
    pub vocab_size: usize,
    pub head: HeadConfig,
    pub aux_heads: bool,
    /// Training-time dropout rates.
    pub lstm_dropout: f64,
    pub mlp_dropout: f64,
    /// Keep the instruction/observation encoder frozen during training.
    pub freeze_encoder: bool,
    pub layer_norm_eps: f64,
}

impl NetConfig {
    pub fn for_env(env: &EnvConfig) -> NetConfig {
        NetConfig {
            n_exits: 4,
            blocks_per_exit: 2,
            d_model: 64,
            block_mlp_hidden: 128,
            l_inst: env.l_inst,
            l_obs: env.l_obs(),
            d_raw: env.d_raw(),
            vocab_size: env.vocab_size(),
            head: HeadConfig::default(),
            aux_heads: true,
            lstm_dropout: 0.3,
            mlp_dropout: 0.4,
            freeze_encoder: false,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.l_inst + self.l_obs
    }

    pub fn n_blocks(&self) -> usize {
        self.n_exits * self.blocks_per_exit
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_exits < 2 {
            return Err("n_exits must be at least 2".to_string());
        }
        if self.blocks_per_exit < 1 {
            return Err("blocks_per_exit must be at least 1".to_string());
        }
        if self.d_model == 0 || self.vocab_size == 0 || self.head.lstm_layers == 0 {
            return Err("zero-sized dimension".to_string());
        }
        Ok(())
    }
}

/// Per-timestep action output. The consistency vector used by the exit
/// criterion is (pose, gripper probability): the gripper enters as a
/// probability so its scale matches the pose values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionPrediction {
    pub pose: [f64; 6],
    pub gripper_logit: f64,
    pub gripper_prob: f64,
}

impl ActionPrediction {
    pub fn consistency_vector(&self) -> [f64; 7] {
        [
            self.pose[0],
            self.pose[1],
            self.pose[2],
            self.pose[3],
            self.pose[4],
            self.pose[5],
            self.gripper_prob,
        ]
    }

    pub fn l2_delta(&self, other: &ActionPrediction) -> f64 {
        let a = self.consistency_vector();
        let b = other.consistency_vector();
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_action(self) -> crate::env::Action7 {
        crate::env::Action7 { pose: self.pose, gripper: self.gripper_prob > 0.5 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadIds {
    /// Layer norm on the incoming pooled feature; keeps the head's input
    /// scale uniform across exits of different depths.
    pub in_ln_g: ParamId,
    pub in_ln_b: ParamId,
    pub lstm: Vec<crate::tensor::LstmLayerIds>,
    pub pose: MlpIds,
    pub grip: MlpIds,
}

#[derive(Debug, Clone)]
pub struct NetIds {
    pub embed: ParamId,
    pub obs_w: ParamId,
    pub obs_b: ParamId,
    pub blocks: Vec<BlockIds>,
    pub head: HeadIds,
    /// One auxiliary head per exit when enabled.
    pub aux: Vec<HeadIds>,
}

/// The trainable model: parameter registry plus resolved ids.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub cfg: NetConfig,
    pub params: ParamSet,
    pub ids: NetIds,
}

fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal_scaled(std)).collect())
}

fn register_linear(
    params: &mut ParamSet,
    rng: &mut Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> (ParamId, ParamId) {
    let std = (1.0 / d_in as f64).sqrt();
    let w = params.register(&format!("{name}.w"), normal_tensor(rng, vec![d_in, d_out], std));
    let b = params.register(&format!("{name}.b"), Tensor::zeros(vec![d_out]));
    (w, b)
}

fn register_ln(params: &mut ParamSet, name: &str, dim: usize) -> (ParamId, ParamId) {
    let g = params.register(&format!("{name}.g"), Tensor::filled(vec![dim], 1.0));
    let b = params.register(&format!("{name}.b"), Tensor::zeros(vec![dim]));
    (g, b)
}

fn register_head(
    params: &mut ParamSet,
    rng: &mut Rng,
    prefix: &str,
    cfg: &NetConfig,
) -> HeadIds {
    let h = cfg.head.lstm_hidden;
    let (in_ln_g, in_ln_b) = register_ln(params, &format!("{prefix}.in_ln"), cfg.d_model);
    let mut lstm = Vec::new();
    for l in 0..cfg.head.lstm_layers {
        let d_in = if l == 0 { cfg.d_model } else { h };
        let std = (1.0 / d_in.max(h) as f64).sqrt();
        let w_ih = params.register(
            &format!("{prefix}.lstm{l}.w_ih"),
            normal_tensor(rng, vec![d_in, 4 * h], std),
        );
        let w_hh = params.register(
            &format!("{prefix}.lstm{l}.w_hh"),
            normal_tensor(rng, vec![h, 4 * h], std),
        );
        let mut bias = Tensor::zeros(vec![4 * h]);
        for j in h..2 * h {
            bias.data_mut()[j] = 1.0; // forget-gate bias
        }
        let bias = params.register(&format!("{prefix}.lstm{l}.b"), bias);
        lstm.push(crate::tensor::LstmLayerIds { w_ih, w_hh, bias });
    }
    let mlp = |params: &mut ParamSet, rng: &mut Rng, name: String, d_out: usize| -> MlpIds {
        let (w1, b1) = register_linear(params, rng, &format!("{name}.fc1"), h, cfg.head.mlp_hidden);
        let (ln_g, ln_b) = register_ln(params, &format!("{name}.ln"), cfg.head.mlp_hidden);
        let (w2, b2) =
            register_linear(params, rng, &format!("{name}.fc2"), cfg.head.mlp_hidden, d_out);
        MlpIds { w1, b1, ln_g, ln_b, w2, b2 }
    };
    let pose = mlp(params, rng, format!("{prefix}.pose"), 6);
    let grip = mlp(params, rng, format!("{prefix}.grip"), 1);
    HeadIds { in_ln_g, in_ln_b, lstm, pose, grip }
}

impl NetParams {
    /// Fresh random initialization; every parameter draws from one named
    /// stream of `seed` in registration order.
    pub fn init(cfg: NetConfig, seed: u64) -> NetParams {
        cfg.validate().expect("invalid net config");
        let mut params = ParamSet::new();
        let mut rng = Rng::stream(seed, "init", &[]);
        let d = cfg.d_model;

        let embed = params.register(
            "embed",
            normal_tensor(&mut rng, vec![cfg.vocab_size, d], 0.1),
        );
        let (obs_w, obs_b) = register_linear(&mut params, &mut rng, "obs_proj", cfg.d_raw, d);

        let mut blocks = Vec::new();
        for b in 0..cfg.n_blocks() {
            let p = format!("block{b}");
            let (ln1_g, ln1_b) = register_ln(&mut params, &format!("{p}.ln1"), d);
            let std = (1.0 / d as f64).sqrt();
            let wq = params.register(&format!("{p}.attn.wq"), normal_tensor(&mut rng, vec![d, d], std));
            let wk = params.register(&format!("{p}.attn.wk"), normal_tensor(&mut rng, vec![d, d], std));
            let wv = params.register(&format!("{p}.attn.wv"), normal_tensor(&mut rng, vec![d, d], std));
            let wo = params.register(&format!("{p}.attn.wo"), normal_tensor(&mut rng, vec![d, d], std));
            let (ln2_g, ln2_b) = register_ln(&mut params, &format!("{p}.ln2"), d);
            let (w1, b1) =
                register_linear(&mut params, &mut rng, &format!("{p}.mlp.fc1"), d, cfg.block_mlp_hidden);
            let (w2, b2) =
                register_linear(&mut params, &mut rng, &format!("{p}.mlp.fc2"), cfg.block_mlp_hidden, d);
            blocks.push(BlockIds { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 });
        }

        let head = register_head(&mut params, &mut rng, "head", &cfg);
        let mut aux = Vec::new();
        if cfg.aux_heads {
            for j in 1..=cfg.n_exits {
                aux.push(register_head(&mut params, &mut rng, &format!("aux{j}"), &cfg));
            }
        }

        let ids = NetIds { embed, obs_w, obs_b, blocks, head, aux };
        NetParams { cfg, params, ids }
    }

    /// Parameter group of a named parameter: encoder, backbone blocks,
    /// the main action head, or an auxiliary head.
    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("head.") {
            ParamGroup::Head
        } else if name.starts_with("aux") {
            ParamGroup::Aux
        } else if name.starts_with("embed") || name.starts_with("obs_proj") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Backbone
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Backbone,
    Head,
    Aux,
}

#[cfg(test)]
pub(crate) fn tiny_test_cfg() -> NetConfig {
    NetConfig {
        n_exits: 2,
        blocks_per_exit: 1,
        d_model: 8,
        block_mlp_hidden: 12,
        l_inst: 2,
        l_obs: 3,
        d_raw: 5,
        vocab_size: 7,
        head: HeadConfig { lstm_layers: 1, lstm_hidden: 8, mlp_hidden: 8 },
        aux_heads: true,
        lstm_dropout: 0.0,
        mlp_dropout: 0.0,
        freeze_encoder: false,
        layer_norm_eps: 1e-5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = NetParams::init(tiny_test_cfg(), 5);
        let b = NetParams::init(tiny_test_cfg(), 5);
        let c = NetParams::init(tiny_test_cfg(), 6);
        for ((_, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn aux_parameters_are_disjoint_from_main_head_and_backbone() {
        let net = NetParams::init(tiny_test_cfg(), 1);
        let mut n_aux = 0;
        for (name, _) in net.params.iter() {
            if NetParams::group_of(name) == ParamGroup::Aux {
                n_aux += 1;
                assert!(!name.starts_with("head."));
                assert!(!name.starts_with("block"));
            }
        }
        assert!(n_aux > 0);
        // one independent parameter set per exit
        let per_head: Vec<usize> = (1..=2)
            .map(|j| {
                net.params
                    .iter()
                    .filter(|(n, _)| n.starts_with(&format!("aux{j}.")))
                    .count()
            })
            .collect();
        assert_eq!(per_head[0], per_head[1]);
        assert!(per_head[0] > 0);
    }

    #[test]
    fn validate_rejects_degenerate_configs() {
        let mut cfg = tiny_test_cfg();
        cfg.n_exits = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_test_cfg();
        cfg.blocks_per_exit = 0;
        assert!(cfg.validate().is_err());
    }
}
