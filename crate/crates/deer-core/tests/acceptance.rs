//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers. The heavier criteria share one trained
//! pipeline (dataset -> training -> calibration -> evaluation) built
//! lazily behind a lock.

use deer_core::budget::{
    cap_exit, collect_calibration_data, expected_cost, fit_similarity_thresholds, fit_thresholds,
    fit_time_schedule, replay_episodes, replay_exit_counts, solve_allocation, solve_online,
    verify_constraints, BoConfig, BudgetError, BudgetSpec, CostModel, ObjectiveSample,
};
use deer_core::env::{
    evaluate_chains, generate_dataset, sample_world, DatasetConfig, EnvConfig, Episode,
    Instruction, Split, TaskEnv, Template,
};
use deer_core::gradcheck;
use deer_core::net::graph_fwd;
use deer_core::net::infer::InferModel;
use deer_core::net::{HeadConfig, HeadState, NetConfig, NetParams};
use deer_core::policy::{
    decide_action_consistency, run_episode, Criterion, DeerPolicy, ThresholdVector,
};
use deer_core::rng::{derive_seed, Rng};
use deer_core::tensor::{Graph, NodeId, ParamSet, Tensor};
use deer_core::train::{
    per_exit_validation_loss, split_train_val, train, TrainConfig,
};
use std::sync::OnceLock;
use std::time::Instant;

const SPLITS: [Split; 4] = [Split::A, Split::B, Split::C, Split::D];

fn pass(criterion: u32, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion} [{name}]: PASS ({detail})");
}

// ════════════════════════════════════════════════════════════════════
// Criterion 1: gradient correctness at 64-bit, 10 seeds, < 30 s
// ════════════════════════════════════════════════════════════════════

fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
}

/// Weighted-sum loss over one op output; gradcheck against central
/// differences.
fn check_op<F>(seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &ParamSet) -> NodeId,
{
    let mut rng = Rng::new(seed);
    let mut params = ParamSet::new();
    // every op test registers its inputs under these names
    let a = rand_tensor(&mut rng, vec![3, 4]);
    let b = rand_tensor(&mut rng, vec![4, 3]);
    let v = rand_tensor(&mut rng, vec![4]);
    params.register("a", a);
    params.register("b", b);
    params.register("v", v);
    let mut g = Graph::new();
    let out = build(&mut g, &params);
    let w = rand_tensor(&mut rng, g.value(out).shape().to_vec());
    let wn = g.constant(w.clone());
    let prod = g.mul(out, wn).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss, &params).unwrap();
    gradcheck::check(&params, &grads.by_param, |p| {
        let mut g = Graph::new();
        let out = build(&mut g, p);
        let wn = g.constant(w.clone());
        let prod = g.mul(out, wn).unwrap();
        let loss = g.sum(prod).unwrap();
        g.value(loss).item()
    })
}

fn tiny_net_cfg() -> NetConfig {
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

fn full_net_loss(net: &NetParams, tokens: &[u32], obs: &[Vec<f64>]) -> (f64, Graph, NodeId) {
    let mut g = Graph::new();
    let x0 = graph_fwd::encode(&mut g, net, tokens, obs).unwrap();
    let pooled = graph_fwd::backbone_pooled(&mut g, net, x0, net.cfg.n_exits).unwrap();
    let st = graph_fwd::zero_head_state(&mut g, net);
    let (pose, grip, _) =
        graph_fwd::head_forward(&mut g, net, &net.ids.head.clone(), pooled[net.cfg.n_exits], &st, None)
            .unwrap();
    let mut total = g.sum(pose).unwrap();
    let bce = g.bce_with_logits(grip, 1.0).unwrap();
    total = g.add(total, bce).unwrap();
    for (j, aux) in net.ids.aux.clone().iter().enumerate() {
        let st = graph_fwd::zero_head_state(&mut g, net);
        let (p, gr, _) = graph_fwd::head_forward(&mut g, net, aux, pooled[j + 1], &st, None).unwrap();
        let s = g.sum(p).unwrap();
        let b = g.bce_with_logits(gr, 0.0).unwrap();
        total = g.add(total, s).unwrap();
        total = g.add(total, b).unwrap();
    }
    let v = g.value(total).item();
    (v, g, total)
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        // per-op checks
        worst = worst.max(check_op(seed, |g, p| {
            let a = g.param(p, p.id("a").unwrap());
            let b = g.param(p, p.id("b").unwrap());
            let mm = g.matmul(a, b).unwrap();
            g.tanh(mm).unwrap()
        }));
        worst = worst.max(check_op(100 + seed, |g, p| {
            let a = g.param(p, p.id("a").unwrap());
            let s = g.softmax(a).unwrap();
            g.sigmoid(s).unwrap()
        }));
        worst = worst.max(check_op(200 + seed, |g, p| {
            let a = g.param(p, p.id("a").unwrap());
            let v = g.param(p, p.id("v").unwrap());
            let biased = g.add(a, v).unwrap();
            let ln = {
                let gamma = g.constant(Tensor::filled(vec![4], 1.0));
                let beta = g.constant(Tensor::zeros(vec![4]));
                g.layer_norm(biased, gamma, beta, 1e-5).unwrap()
            };
            g.slice_cols(ln, 1, 2).unwrap()
        }));
        // relu + max-pool on inputs kept away from the kink and from
        // per-column ties
        {
            let mut rng = Rng::new(300 + seed);
            let mut params = ParamSet::new();
            let data: Vec<f64> = loop {
                let d: Vec<f64> = (0..12)
                    .map(|_| {
                        let v = rng.normal();
                        if v.abs() < 1e-3 {
                            v + 0.2
                        } else {
                            v
                        }
                    })
                    .collect();
                let mut tie = false;
                for c in 0..4 {
                    let mut col: Vec<f64> = (0..3).map(|r| d[r * 4 + c].max(0.0)).collect();
                    col.sort_by(|x, y| y.partial_cmp(x).unwrap());
                    if col[0] - col[1] < 1e-3 {
                        tie = true;
                    }
                }
                if !tie {
                    break d;
                }
            };
            let pid = params.register("x", Tensor::new(vec![3, 4], data));
            let w = rand_tensor(&mut rng, vec![4]);
            let mut g = Graph::new();
            let xn = g.param(&params, pid);
            let r = g.relu(xn).unwrap();
            let pooled = g.max_pool_rows(r).unwrap();
            let wn = g.constant(w.clone());
            let prod = g.mul(pooled, wn).unwrap();
            let loss = g.sum(prod).unwrap();
            let grads = g.backward(loss, &params).unwrap();
            let err = gradcheck::check(&params, &grads.by_param, |p| {
                let mut g = Graph::new();
                let xn = g.param(p, pid);
                let r = g.relu(xn).unwrap();
                let pooled = g.max_pool_rows(r).unwrap();
                let wn = g.constant(w.clone());
                let prod = g.mul(pooled, wn).unwrap();
                let loss = g.sum(prod).unwrap();
                g.value(loss).item()
            });
            worst = worst.max(err);
        }

        // full 2-exit toy network: encoder + blocks + main and aux heads.
        // Inputs are redrawn until every relu and max-pool in the forward
        // has margin well above the finite-difference step.
        let net = NetParams::init(tiny_net_cfg(), 5000 + seed);
        let tokens: Vec<u32> = vec![seed as u32 % 7, (seed as u32 + 3) % 7];
        let mut rng = Rng::new(900 + seed);
        let obs: Vec<Vec<f64>> = loop {
            let candidate: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..5).map(|_| rng.range_f64(-1.0, 1.0)).collect())
                .collect();
            let (_, g, _) = full_net_loss(&net, &tokens, &candidate);
            if g.min_kink_margin() > 1e-3 {
                break candidate;
            }
        };
        let (_, g, total) = full_net_loss(&net, &tokens, &obs);
        let grads = g.backward(total, &net.params).unwrap();
        let err = gradcheck::check(&net.params, &grads.by_param, |p| {
            let probe = NetParams { cfg: net.cfg.clone(), params: p.clone(), ids: net.ids.clone() };
            full_net_loss(&probe, &tokens, &obs).0
        });
        worst = worst.max(err);
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(worst < 1e-4, "worst relative error {worst}");
    assert!(elapsed < 30.0, "gradient checks took {elapsed:.1}s");
    pass(1, "gradient correctness", format!("worst rel err {worst:.2e}, {elapsed:.1}s"));
}

// ════════════════════════════════════════════════════════════════════
// Criterion 2: cost-model arithmetic against published figures
// ════════════════════════════════════════════════════════════════════

#[test]
fn criterion_2_cost_model_paper_check() {
    let cm = CostModel::from_uniform_layers(12, 1.3, 0.5, 2).unwrap();
    let gflops: Vec<f64> = cm.flops.iter().map(|f| *f as f64 / 1e9).collect();
    assert_eq!(gflops, vec![2.6, 5.2, 7.8, 10.4, 13.0, 15.6]);
    let cm24 = CostModel::from_uniform_layers(24, 1.3, 0.5, 2).unwrap();
    assert_eq!(*cm24.flops.last().unwrap(), 31_200_000_000u64);
    assert_eq!(cm.mem(2), 2.0, "four 0.5 GB layers");
    pass(
        2,
        "cost model",
        "C = [2.6, 5.2, 7.8, 10.4, 13.0, 15.6] GFLOPs, 24 layers = 31.2, 4 layers = 2.0 GB".to_string(),
    );
}

// ════════════════════════════════════════════════════════════════════
// Criterion 3: allocation solver vs brute-force grid, < 10 s
// ════════════════════════════════════════════════════════════════════

fn grid_best_q(cm: &CostModel, budget: f64, n: usize) -> f64 {
    let target = budget.min(expected_cost(cm, 1.0, n));
    let mut best = (f64::INFINITY, 1.0);
    for k in 1..=10_000 {
        let q = k as f64 * 1e-4;
        let err = (expected_cost(cm, q, n) - target).abs();
        if err < best.0 {
            best = (err, q);
        }
    }
    best.1
}

#[test]
fn criterion_3_allocation_solver_oracle() {
    let started = Instant::now();
    let mut rng = Rng::new(3003);
    for trial in 0..100 {
        let n = 2 + rng.usize_below(6);
        let mut flops = Vec::with_capacity(n);
        let mut acc = 0u64;
        for _ in 0..n {
            acc += 10_000_000 + rng.below(3_000_000_000);
            flops.push(acc);
        }
        let cm = CostModel { flops: flops.clone(), mem_gb: vec![0.1; n], head_flops: 0 };
        let c1 = flops[0] as f64;
        let mean = expected_cost(&cm, 1.0, n);
        let budget = c1 + rng.next_f64() * (mean - c1);
        let a = solve_allocation(&cm, budget, n).unwrap();
        let q_grid = grid_best_q(&cm, budget, n);
        assert!(
            (a.q - q_grid).abs() <= 1e-4,
            "trial {trial}: bisection {} vs grid {}",
            a.q,
            q_grid
        );
    }
    // degenerate cases
    let cm = CostModel { flops: vec![10, 20, 30], mem_gb: vec![0.1; 3], head_flops: 0 };
    let a = solve_allocation(&cm, 15.0, 1).unwrap();
    assert_eq!((a.q, a.proportions[0]), (1.0, 1.0), "n = 1 is a point mass");
    let a = solve_allocation(&cm, 35.0, 3).unwrap();
    assert_eq!(a.q, 1.0, "budget above the uniform mean saturates at q = 1");
    assert!(matches!(
        solve_allocation(&cm, 5.0, 3),
        Err(BudgetError::BudgetBelowMinimum { .. })
    ));
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "allocation oracle took {elapsed:.1}s");
    pass(3, "allocation solver", format!("100 instances within 1e-4 of grid, {elapsed:.1}s"));
}

// ════════════════════════════════════════════════════════════════════
// Criterion 6: incremental forward equals fresh forward (f32, 1e-6)
// ════════════════════════════════════════════════════════════════════

#[test]
fn criterion_6_incremental_forward_consistency() {
    let env = EnvConfig::default();
    let cfg = NetConfig::for_env(&env);
    let n = cfg.n_exits;
    let net = NetParams::init(cfg, 606);
    let model: InferModel<f32> = InferModel::from_net(&net);
    let mut rng = Rng::new(607);
    let mut worst = 0.0f32;
    for trial in 0..200 {
        let split = SPLITS[trial % 4];
        let world = sample_world(&env, split, &mut rng);
        let instr = Instruction::new(
            &env,
            Template::Reach,
            Some(world.objects[0].color),
            None,
            None,
        );
        let obs = deer_core::env::observe(&env, &world);
        // fresh pass to every exit
        let mut fresh = model.encode(&instr.tokens, &obs);
        model.forward_to_exit(&mut fresh, n);
        // every (i, j) extension must match it
        for i in 0..n {
            let mut inc = model.encode(&instr.tokens, &obs);
            model.forward_to_exit(&mut inc, i);
            for j in i + 1..=n {
                model.forward_to_exit(&mut inc, j);
                for (a, b) in inc
                    .token_state(j)
                    .data
                    .iter()
                    .zip(fresh.token_state(j).data.iter())
                {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
    pass(6, "incremental forward", format!("200 inputs, worst deviation {worst:.2e}"));
}

// ════════════════════════════════════════════════════════════════════
// Criterion 10a: online solver on the synthetic known-optimum objective
// ════════════════════════════════════════════════════════════════════

#[test]
fn criterion_10a_online_solver_synthetic() {
    let bounds = [1.0, 1.0, 1.0];
    let eta_star = [0.45, 0.30, 0.60];
    let feasible_box = [0.8, 0.7, 0.9];
    let mut hits = 0;
    for seed in 0..10u64 {
        let cfg = BoConfig { n_initial: 10, n_total: 60, multi_start: 256, penalty: 10.0, seed };
        let (best, _) = solve_online(&bounds, 4, 4, &cfg, |tv| {
            let feasible = (0..3).all(|i| tv.eta[i] <= feasible_box[i]);
            let d2: f64 = (0..3).map(|i| (tv.eta[i] - eta_star[i]).powi(2)).sum();
            ObjectiveSample { scc: 1.0 - 0.3 * d2, avg_flops: 0.0, peak_flops: 0.0, mem_gb: 0.0, feasible }
        });
        let best = best.expect("feasible point");
        let d2: f64 = (0..3).map(|i| (best.eta[i] - eta_star[i]).powi(2)).sum();
        if 1.0 - 0.3 * d2 >= 0.95 {
            hits += 1;
        }
    }
    assert_eq!(hits, 10, "{hits}/10 seeds within 5% of optimum");
    pass(10, "online solver (synthetic)", "10/10 seeds within 5% in <= 60 evaluations".to_string());
}
