//! The five commands: gen-data, train, calibrate, eval, report.

use crate::config::{RunConfig, UsageError};
use deer_core::budget::{
    self, bo_log_csv_header, bo_log_csv_row, cap_exit, collect_calibration_data,
    criterion_from_json, criterion_to_json, deltas_to_csv, fit_similarity_thresholds,
    fit_thresholds, fit_time_schedule, solve_allocation, solve_online, BoConfig, BudgetError,
    BudgetSpec, CostModel, ObjectiveSample,
};
use deer_core::env::{
    evaluate_chains, generate_dataset, load_dataset, sample_chain, write_dataset, DatasetConfig,
    EnvConfig, Episode, Split, TaskEnv,
};
use deer_core::net::infer::InferModel;
use deer_core::net::{load_checkpoint, save_checkpoint, NetConfig, NetParams};
use deer_core::policy::{run_episode, write_episode_log, Criterion, DeerPolicy};
use deer_core::rng::derive_seed;
use deer_core::train::{
    adam_state_from_str, adam_state_to_string, log_csv_header, log_csv_row, split_train_val,
    train_epochs, TrainConfig, TrainError, TrainState,
};
use std::path::{Path, PathBuf};

pub enum CmdError {
    Usage(String),
    Infeasible(String),
    Numeric(String),
    Other(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Infeasible(_) => 2,
            CmdError::Numeric(_) => 3,
            CmdError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Infeasible(m) | CmdError::Numeric(m) | CmdError::Other(m) => m,
        }
    }
}

impl From<UsageError> for CmdError {
    fn from(e: UsageError) -> Self {
        CmdError::Usage(e.0)
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Other(format!("io error: {e}"))
    }
}

impl From<BudgetError> for CmdError {
    fn from(e: BudgetError) -> Self {
        match e {
            BudgetError::Infeasible { .. } | BudgetError::BudgetBelowMinimum { .. } => {
                CmdError::Infeasible(e.to_string())
            }
            other => CmdError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => CmdError::Numeric(e.to_string()),
            other => CmdError::Other(other.to_string()),
        }
    }
}

fn parse_splits(cfg: &RunConfig) -> Result<Vec<Split>, CmdError> {
    let s = cfg.str_or("splits", "ABCD");
    Split::parse_many(&s).ok_or_else(|| CmdError::Usage(format!("invalid --splits '{s}'")))
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CmdError> {
    let out = cfg.path_required("out")?;
    let episodes = cfg.parse_or("episodes", 2000usize)?;
    let splits = parse_splits(cfg)?;
    let seed = cfg.master_seed(0)?;
    cfg.reject_unknown()?;

    let env = EnvConfig::default();
    let dcfg = DatasetConfig { n_episodes: episodes, splits, seed };
    let (eps, manifest) =
        generate_dataset(&env, &dcfg).map_err(|e| CmdError::Other(e.to_string()))?;
    let manifest_path = out.with_extension("manifest.json");
    write_dataset(&out, &manifest_path, &eps, &manifest)?;
    cfg.write_snapshot(&out.with_extension("config"), &[("seed", seed.to_string())])?;
    println!(
        "wrote {} episodes (mean length {:.2}) to {}",
        manifest.n_episodes,
        manifest.mean_len,
        out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn net_config_from(cfg: &RunConfig, env: &EnvConfig, aux: bool) -> Result<NetConfig, CmdError> {
    let mut net = NetConfig::for_env(env);
    net.n_exits = cfg.parse_or("n_exits", net.n_exits)?;
    net.blocks_per_exit = cfg.parse_or("blocks_per_exit", net.blocks_per_exit)?;
    net.d_model = cfg.parse_or("d_model", net.d_model)?;
    net.block_mlp_hidden = cfg.parse_or("block_mlp_hidden", net.block_mlp_hidden)?;
    net.head.lstm_layers = cfg.parse_or("lstm_layers", net.head.lstm_layers)?;
    net.head.lstm_hidden = cfg.parse_or("lstm_hidden", net.head.lstm_hidden)?;
    net.head.mlp_hidden = cfg.parse_or("mlp_hidden", net.head.mlp_hidden)?;
    net.lstm_dropout = cfg.parse_or("lstm_dropout", net.lstm_dropout)?;
    net.mlp_dropout = cfg.parse_or("mlp_dropout", net.mlp_dropout)?;
    net.freeze_encoder = cfg.flag("freeze_encoder")?;
    net.aux_heads = aux;
    net.validate().map_err(CmdError::Usage)?;
    Ok(net)
}

fn train_config_from(cfg: &RunConfig, seed: u64, aux: bool) -> Result<TrainConfig, CmdError> {
    let defaults = TrainConfig::default();
    Ok(TrainConfig {
        window: cfg.parse_or("window", defaults.window)?,
        lambda: cfg.parse_or("lambda", defaults.lambda)?,
        batch_size: cfg.parse_or("batch", defaults.batch_size)?,
        lr_backbone: cfg.parse_or("lr_backbone", defaults.lr_backbone)?,
        lr_head: cfg.parse_or("lr_head", defaults.lr_head)?,
        epochs_joint: cfg.parse_or("epochs_joint", defaults.epochs_joint)?,
        epochs_posttrain: cfg.parse_or("epochs_post", defaults.epochs_posttrain)?,
        aux_enabled: aux,
        seed,
        grad_clip: cfg.parse_or("grad_clip", defaults.grad_clip)?,
        warmup_steps: cfg.parse_or("warmup", defaults.warmup_steps)?,
        val_fraction: cfg.parse_or("val_fraction", defaults.val_fraction)?,
        windows_per_epoch: cfg.parse_opt("windows_per_epoch")?,
    })
}

fn write_train_artifacts(dir: &Path, state: &TrainState) -> Result<(), CmdError> {
    let mut csv = String::from(log_csv_header());
    csv.push('\n');
    for row in &state.log {
        csv.push_str(&log_csv_row(row));
        csv.push('\n');
    }
    std::fs::write(dir.join("train_log.csv"), csv)?;
    let mut val = String::from("epoch");
    for e in 1..=state.net.cfg.n_exits {
        val.push_str(&format!(",exit{e}"));
    }
    val.push('\n');
    for (epoch, losses) in state.val_history.iter().enumerate() {
        val.push_str(&epoch.to_string());
        for l in losses {
            val.push_str(&format!(",{l}"));
        }
        val.push('\n');
    }
    std::fs::write(dir.join("val_per_exit.csv"), val)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CmdError> {
    let data = cfg.path_required("data")?;
    let out = cfg.path_required("out")?;
    let seed = cfg.master_seed(0)?;
    let no_aux = cfg.flag("no_aux")?;
    let resume = cfg.flag("resume")?;
    let env = EnvConfig::default();
    let net_cfg = net_config_from(cfg, &env, !no_aux)?;
    let tcfg = train_config_from(cfg, seed, !no_aux)?;
    cfg.reject_unknown()?;

    std::fs::create_dir_all(&out)?;
    let episodes = load_dataset(&data)?;
    let total_epochs = tcfg.epochs_joint + tcfg.epochs_posttrain;

    let mut state = if resume {
        let mut last: Option<usize> = None;
        for e in 0..total_epochs {
            if out.join(format!("trainstate_epoch{e}.json")).exists() {
                last = Some(e);
            }
        }
        match last {
            None => TrainState::new(NetParams::init(net_cfg.clone(), seed)),
            Some(e) => {
                let (net, _) = load_checkpoint(&out.join(format!("checkpoint_epoch{e}.json")))
                    .map_err(|err| CmdError::Other(err.to_string()))?;
                let text = std::fs::read_to_string(out.join(format!("trainstate_epoch{e}.json")))?;
                let (adam, next_epoch) = adam_state_from_str(&net, &text)
                    .map_err(|err| CmdError::Other(err.to_string()))?;
                println!("resuming from epoch {next_epoch}");
                TrainState {
                    net,
                    adam,
                    next_epoch,
                    log: Vec::new(),
                    val_history: Vec::new(),
                }
            }
        }
    } else {
        TrainState::new(NetParams::init(net_cfg.clone(), seed))
    };

    cfg.write_snapshot(&out.join("resolved.config"), &[("seed", seed.to_string())])?;
    while state.next_epoch < total_epochs {
        let epoch = state.next_epoch;
        train_epochs(&mut state, &episodes, &tcfg, epoch + 1)?;
        save_checkpoint(&out.join(format!("checkpoint_epoch{epoch}.json")), &state.net, seed)
            .map_err(|e| CmdError::Other(e.to_string()))?;
        std::fs::write(
            out.join(format!("trainstate_epoch{epoch}.json")),
            adam_state_to_string(&state.net, &state.adam, state.next_epoch),
        )?;
        write_train_artifacts(&out, &state)?;
        let last = state.log.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
        println!("epoch {epoch} done, last batch loss {last:.5}");
    }
    save_checkpoint(&out.join("checkpoint_final.json"), &state.net, seed)
        .map_err(|e| CmdError::Other(e.to_string()))?;
    println!("final checkpoint at {}", out.join("checkpoint_final.json").display());
    Ok(())
}

// ── calibrate ───────────────────────────────────────────────────────

fn budget_from(cfg: &RunConfig, mean_len: f64) -> Result<BudgetSpec, CmdError> {
    let peak = cfg.parse_or("peak_gflops", f64::INFINITY)? * 1e9;
    let mem = cfg.parse_or("mem_gb", f64::INFINITY)?;
    if let Some(total) = cfg.parse_opt::<f64>("total_gflops")? {
        let n_tasks = cfg.parse_or("n_tasks", 1usize)?;
        return Ok(BudgetSpec {
            total_flops: total * 1e9,
            peak_flops: peak,
            mem_gb: mem,
            n_tasks,
            mean_len,
        });
    }
    let avg = cfg
        .parse_opt::<f64>("avg_gflops")?
        .ok_or_else(|| CmdError::Usage("provide --avg-gflops or --total-gflops".to_string()))?;
    Ok(BudgetSpec::per_step(avg * 1e9, peak, mem))
}

/// Calibration episodes: the validation split by default, or a 1%
/// subsample of the training split.
fn calibration_episodes<'e>(
    cfg: &RunConfig,
    episodes: &'e [Episode],
    val_fraction: f64,
) -> Result<Vec<&'e Episode>, CmdError> {
    let source = cfg.str_or("calib_source", "val");
    let (train, val) = split_train_val(episodes, val_fraction);
    match source.as_str() {
        "val" => Ok(val),
        "train1pct" => {
            let keep = (train.len() / 100).max(1);
            Ok(train.into_iter().step_by((episodes.len() / keep).max(1)).take(keep).collect())
        }
        other => Err(CmdError::Usage(format!("invalid --calib-source '{other}'"))),
    }
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<(), CmdError> {
    let checkpoint = cfg.path_required("checkpoint")?;
    let data = cfg.path_required("data")?;
    let out = cfg.path_required("out")?;
    let mode = cfg.str_or("mode", "dataset");
    let criterion_kind = cfg.str_or("criterion", "action");
    let seed = cfg.master_seed(0)?;
    let max_samples = cfg.parse_or("calib_samples", 2000usize)?;
    let val_fraction = cfg.parse_or("val_fraction", 0.1f64)?;

    let (net, _) = load_checkpoint(&checkpoint).map_err(|e| CmdError::Other(e.to_string()))?;
    let episodes = load_dataset(&data)?;
    let mean_len =
        episodes.iter().map(|e| e.steps.len() as f64).sum::<f64>() / episodes.len().max(1) as f64;
    let budget = budget_from(cfg, mean_len)?;
    let cost = CostModel::analytic(&net.cfg);
    let n_cap = cap_exit(&cost, budget.peak_flops, budget.mem_gb)?;
    let allocation = solve_allocation(&cost, budget.per_step_budget(), n_cap)?;

    let calib = calibration_episodes(cfg, &episodes, val_fraction)?;
    let model: InferModel<f32> = InferModel::from_net(&net);
    let calib_data = collect_calibration_data(&model, &calib, max_samples);

    if let Some(dump) = cfg.str_opt("delta_dump") {
        std::fs::write(dump, deltas_to_csv(&calib_data.deltas))?;
    }

    let offline = match criterion_kind.as_str() {
        "action" => Criterion::ActionConsistency(fit_thresholds(&allocation, &calib_data.deltas)?),
        "feature" => Criterion::FeatureSimilarity {
            thresholds: fit_similarity_thresholds(&allocation, &calib_data.sims)?,
            n_cap,
        },
        "time" => Criterion::TimeProgressive {
            schedule: fit_time_schedule(&allocation, mean_len, EnvConfig::default().t_max),
            n_cap,
        },
        other => return Err(CmdError::Usage(format!("invalid --criterion '{other}'"))),
    };

    let chosen = match mode.as_str() {
        "dataset" => offline,
        "online" => {
            if criterion_kind != "action" {
                return Err(CmdError::Usage(
                    "online mode searches action-consistency thresholds only".to_string(),
                ));
            }
            let splits = parse_splits(cfg)?;
            let bo_cfg = BoConfig {
                n_initial: cfg.parse_or("bo_init", 10usize)?,
                n_total: cfg.parse_or("bo_evals", 50usize)?,
                multi_start: 256,
                penalty: cfg.parse_or("bo_penalty", 10.0f64)?,
                seed: derive_seed(seed, "bo", &[]),
            };
            let e_chains = cfg.parse_or("bo_chains", 100usize)?;
            let bounds = delta_percentile_bounds(&calib_data.deltas, n_cap);
            let env = EnvConfig::default();
            let eval_seed = derive_seed(seed, "bo-eval", &[]);
            let mut eval_count = 0u64;
            let (best, log) =
                solve_online(&bounds, n_cap, net.cfg.n_exits, &bo_cfg, |tv| {
                    eval_count += 1;
                    objective_on_chains(
                        &model,
                        &env,
                        &splits,
                        tv.clone(),
                        &budget,
                        &cost,
                        n_cap,
                        e_chains,
                        eval_seed,
                    )
                });
            let mut csv = bo_log_csv_header(net.cfg.n_exits);
            csv.push('\n');
            for row in &log {
                csv.push_str(&bo_log_csv_row(row));
                csv.push('\n');
            }
            std::fs::write(out.with_extension("bo.csv"), csv)?;
            match best {
                Some(tv) => Criterion::ActionConsistency(tv),
                None => {
                    eprintln!(
                        "warning: no feasible point found online; falling back to offline thresholds"
                    );
                    offline
                }
            }
        }
        other => return Err(CmdError::Usage(format!("invalid --mode '{other}'"))),
    };
    cfg.reject_unknown()?;

    std::fs::write(&out, criterion_to_json(&chosen, &cost.hash()))?;
    cfg.write_snapshot(&out.with_extension("config"), &[("seed", seed.to_string())])?;
    println!(
        "calibrated {} thresholds (cap {n_cap}, per-step budget {:.3} GFLOPs) -> {}",
        chosen.kind_name(),
        budget.per_step_budget() / 1e9,
        out.display()
    );
    Ok(())
}

/// Upper search bounds for online calibration: the 99th percentile of
/// observed deltas per exit.
pub fn delta_percentile_bounds(deltas: &[Vec<f64>], n_cap: usize) -> Vec<f64> {
    let mut bounds = Vec::with_capacity(n_cap.saturating_sub(1));
    for exit in 1..n_cap {
        let mut vals: Vec<f64> = deltas.iter().map(|row| row[exit - 1]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((vals.len() as f64 * 0.99) as usize).min(vals.len().saturating_sub(1));
        bounds.push(vals[idx].max(1e-9));
    }
    bounds
}

/// Measure one threshold vector: Scc over evaluation chains plus
/// constraint feasibility.
#[allow(clippy::too_many_arguments)]
pub fn objective_on_chains(
    model: &InferModel<f32>,
    env: &EnvConfig,
    splits: &[Split],
    tv: deer_core::policy::ThresholdVector,
    budget: &BudgetSpec,
    cost: &CostModel,
    n_cap: usize,
    n_chains: usize,
    seed: u64,
) -> ObjectiveSample {
    let criterion = Criterion::ActionConsistency(tv);
    let mut policy = DeerPolicy::new(model, env.clone(), criterion);
    let metrics = evaluate_chains(env, &mut policy, splits, n_chains, seed);
    let report = budget::verify_constraints(&metrics, budget, cost, n_cap);
    ObjectiveSample {
        scc: metrics.avg_successful_len / 5.0,
        avg_flops: report.mean_backbone_flops,
        peak_flops: report.peak_backbone_flops as f64,
        mem_gb: report.mem_gb,
        feasible: report.all_ok(),
    }
}

// ── eval ────────────────────────────────────────────────────────────

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CmdError> {
    let checkpoint = cfg.path_required("checkpoint")?;
    let out = cfg.path_required("out")?;
    let chains = cfg.parse_or("chains", 100usize)?;
    let seed = cfg.master_seed(0)?;
    let splits = parse_splits(cfg)?;
    let log_episodes = cfg.parse_or("log_episodes", 5usize)?;
    let label = cfg.str_or("label", "run");

    let (net, _) = load_checkpoint(&checkpoint).map_err(|e| CmdError::Other(e.to_string()))?;
    let cost = CostModel::analytic(&net.cfg);

    let static_exit = cfg.parse_opt::<usize>("static_exit")?;
    let thresholds_path = cfg.str_opt("thresholds");
    let criterion = match (static_exit, thresholds_path) {
        (Some(k), None) => {
            if k < 1 || k > net.cfg.n_exits {
                return Err(CmdError::Usage(format!(
                    "--static-exit {k} out of range 1..={}",
                    net.cfg.n_exits
                )));
            }
            Criterion::TimeProgressive { schedule: vec![k], n_cap: k }
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path)?;
            let (criterion, hash) = criterion_from_json(&text).map_err(CmdError::Other)?;
            if !hash.is_empty() && hash != cost.hash() {
                eprintln!(
                    "warning: thresholds were calibrated against a different cost model \
                     ({hash} vs {})",
                    cost.hash()
                );
            }
            criterion
        }
        (None, None) => {
            return Err(CmdError::Usage(
                "provide --thresholds FILE or --static-exit K".to_string(),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(CmdError::Usage(
                "--thresholds and --static-exit are mutually exclusive".to_string(),
            ))
        }
    };

    let budget = if cfg.str_opt("avg_gflops").is_some() || cfg.str_opt("total_gflops").is_some() {
        Some(budget_from(cfg, 1.0)?)
    } else {
        let _ = cfg.parse_or("peak_gflops", f64::INFINITY)?;
        let _ = cfg.parse_or("mem_gb", f64::INFINITY)?;
        None
    };
    cfg.reject_unknown()?;

    std::fs::create_dir_all(&out)?;
    let env = EnvConfig::default();
    let model: InferModel<f32> = InferModel::from_net(&net);
    let mut policy = DeerPolicy::new(&model, env.clone(), criterion.clone());
    policy.record_wall_time = true;
    let metrics = evaluate_chains(&env, &mut policy, &splits, chains, seed);
    let n_cap = criterion.n_cap();

    let mut doc = serde_json::json!({
        "label": label,
        "criterion": criterion.kind_name(),
        "n_cap": n_cap,
        "n_chains": metrics.n_chains,
        "avg_successful_len": metrics.avg_successful_len,
        "subtask_rates": metrics.subtask_rates.to_vec(),
        "exit_histogram": metrics.exit_histogram,
        "total_steps": metrics.total_steps,
        "mean_backbone_gflops": metrics.mean_backbone_flops / 1e9,
        "mean_head_gflops": metrics.mean_head_flops / 1e9,
        "peak_backbone_gflops": metrics.peak_backbone_flops as f64 / 1e9,
        "peak_step_gflops": metrics.peak_step_flops as f64 / 1e9,
        "mem_gb": cost.mem(n_cap),
        "wall_ms_per_action": metrics.total_wall_ns as f64 / metrics.total_steps.max(1) as f64 / 1e6,
    });
    if let Some(budget) = budget {
        let report = budget::verify_constraints(&metrics, &budget, &cost, n_cap);
        doc["constraints"] = serde_json::to_value(&report).map_err(|e| CmdError::Other(e.to_string()))?;
    }
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&doc).unwrap())?;

    // detailed step logs for a handful of fresh tasks
    let mut log_file = std::fs::File::create(out.join("episodes.jsonl"))?;
    for k in 0..log_episodes {
        let mut rng = deer_core::rng::Rng::stream(seed, "eval-log", &[k as u64]);
        let split = splits[k % splits.len()];
        let (world, instructions) = sample_chain(&env, split, &mut rng);
        let mut task = TaskEnv::new(env.clone(), world, instructions[0].clone());
        let log = run_episode(&model, &mut task, &criterion);
        write_episode_log(&mut log_file, &log)?;
    }
    cfg.write_snapshot(&out.join("resolved.config"), &[("seed", seed.to_string())])?;
    println!(
        "avg successful length {:.3} at {:.3} mean backbone GFLOPs/step over {} chains",
        metrics.avg_successful_len,
        metrics.mean_backbone_flops / 1e9,
        chains
    );
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────

pub fn cmd_report(cfg: &RunConfig) -> Result<(), CmdError> {
    let inputs = cfg.required("inputs")?;
    let out = cfg.path_required("out")?;
    cfg.reject_unknown()?;

    let mut rows: Vec<serde_json::Value> = Vec::new();
    for path in inputs.split(',') {
        let text = std::fs::read_to_string(path.trim())?;
        rows.push(serde_json::from_str(&text).map_err(|e| CmdError::Other(e.to_string()))?);
    }
    rows.sort_by(|a, b| {
        let fa = a["mean_backbone_gflops"].as_f64().unwrap_or(f64::MAX);
        let fb = b["mean_backbone_gflops"].as_f64().unwrap_or(f64::MAX);
        fa.partial_cmp(&fb).unwrap()
    });

    let mut csv = String::from("label,avg_flops,peak_flops,mem,avg_len,succ_1,succ_2,succ_3,succ_4,succ_5\n");
    for r in &rows {
        let rates = r["subtask_rates"].as_array().cloned().unwrap_or_default();
        let rate = |i: usize| rates.get(i).and_then(|v| v.as_f64()).unwrap_or(0.0);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r["label"].as_str().unwrap_or("?"),
            r["mean_backbone_gflops"].as_f64().unwrap_or(0.0),
            r["peak_backbone_gflops"].as_f64().unwrap_or(0.0),
            r["mem_gb"].as_f64().unwrap_or(0.0),
            r["avg_successful_len"].as_f64().unwrap_or(0.0),
            rate(0),
            rate(1),
            rate(2),
            rate(3),
            rate(4),
        ));
    }
    let csv_path = PathBuf::from(format!("{}.csv", out.display()));
    std::fs::write(&csv_path, &csv)?;

    let mut md = String::from(
        "| label | criterion | avg GFLOPs | peak GFLOPs | mem GB | avg len | exits |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        let hist = r["exit_histogram"]
            .as_array()
            .map(|a| {
                a.iter()
                    .enumerate()
                    .skip(1)
                    .map(|(i, v)| format!("{i}:{}", v.as_u64().unwrap_or(0)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .unwrap_or_default();
        md.push_str(&format!(
            "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |\n",
            r["label"].as_str().unwrap_or("?"),
            r["criterion"].as_str().unwrap_or("?"),
            r["mean_backbone_gflops"].as_f64().unwrap_or(0.0),
            r["peak_backbone_gflops"].as_f64().unwrap_or(0.0),
            r["mem_gb"].as_f64().unwrap_or(0.0),
            r["avg_successful_len"].as_f64().unwrap_or(0.0),
            hist,
        ));
    }
    let md_path = PathBuf::from(format!("{}.md", out.display()));
    std::fs::write(&md_path, &md)?;
    println!("wrote {} and {}", csv_path.display(), md_path.display());
    Ok(())
}
