//! End-to-end command tests driving the compiled `deer` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn deer() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deer"))
}

fn run(args: &[&str]) -> Output {
    deer().args(args).output().expect("spawn deer")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

struct Fixture {
    dir: PathBuf,
    data: PathBuf,
    train_dir: PathBuf,
    checkpoint: PathBuf,
}

/// One tiny dataset + trained checkpoint shared by the tests.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("deer_cli_fixture_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let data = dir.join("data.jsonl");
        assert_ok(&run(&[
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--episodes",
            "120",
            "--splits",
            "ABCD",
            "--seed",
            "5",
        ]));
        let train_dir = dir.join("train");
        assert_ok(&run_strs(&tiny_train_args(&data, &train_dir, &[])));
        let checkpoint = train_dir.join("checkpoint_final.json");
        assert!(checkpoint.exists());
        Fixture { dir, data, train_dir, checkpoint }
    })
}

fn tiny_train_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--n-exits",
        "2",
        "--blocks-per-exit",
        "1",
        "--d-model",
        "12",
        "--block-mlp-hidden",
        "12",
        "--lstm-layers",
        "1",
        "--lstm-hidden",
        "12",
        "--mlp-hidden",
        "12",
        "--batch",
        "2",
        "--window",
        "6",
        "--epochs-joint",
        "1",
        "--epochs-post",
        "1",
        "--windows-per-epoch",
        "6",
        "--lstm-dropout",
        "0",
        "--mlp-dropout",
        "0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_strs(args: &[String]) -> Output {
    deer().args(args).output().expect("spawn deer")
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let out = run(&["explode"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_requires_out() {
    let out = run(&["gen-data", "--episodes", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = std::env::temp_dir().join(format!("deer_unknown_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        dir.join("d.jsonl").to_str().unwrap(),
        "--episodes",
        "2",
        "--bogus-knob",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_knob"));
}

#[test]
fn gen_data_is_deterministic_and_seed_sensitive() {
    let dir = std::env::temp_dir().join(format!("deer_gen_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let a = dir.join("a.jsonl");
    let b = dir.join("b.jsonl");
    let c = dir.join("c.jsonl");
    for (path, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        assert_ok(&run(&[
            "gen-data",
            "--out",
            path.to_str().unwrap(),
            "--episodes",
            "6",
            "--seed",
            seed,
        ]));
    }
    assert_eq!(read(&a), read(&b), "same flags must give identical bytes");
    assert_ne!(read(&a), read(&c));
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&dir.join("a.manifest.json"))).unwrap();
    assert_eq!(manifest["n_episodes"], 6);
    assert!(manifest["mean_len"].as_f64().unwrap() > 0.0);
    assert!(dir.join("a.config").exists(), "resolved-config snapshot missing");
}

#[test]
fn deer_seed_env_overrides_the_flag() {
    let dir = std::env::temp_dir().join(format!("deer_env_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let a = dir.join("a.jsonl");
    let b = dir.join("b.jsonl");
    assert_ok(&run(&[
        "gen-data",
        "--out",
        a.to_str().unwrap(),
        "--episodes",
        "4",
        "--seed",
        "77",
    ]));
    let out = deer()
        .args(["gen-data", "--out", b.to_str().unwrap(), "--episodes", "4", "--seed", "0"])
        .env("DEER_SEED", "77")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(read(&a), read(&b));
}

#[test]
fn train_is_deterministic_and_no_aux_zeroes_the_aux_column() {
    let fix = fixture();
    let dir2 = fix.dir.join("train_repeat");
    assert_ok(&run_strs(&tiny_train_args(&fix.data, &dir2, &[])));
    assert_eq!(
        read(&fix.checkpoint),
        read(&dir2.join("checkpoint_final.json")),
        "same seed must reproduce the checkpoint"
    );

    let dir3 = fix.dir.join("train_noaux");
    assert_ok(&run_strs(&tiny_train_args(&fix.data, &dir3, &["--no-aux"])));
    let log = read(&dir3.join("train_log.csv"));
    let mut lines = log.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, "epoch,phase,step,loss_total,loss_seq,loss_aux,grad_norm");
    for line in lines {
        let aux: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert_eq!(aux, 0.0, "loss_aux must be identically zero under --no-aux");
    }
}

#[test]
fn interrupted_training_resumes_to_the_identical_end_state() {
    let fix = fixture();
    let resumed = fix.dir.join("train_resumed");
    assert_ok(&run_strs(&tiny_train_args(&fix.data, &resumed, &[])));
    // emulate an interruption after epoch 0: drop everything later
    std::fs::remove_file(resumed.join("checkpoint_final.json")).unwrap();
    std::fs::remove_file(resumed.join("checkpoint_epoch1.json")).unwrap();
    std::fs::remove_file(resumed.join("trainstate_epoch1.json")).unwrap();
    assert_ok(&run_strs(&tiny_train_args(&fix.data, &resumed, &["--resume"])));
    assert_eq!(
        read(&fix.checkpoint),
        read(&resumed.join("checkpoint_final.json")),
        "resumed run must reproduce the uninterrupted checkpoint"
    );
}

#[test]
fn calibrate_offline_is_deterministic_and_writes_dumps() {
    let fix = fixture();
    let th1 = fix.dir.join("th1.json");
    let th2 = fix.dir.join("th2.json");
    for th in [&th1, &th2] {
        assert_ok(&run(&[
            "calibrate",
            "--checkpoint",
            fix.checkpoint.to_str().unwrap(),
            "--data",
            fix.data.to_str().unwrap(),
            "--out",
            th.to_str().unwrap(),
            "--avg-gflops",
            "0.002",
            "--delta-dump",
            fix.dir.join("deltas.csv").to_str().unwrap(),
            "--seed",
            "4",
        ]));
    }
    assert_eq!(read(&th1), read(&th2));
    let v: serde_json::Value = serde_json::from_str(&read(&th1)).unwrap();
    assert_eq!(v["criterion"], "action");
    assert!(v["n_cap"].as_u64().unwrap() >= 1);
    let dump = read(&fix.dir.join("deltas.csv"));
    assert!(dump.starts_with("sample_id,exit,delta"));
}

#[test]
fn calibrate_peak_below_first_exit_is_infeasible_exit_code_2() {
    let fix = fixture();
    let out = run(&[
        "calibrate",
        "--checkpoint",
        fix.checkpoint.to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        fix.dir.join("bad.json").to_str().unwrap(),
        "--avg-gflops",
        "0.002",
        "--peak-gflops",
        "0.0000001",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("C_1"), "error should name C_1: {msg}");
}

#[test]
fn eval_static_exit_gives_point_mass_histogram() {
    let fix = fixture();
    let out_dir = fix.dir.join("eval_static");
    assert_ok(&run(&[
        "eval",
        "--checkpoint",
        fix.checkpoint.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--static-exit",
        "2",
        "--chains",
        "4",
        "--seed",
        "11",
        "--label",
        "static2",
    ]));
    let m: serde_json::Value = serde_json::from_str(&read(&out_dir.join("metrics.json"))).unwrap();
    let avg = m["avg_successful_len"].as_f64().unwrap();
    assert!((0.0..=5.0).contains(&avg));
    assert!(m["wall_ms_per_action"].as_f64().unwrap() >= 0.0);
    let hist: Vec<u64> = m["exit_histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let total: u64 = hist.iter().sum();
    assert!(total > 0);
    assert_eq!(hist[2], total, "all steps must exit at 2: {hist:?}");
    assert!(out_dir.join("episodes.jsonl").exists());
}

#[test]
fn eval_requires_exactly_one_criterion_source() {
    let fix = fixture();
    let out = run(&[
        "eval",
        "--checkpoint",
        fix.checkpoint.to_str().unwrap(),
        "--out",
        fix.dir.join("eval_none").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_merges_runs_sorted_by_average_flops() {
    let fix = fixture();
    let e1 = fix.dir.join("eval_r1");
    let e2 = fix.dir.join("eval_r2");
    for (dir, exit, label) in [(&e1, "2", "deep"), (&e2, "1", "shallow")] {
        assert_ok(&run(&[
            "eval",
            "--checkpoint",
            fix.checkpoint.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--static-exit",
            exit,
            "--chains",
            "3",
            "--seed",
            "13",
            "--label",
            label,
        ]));
    }
    let prefix = fix.dir.join("report");
    assert_ok(&run(&[
        "report",
        "--inputs",
        &format!(
            "{},{}",
            e1.join("metrics.json").display(),
            e2.join("metrics.json").display()
        ),
        "--out",
        prefix.to_str().unwrap(),
    ]));
    let csv = read(&PathBuf::from(format!("{}.csv", prefix.display())));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "label,avg_flops,peak_flops,mem,avg_len,succ_1,succ_2,succ_3,succ_4,succ_5"
    );
    let first = lines.next().unwrap();
    assert!(first.starts_with("shallow,"), "rows must sort by avg flops: {first}");

    // a single-run report reproduces that run's metrics verbatim
    let solo = fix.dir.join("solo");
    assert_ok(&run(&[
        "report",
        "--inputs",
        e1.join("metrics.json").to_str().unwrap(),
        "--out",
        solo.to_str().unwrap(),
    ]));
    let m: serde_json::Value = serde_json::from_str(&read(&e1.join("metrics.json"))).unwrap();
    let csv = read(&PathBuf::from(format!("{}.csv", solo.display())));
    let row = csv.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(cols[0], "deep");
    assert_eq!(
        cols[1].parse::<f64>().unwrap(),
        m["mean_backbone_gflops"].as_f64().unwrap()
    );
    assert_eq!(
        cols[4].parse::<f64>().unwrap(),
        m["avg_successful_len"].as_f64().unwrap()
    );
}
