//! `deer`: dataset generation, training, threshold calibration,
//! evaluation, and report merging for the dynamic early-exit policy.
//!
//! Exit codes: 0 success, 1 usage error, 2 infeasible budget, 3 numeric
//! failure.

mod commands;
mod config;

use commands::CmdError;
use config::RunConfig;

const USAGE: &str = "usage: deer <command> [--key value]... [--config FILE]

commands:
  gen-data   --out PATH [--episodes N] [--splits ABCD] [--seed S]
  train      --data PATH --out DIR [--no-aux] [--resume] [--seed S]
             [--epochs-joint N] [--epochs-post N] [--batch N] [--window H]
             [--lambda X] [--lr-backbone X] [--lr-head X] [--n-exits N]
             [--d-model N] [--windows-per-epoch N] [--val-fraction F] ...
  calibrate  --checkpoint PATH --data PATH --out PATH --avg-gflops X
             [--peak-gflops X] [--mem-gb X] [--mode dataset|online]
             [--criterion action|feature|time] [--delta-dump PATH]
             [--bo-evals N] [--bo-chains N] [--calib-source val|train1pct]
  eval       --checkpoint PATH --out DIR (--thresholds PATH | --static-exit K)
             [--chains N] [--splits ABCD] [--seed S] [--label NAME]
             [--avg-gflops X [--peak-gflops X] [--mem-gb X]]
  report     --inputs a.json,b.json,... --out PREFIX

The environment variable DEER_SEED overrides --seed everywhere.
";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        std::process::exit(1);
    };
    let rest = &args[1..];
    let result = RunConfig::from_args(rest)
        .map_err(CmdError::from)
        .and_then(|cfg| match command.as_str() {
            "gen-data" => commands::cmd_gen_data(&cfg),
            "train" => commands::cmd_train(&cfg),
            "calibrate" => commands::cmd_calibrate(&cfg),
            "eval" => commands::cmd_eval(&cfg),
            "report" => commands::cmd_report(&cfg),
            other => Err(CmdError::Usage(format!("unknown command '{other}'"))),
        });
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        if matches!(e, CmdError::Usage(_)) {
            eprint!("{USAGE}");
        }
        std::process::exit(e.exit_code());
    }
}
