//! `tpflex`: run tensor-parallel straggler-balancing experiments in the
//! deterministic virtual-cost simulator.
//!
//! Exit codes: 0 success, 1 configuration error, 2 invariant-audit failure.
//! Set `TPFLEX_LOG` (error|warn|info|debug|trace) for logging verbosity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpflex_core::harness::audit::run_audit;
use tpflex_core::harness::config::{load_config, ExperimentConfig, HeterogeneityProfile};
use tpflex_core::harness::experiment::run_experiment;
use tpflex_core::harness::metrics::emit_metrics;
use tpflex_core::semi::{pretest_costs, PretestDims};
use tpflex_core::{CollectiveEngine, TaskCtx};

#[derive(Parser)]
#[command(name = "tpflex", version, about = "Tensor-parallel workload-balancing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv + summary.json.
    Run(RunArgs),
    /// Fit and print the resize/migration cost functions for a config.
    Pretest(ConfigOnly),
    /// Run the built-in invariant suites against a config.
    Audit(ConfigOnly),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override the balancing mode
    /// (baseline|zero-rd|zero-pri|zero-pridiff-e|zero-pridiff-r|mig|semi).
    #[arg(long)]
    mode: Option<String>,
    /// Override the RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Straggler skew override: one value (round-robin straggler) or a
    /// comma-separated list assigning ranks 1..k statically, e.g. "8,6,4,2".
    #[arg(long)]
    chi: Option<String>,
    /// Force the hybrid migration-group size (the manual sweep knob).
    #[arg(long)]
    lambda: Option<usize>,
    /// Output directory for metrics.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigOnly {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
}

fn parse_chi(spec: &str, e: usize) -> Result<HeterogeneityProfile, String> {
    let values: Result<Vec<f64>, _> = spec.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let values = values.map_err(|e| format!("bad --chi value: {e}"))?;
    if values.is_empty() || values.iter().any(|&c| c < 1.0) {
        return Err("--chi values must be >= 1".into());
    }
    Ok(if values.len() == 1 {
        HeterogeneityProfile::round_robin(values[0], e)
    } else {
        HeterogeneityProfile::fixed(&values)
    })
}

fn apply_overrides(mut cfg: ExperimentConfig, args: &RunArgs) -> Result<ExperimentConfig, String> {
    if let Some(mode) = &args.mode {
        cfg.mode = serde_json::from_value(serde_json::Value::String(mode.clone()))
            .map_err(|_| format!("unknown mode {mode}"))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(chi) = &args.chi {
        cfg.heterogeneity = parse_chi(chi, cfg.model.e)?;
    }
    if let Some(lambda) = args.lambda {
        cfg.semi.forced_lambda = Some(lambda);
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args.config).map_err(|e| e.to_string()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let cfg = match apply_overrides(cfg, &args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    log::info!("running mode={} e={} epochs={} iterations={} seed={}",
        cfg.mode.as_str(), cfg.model.e, cfg.epochs, cfg.iterations, cfg.seed);
    let artifacts = match run_experiment(&cfg) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("experiment failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    for ep in &artifacts.summary.epochs {
        println!(
            "epoch {:>3}: rt {:>12.3}  loss {:.4}  acc {:.4}  lambda {}  nu {}",
            ep.epoch, ep.rt, ep.loss, ep.acc, ep.lambda, ep.nu
        );
    }
    println!(
        "total rt {:.3}, final acc {:.4}",
        artifacts.summary.total_rt, artifacts.summary.final_acc
    );
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match emit_metrics(&artifacts.rows, &artifacts.summary, &out) {
        Ok((csv, json)) => {
            println!("wrote {} and {}", csv.display(), json.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("metrics emission failed: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_pretest(args: ConfigOnly) -> ExitCode {
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let e = cfg.model.e;
    let engine = CollectiveEngine::new(e, cfg.cost);
    let models: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (1..=e)
            .map(|r| {
                let engine = std::sync::Arc::clone(&engine);
                let cfg = &cfg;
                s.spawn(move || {
                    let mut ctx = TaskCtx::new(engine.group(r));
                    pretest_costs(
                        PretestDims::from_model(&cfg.model),
                        &cfg.semi.sample_gammas,
                        cfg.migration.collection,
                        cfg.migration.family,
                        &mut ctx,
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    match models.into_iter().next().unwrap() {
        Ok(cm) => {
            println!("{}", serde_json::to_string_pretty(&cm).unwrap());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pretest failed: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_audit(args: ConfigOnly) -> ExitCode {
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let checks = run_audit(&cfg);
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {:<26} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", checks.len());
        ExitCode::from(2)
    } else {
        println!("all {} checks passed", checks.len());
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TPFLEX_LOG")).init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Pretest(args) => cmd_pretest(args),
        Command::Audit(args) => cmd_audit(args),
    }
}
