use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dsva_core::club::{club_bench_row, ClubBenchConfig};
use dsva_core::gradsuite::gradient_suite;
use dsva_core::harness::{evaluate_checkpoint, load_dataset, run_phase1, run_phase2, RunConfig, PHASE1_CKPT};
use dsva_core::synthdata::generate_dataset;
use dsva_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dsva", version, about = "Decoupled text/visual prompting on synthetic scenes")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set phase1.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset at `data.path`.
    GenData,
    /// Phase 1: text pre-training.
    PretrainText,
    /// Phase 2: decoupling with the text decoder frozen.
    TrainDecouple {
        /// Phase-1 checkpoint; defaults to `<run.out_dir>/phase1.ckpt`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write fused mask probabilities as PGM files into this directory.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        /// Self-feedback iterations; overrides `eval.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Fit CLUB on correlated Gaussian pairs and compare with the true MI.
    ClubBench {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 4000)]
        fit_steps: usize,
    },
    /// Finite-difference check of every differentiable op and component.
    GradCheck,
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_else(|e| format!("unserialisable: {e}"))
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => {
            let d = &cfg.data;
            let (ds, _) = generate_dataset(cfg.run.seed, d.scenes, &d.generation, &d.factors)?;
            if let Some(dir) = d.path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            ds.write(&d.path)?;
            println!("wrote {} scenes to {}", ds.len(), d.path.display());
        }
        Command::PretrainText => {
            let rec = run_phase1(&cfg)?;
            println!("{}", json(&rec.final_eval));
            println!("checkpoint {}", rec.checkpoint.display());
        }
        Command::TrainDecouple { init } => {
            let init = init.unwrap_or_else(|| cfg.run.out_dir.join(PHASE1_CKPT));
            std::fs::metadata(&init).map_err(|e| Error::io(&init, e))?;
            let rec = run_phase2(&cfg, &init)?;
            println!("{}", json(&rec.final_eval));
            println!(
                "text decoder checksum {:08x} -> {:08x}",
                rec.text_decoder_checksum.0, rec.text_decoder_checksum.1
            );
            println!("checkpoint {}", rec.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dump_masks,
            iterations,
        } => {
            std::fs::metadata(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
            if let Some(t) = iterations {
                cfg.eval.iterations = t;
            }
            let ds = load_dataset(&cfg)?;
            let report = evaluate_checkpoint(&cfg, &ds, &checkpoint, dump_masks.as_deref())?;
            println!("{}", json(&report));
        }
        Command::ClubBench { samples, fit_steps } => {
            let bench = ClubBenchConfig {
                samples,
                fit_steps,
                seed: cfg.run.seed,
                ..Default::default()
            };
            println!("{:>5} {:>9} {:>14} {:>9} {:>5}", "rho", "true_mi", "analytic_club", "estimate", "pass");
            let mut all = true;
            for rho in [0.0, 0.5, 0.9] {
                let row = club_bench_row(rho, &bench)?;
                all &= row.pass;
                println!(
                    "{:>5.2} {:>9.4} {:>14.4} {:>9.4} {:>5}",
                    row.rho, row.true_mi, row.analytic_club, row.estimate, row.pass
                );
            }
            return Ok(all);
        }
        Command::GradCheck => {
            let mut all = true;
            for rep in gradient_suite()? {
                all &= rep.passed;
                let checked: usize = rep.entries.iter().map(|e| e.checked).sum();
                println!(
                    "{} {:<48} max_rel_err {:.2e} over {checked} coordinates",
                    if rep.passed { "PASS" } else { "FAIL" },
                    rep.name,
                    rep.max_rel_err()
                );
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

