//! Argument parsing and dispatch for the `loco` binary.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use loco_core::evalsuite::{Sweep, DEFAULT_SEEDS};

use crate::commands::{self, AblateOptions, Labeled, Progress};
use crate::rundir::{default_root, resolve_out, RunDir};

#[derive(Debug, Parser)]
#[command(name = "loco", version, about = "Train and evaluate teacher-aligned locomotion policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config; variant presets and defaults fill the rest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` applied after the config file, e.g. `ppo.gamma=0.98`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to `$LOCO_RUNS_DIR/<variant>/seed_<k>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the interrupted run in this directory.
        #[arg(long, value_name = "RUN_DIR", conflicts_with_all = ["config", "overrides", "seed", "out"])]
        resume: Option<PathBuf>,
        /// Progress line every N iterations (0 = silent).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate checkpoints on scenario grids and write one JSON document.
    Eval {
        /// `label=path` or a bare path; repeat for several methods.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Scenario file with one or more `[[scenario]]` tables; repeatable.
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Continue a privileged checkpoint in privilege-free mode.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Record student latents over a single-factor sweep as CSV.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML file with a `[sweep]` table.
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long, default_value = "latents.csv")]
        out: PathBuf,
    },
    /// Train the variant x seed matrix, optionally evaluating the results.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = ["tar".to_string(), "no_priv".into(), "random_negative".into(), "teacher".into()])]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        /// Matrix root; defaults to `$LOCO_RUNS_DIR/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Independent runs trained at once.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Evaluate final checkpoints on these scenario files.
        #[arg(long = "scenario")]
        scenarios: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        eval_seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
}

/// Execute a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, out, resume, log_every } => {
            if let Some(dir) = resume {
                let dir = RunDir::new(dir);
                let label = dir.path.display().to_string();
                let c = commands::resume(&dir, &Progress { log_every, label })?;
                println!("{}", dir.checkpoints().join(c.final_checkpoint).display());
                return Ok(0);
            }
            let cfg = commands::load_config(config.config.as_deref(), &config.overrides, config.seed)?;
            let dir = RunDir::new(resolve_out(out.as_deref(), &cfg));
            let label = format!("{}/seed_{}", cfg.variant, cfg.seed);
            let c = commands::train(cfg, &dir, &Progress { log_every, label })?;
            println!("{}", dir.checkpoints().join(c.final_checkpoint).display());
            Ok(0)
        }
        Command::Eval { checkpoints, scenarios, seeds, out, workers } => {
            let cks: Vec<Labeled> = checkpoints.iter().map(|s| Labeled::parse(s)).collect();
            for c in &cks {
                if !c.path.is_file() {
                    bail!("checkpoint {} does not exist", c.path.display());
                }
            }
            let scenarios = commands::load_scenarios(&scenarios)?;
            let doc = commands::evaluate(&cks, &scenarios, &seeds, workers)?;
            std::fs::write(&out, doc.to_json()).with_context(|| format!("cannot write {}", out.display()))?;
            for s in &doc.combined {
                for (label, score) in &s.scores {
                    println!("{}\t{label}\t{score:.4}", s.scenario);
                }
            }
            let faults = commands::faults(&doc);
            if faults > 0 {
                eprintln!("{faults} agent fault(s) during evaluation; see {}", out.display());
                return Ok(2);
            }
            Ok(0)
        }
        Command::Finetune { checkpoint, config, out, log_every } => {
            let dir = RunDir::new(out);
            let progress = Progress { log_every, label: dir.path.display().to_string() };
            let c = commands::finetune(
                &checkpoint,
                config.config.as_deref(),
                &config.overrides,
                config.seed,
                &dir,
                &progress,
            )?;
            println!("{}", dir.checkpoints().join(c.final_checkpoint).display());
            Ok(0)
        }
        Command::ExportLatents { checkpoint, sweep, out } => {
            let text = std::fs::read_to_string(&sweep).with_context(|| format!("cannot read {}", sweep.display()))?;
            let sweep = Sweep::parse(&text)?;
            let table = commands::latents(&checkpoint, &sweep)?;
            let f = std::fs::File::create(&out).with_context(|| format!("cannot write {}", out.display()))?;
            table.write_csv(f)?;
            println!("{} rows -> {}", table.rows.len(), out.display());
            Ok(0)
        }
        Command::Ablate { config, overrides, variants, seeds, out, workers, scenarios, eval_seeds, log_every } => {
            let opts = AblateOptions {
                config,
                overrides,
                variants,
                seeds,
                root: out.unwrap_or_else(|| default_root().join("ablation")),
                workers,
                log_every,
                scenarios: if scenarios.is_empty() { Vec::new() } else { commands::load_scenarios(&scenarios)? },
                eval_seeds,
            };
            let s = commands::ablate(&opts)?;
            for r in &s.runs {
                println!("{}", opts.root.join(&r.final_checkpoint).display());
            }
            if let Some(e) = &s.eval {
                println!("{}", opts.root.join(e).display());
            }
            Ok(0)
        }
    }
}
