//! Command implementations, callable from the binary and from tests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use loco_core::checkpoint::Checkpoint;
use loco_core::config::RunConfig;
use loco_core::evalsuite::{
    ablation_matrix, export_latents, run_scenario, AblationRun, EvalDocument, LatentTable, MethodEval, Policy,
    Scenario, Sweep,
};
use loco_core::trainer::{IterationMetrics, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rundir::{checkpoint_name, MetricsWriter, RunComplete, RunDir, RunInfo};

/// Stored precision of training and checkpoints.
pub type Float = f32;

/// Print a progress line every `log_every` iterations; 0 is silent.
#[derive(Clone, Debug, Default)]
pub struct Progress {
    pub log_every: usize,
    pub label: String,
}

impl Progress {
    fn report(&self, m: &IterationMetrics) {
        if self.log_every > 0 && m.iteration.is_multiple_of(self.log_every) {
            eprintln!(
                "[{}] it {:>6} reward {:.3} len {:.0} level {:.2} triplet {:.4} kl {:.4} lr {:.2e} metric {:.3}",
                self.label,
                m.iteration,
                m.mean_reward,
                m.episode_length,
                m.terrain_level,
                m.loss_triplet,
                m.kl,
                m.lr,
                m.train_metric
            );
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Resolve a run config from an optional file, `key=value` overrides and an
/// optional seed, which is applied last.
pub fn load_config(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let doc = match config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut o = overrides.to_vec();
    if let Some(s) = seed {
        o.push(format!("seed={s}"));
    }
    Ok(RunConfig::parse(&doc, &o)?)
}

fn drive(mut t: Trainer<Float>, dir: &RunDir, mut w: MetricsWriter, progress: &Progress) -> Result<RunComplete> {
    let start = Instant::now();
    let total = t.cfg.iterations as u64;
    let every = t.cfg.checkpoint_every as u64;
    while (t.iteration as u64) < total {
        let m = t.train_iteration()?;
        w.write(&m)?;
        progress.report(&m);
        let done = t.iteration as u64;
        if done.is_multiple_of(every) || done == total {
            t.checkpoint()?.save(&dir.checkpoint(done))?;
        }
    }
    let c = RunComplete {
        iterations: total,
        final_checkpoint: checkpoint_name(total),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    dir.mark_complete(&c)?;
    Ok(c)
}

/// Train a fresh run into `dir`.
pub fn train(cfg: RunConfig, dir: &RunDir, progress: &Progress) -> Result<RunComplete> {
    let info = RunInfo::new(&cfg);
    let t = Trainer::<Float>::new(cfg.clone())?;
    dir.create(&cfg, &info)?;
    let w = MetricsWriter::create(&dir.metrics())?;
    drive(t, dir, w, progress)
}

/// Continue an interrupted run from its latest checkpoint. Metrics rows
/// written after that checkpoint are dropped and regenerated.
pub fn resume(dir: &RunDir, progress: &Progress) -> Result<RunComplete> {
    if dir.is_complete() {
        return dir.read_complete();
    }
    let Some(path) = dir.latest_checkpoint()? else {
        bail!("{} has no checkpoint to resume from", dir.path.display());
    };
    let ck = Checkpoint::<Float>::load(&path)?;
    let t = Trainer::<Float>::resume(ck)?;
    let w = MetricsWriter::reopen(&dir.metrics(), t.iteration as u64)?;
    drive(t, dir, w, progress)
}

/// Train, resume or skip depending on what `dir` already holds. A run
/// directory whose config differs from `cfg` is an error.
pub fn train_or_resume(cfg: RunConfig, dir: &RunDir, progress: &Progress) -> Result<RunComplete> {
    if !dir.config().exists() {
        return train(cfg, dir, progress);
    }
    let existing = RunConfig::parse(&read_text(&dir.config())?, &[])?;
    if existing != cfg {
        bail!("{} holds a run with a different config", dir.path.display());
    }
    if dir.latest_checkpoint()?.is_none() {
        std::fs::remove_dir_all(&dir.path)?;
        return train(cfg, dir, progress);
    }
    resume(dir, progress)
}

/// Privilege-free fine-tuning of a privileged checkpoint. The fine-tuning
/// config starts from the checkpoint's own config unless `config` is given.
pub fn finetune(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    dir: &RunDir,
    progress: &Progress,
) -> Result<RunComplete> {
    let ck = Checkpoint::<Float>::load(checkpoint)?;
    let doc = match config {
        Some(p) => read_text(p)?,
        None => ck.config_toml.clone(),
    };
    let mut o: Vec<String> = ["mode=\"privilege_free\"", "triplet.strategy=\"privilege_free\"", "model.teacher=false"]
        .map(String::from)
        .to_vec();
    o.extend_from_slice(overrides);
    if let Some(s) = seed {
        o.push(format!("seed={s}"));
    }
    let cfg = RunConfig::parse(&doc, &o)?;
    let t = Trainer::<Float>::finetune(ck, cfg)?;
    let mut info = RunInfo::new(&t.cfg);
    info.parent_checkpoint = Some(checkpoint.display().to_string());
    dir.create(&t.cfg, &info)?;
    let w = MetricsWriter::create(&dir.metrics())?;
    drive(t, dir, w, progress)
}

/// A checkpoint to evaluate under a label.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub label: String,
    pub path: PathBuf,
}

impl Labeled {
    /// `label=path`, or a bare path labeled by its run directory.
    pub fn parse(s: &str) -> Self {
        if let Some((l, p)) = s.split_once('=') {
            if !l.is_empty() && !l.contains(std::path::MAIN_SEPARATOR) {
                return Self { label: l.into(), path: p.into() };
            }
        }
        let path = PathBuf::from(s);
        Self { label: default_label(&path), path }
    }
}

fn default_label(path: &Path) -> String {
    // <run>/checkpoints/ckpt_X.bin -> <run name>@ckpt_X
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let run = path.parent().filter(|p| p.ends_with("checkpoints")).and_then(Path::parent);
    match run {
        Some(r) => {
            let parts: Vec<String> =
                r.components().rev().take(2).map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            format!("{}@{stem}", parts.into_iter().rev().collect::<Vec<_>>().join("/"))
        }
        None => path.display().to_string(),
    }
}

pub fn load_scenarios(paths: &[PathBuf]) -> Result<Vec<Scenario>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(Scenario::parse_file(&read_text(p)?).with_context(|| format!("in {}", p.display()))?);
    }
    if all.is_empty() {
        bail!("no scenario given");
    }
    Ok(all)
}

fn eval_one(c: &Labeled, scenarios: &[Scenario], seeds: &[u64]) -> Result<MethodEval> {
    if !c.path.is_file() {
        bail!("checkpoint {} does not exist", c.path.display());
    }
    let ck = Checkpoint::<Float>::load(&c.path)?;
    let policy = Policy::from_checkpoint(&ck)?;
    let results = scenarios
        .iter()
        .map(|s| run_scenario(&policy, s, seeds).with_context(|| format!("{} on {}", c.label, s.name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodEval {
        label: c.label.clone(),
        variant: policy.cfg.variant,
        iteration: policy.iteration,
        checkpoint: Some(c.path.display().to_string()),
        results,
    })
}

/// Evaluate every checkpoint on every scenario, `workers` checkpoints at a
/// time.
pub fn evaluate(
    checkpoints: &[Labeled],
    scenarios: &[Scenario],
    seeds: &[u64],
    workers: usize,
) -> Result<EvalDocument> {
    if checkpoints.is_empty() {
        bail!("no checkpoint given");
    }
    let methods = pool(workers)?
        .install(|| checkpoints.par_iter().map(|c| eval_one(c, scenarios, seeds)).collect::<Result<Vec<_>>>())?;
    Ok(EvalDocument::build(methods)?)
}

/// Total agent faults recorded in a document.
pub fn faults(doc: &EvalDocument) -> usize {
    doc.methods.iter().flat_map(|m| &m.results).map(|r| r.faults).sum()
}

pub fn latents(checkpoint: &Path, sweep: &Sweep) -> Result<LatentTable> {
    let ck = Checkpoint::<Float>::load(checkpoint)?;
    let policy = Policy::from_checkpoint(&ck)?;
    Ok(export_latents(&policy, sweep)?)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?)
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub root: PathBuf,
    pub workers: usize,
    pub log_every: usize,
    /// Scenarios to evaluate the final checkpoints on, if any.
    pub scenarios: Vec<Scenario>,
    pub eval_seeds: Vec<u64>,
}

/// File written at the matrix root after an ablation.
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_EVAL_FILE: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: String,
    pub seed: u64,
    pub dir: String,
    pub final_checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub runs: Vec<AblationEntry>,
    #[serde(default)]
    pub eval: Option<String>,
}

/// Train (or resume) every run of the matrix, then optionally evaluate.
/// Completed runs with an identical config are reused.
pub fn ablate(opts: &AblateOptions) -> Result<AblationSummary> {
    let base = match &opts.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let runs: Vec<AblationRun> = ablation_matrix(&base, &opts.overrides, &opts.variants, &opts.seeds)?;
    std::fs::create_dir_all(&opts.root).with_context(|| format!("cannot create {}", opts.root.display()))?;
    let entries = pool(opts.workers)?.install(|| {
        runs.par_iter()
            .map(|r| {
                let dir = RunDir::new(opts.root.join(r.dir_name()));
                let progress = Progress { log_every: opts.log_every, label: r.dir_name() };
                let c = train_or_resume(r.config.clone(), &dir, &progress)
                    .with_context(|| format!("run {}", r.dir_name()))?;
                Ok(AblationEntry {
                    variant: r.variant.name().into(),
                    seed: r.seed,
                    dir: r.dir_name(),
                    final_checkpoint: format!("{}/checkpoints/{}", r.dir_name(), c.final_checkpoint),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut summary = AblationSummary { runs: entries, eval: None };
    if !opts.scenarios.is_empty() {
        let cks: Vec<Labeled> = summary
            .runs
            .iter()
            .map(|e| Labeled { label: e.dir.clone(), path: opts.root.join(&e.final_checkpoint) })
            .collect();
        let doc = evaluate(&cks, &opts.scenarios, &opts.eval_seeds, opts.workers)?;
        std::fs::write(opts.root.join(ABLATION_EVAL_FILE), doc.to_json())?;
        summary.eval = Some(ABLATION_EVAL_FILE.into());
    }
    std::fs::write(opts.root.join(ABLATION_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
