//! On-disk layout of a training run.
//!
//! ```text
//! <run>/config.toml          resolved config, verbatim
//! <run>/run.json             variant, seed, mode, code version, metric ranges
//! <run>/metrics.csv          one row per iteration, flushed as written
//! <run>/checkpoints/ckpt_XXXXXX.bin
//! <run>/run_complete.json    written last; absent if the run was cut short
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use loco_core::config::RunConfig;
use loco_core::evalsuite::{TrainRanges, TRAIN_WEIGHTS};
use loco_core::trainer::{mode_name, IterationMetrics};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const COMPLETE_FILE: &str = "run_complete.json";
pub const RUNS_DIR_VAR: &str = "LOCO_RUNS_DIR";

/// Static description of a run, written once at start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub variant: String,
    pub seed: u64,
    pub mode: String,
    pub version: String,
    /// Run this one was fine-tuned from, if any.
    #[serde(default)]
    pub parent_checkpoint: Option<String>,
    pub train_metric_weights: [f64; 3],
    pub train_metric_ranges: TrainRanges,
    pub metrics_columns: Vec<String>,
}

impl RunInfo {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            variant: cfg.variant.name().into(),
            seed: cfg.seed,
            mode: mode_name(cfg.mode).into(),
            version: env!("CARGO_PKG_VERSION").into(),
            parent_checkpoint: None,
            train_metric_weights: TRAIN_WEIGHTS,
            train_metric_ranges: TrainRanges::fixed(cfg.env.episode_steps() as f64),
            metrics_columns: IterationMetrics::header(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunComplete {
    pub iterations: u64,
    pub final_checkpoint: String,
    pub wall_seconds: f64,
}

/// Root for runs without an explicit `--out`.
pub fn default_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// `--out`, then `out_dir` from the config, then `<root>/<variant>/seed_<k>`.
pub fn resolve_out(out: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    match (out, &cfg.out_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => default_root().join(cfg.variant.name()).join(format!("seed_{}", cfg.seed)),
    }
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.bin")
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.path.join(CONFIG_FILE)
    }
    pub fn info(&self) -> PathBuf {
        self.path.join(RUN_FILE)
    }
    pub fn metrics(&self) -> PathBuf {
        self.path.join(METRICS_FILE)
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.path.join(CHECKPOINT_DIR)
    }
    pub fn complete(&self) -> PathBuf {
        self.path.join(COMPLETE_FILE)
    }
    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.checkpoints().join(checkpoint_name(iteration))
    }

    pub fn is_complete(&self) -> bool {
        self.complete().is_file()
    }

    pub fn read_complete(&self) -> Result<RunComplete> {
        let s = std::fs::read_to_string(self.complete())
            .with_context(|| format!("{} has no end-of-run marker", self.path.display()))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn read_info(&self) -> Result<RunInfo> {
        let s = std::fs::read_to_string(self.info()).with_context(|| format!("reading {}", self.info().display()))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Create a fresh run directory. Refuses to reuse one that already holds
    /// a run.
    pub fn create(&self, cfg: &RunConfig, info: &RunInfo) -> Result<()> {
        if self.config().exists() || self.metrics().exists() {
            bail!("{} already holds a run; resume it or choose another --out", self.path.display());
        }
        std::fs::create_dir_all(self.checkpoints())
            .with_context(|| format!("cannot create run directory {}", self.path.display()))?;
        write_atomic(&self.config(), cfg.to_toml().as_bytes())?;
        write_atomic(&self.info(), serde_json::to_string_pretty(info)?.as_bytes())?;
        Ok(())
    }

    pub fn mark_complete(&self, c: &RunComplete) -> Result<()> {
        write_atomic(&self.complete(), serde_json::to_string_pretty(c)?.as_bytes())
    }

    /// Checkpoint iterations present on disk, ascending.
    pub fn checkpoint_iterations(&self) -> Result<Vec<u64>> {
        let mut its = Vec::new();
        let dir = match std::fs::read_dir(self.checkpoints()) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(its),
            Err(e) => return Err(e.into()),
        };
        for e in dir {
            let name = e?.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".bin")) {
                if let Ok(it) = n.parse() {
                    its.push(it);
                }
            }
        }
        its.sort_unstable();
        Ok(its)
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        Ok(self.checkpoint_iterations()?.last().map(|&i| self.checkpoint(i)))
    }

    /// Final checkpoint of a completed run.
    pub fn final_checkpoint(&self) -> Result<PathBuf> {
        let c = self.read_complete()?;
        Ok(self.checkpoints().join(c.final_checkpoint))
    }

    /// Parsed metrics rows.
    pub fn read_metrics(&self) -> Result<Metrics> {
        Metrics::read(&self.metrics())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).with_context(|| format!("cannot write {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Append-only metrics log, flushed after every row.
pub struct MetricsWriter {
    out: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut out = csv::Writer::from_writer(f);
        out.write_record(IterationMetrics::header())?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Reopen for appending after dropping rows at or past `keep_below`.
    pub fn reopen(path: &Path, keep_below: u64) -> Result<Self> {
        let header = IterationMetrics::header();
        let reader = BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?);
        let mut kept = Vec::new();
        for (k, line) in reader.lines().enumerate() {
            let line = line?;
            if k == 0 {
                if line != header.join(",") {
                    bail!("{} has an unexpected header", path.display());
                }
                kept.push(line);
                continue;
            }
            let it: u64 = match line.split(',').next().and_then(|s| s.parse().ok()) {
                Some(it) => it,
                None => continue,
            };
            if it < keep_below {
                kept.push(line);
            }
        }
        let mut text = kept.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self { out: csv::WriterBuilder::new().has_headers(false).from_writer(f) })
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<()> {
        self.out.write_record(m.row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Metrics table read back by column name.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Metrics {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r.records().map(|rec| Ok(rec?.iter().map(String::from).collect())).collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name).with_context(|| format!("no metrics column '{name}'"))?;
        self.rows
            .iter()
            .map(|r| r[k].parse::<f64>().with_context(|| format!("column {name}: '{}' is not a number", r[k])))
            .collect()
    }
}
