//! Scenario evaluation, composite metrics, ablation expansion and latent
//! export.
//!
//! Evaluation runs the deterministic action mean. Each grid cell of a
//! scenario runs `episodes` agents for one episode of `episode_seconds`;
//! errors are averaged over every control step of every episode and falls
//! are the tilt terminations.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Variant};
use crate::envsim::{priv_layout, CommandMode, EnvConfig, Overrides, Termination, VecEnv, MAX_LEVEL};
use crate::model::{EnvDims, Mode, Model, StepInput, StepOutput};
use crate::nets::{GroupKind, ParamStore};
use crate::trainer::Trainer;
use crate::{Error, Result};

/// Weights of (linear error, angular error, fall rate).
pub const EVAL_WEIGHTS: [f64; 3] = [0.3, 0.15, 0.55];
/// Weights of (terrain level, mean reward, episode length).
pub const TRAIN_WEIGHTS: [f64; 3] = [0.25, 0.6, 0.15];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub eval: [f64; 3],
    pub train: [f64; 3],
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self { eval: EVAL_WEIGHTS, train: TRAIN_WEIGHTS }
    }
}

impl MetricWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("eval", self.eval), ("train", self.train)] {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-12 || w.iter().any(|&x| x < 0.0) {
                return Err(Error::Config(format!("{name} weights {w:?} must be non-negative and sum to 1")));
            }
        }
        Ok(())
    }
}

fn min_max(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.0
    }
}

fn observed_range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// Raw components entering the evaluation score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalComponents {
    pub lin_err: f64,
    pub ang_err: f64,
    pub fall_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRanges {
    pub lin_err: (f64, f64),
    pub ang_err: (f64, f64),
    pub fall_rate: (f64, f64),
}

/// Weighted sum of components already mapped to `[0, 1]`.
pub fn weighted_eval_score(norm: [f64; 3]) -> f64 {
    norm.iter().zip(EVAL_WEIGHTS).map(|(n, w)| n * w).sum()
}

/// Min-max normalize each component over the compared methods and weight
/// them; lower is better. A component with no spread contributes 0.
pub fn combined_eval_metric(methods: &[EvalComponents]) -> Result<(Vec<f64>, EvalRanges)> {
    if methods.is_empty() {
        return Err(Error::Config("combined metric needs at least one method".into()));
    }
    if methods.iter().any(|m| !(m.lin_err.is_finite() && m.ang_err.is_finite() && m.fall_rate.is_finite())) {
        return Err(Error::NonFinite("evaluation components".into()));
    }
    let ranges = EvalRanges {
        lin_err: observed_range(methods.iter().map(|m| m.lin_err)),
        ang_err: observed_range(methods.iter().map(|m| m.ang_err)),
        fall_rate: observed_range(methods.iter().map(|m| m.fall_rate)),
    };
    let scores = methods
        .iter()
        .map(|m| {
            weighted_eval_score([
                min_max(m.lin_err, ranges.lin_err),
                min_max(m.ang_err, ranges.ang_err),
                min_max(m.fall_rate, ranges.fall_rate),
            ])
        })
        .collect();
    Ok((scores, ranges))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRanges {
    pub terrain_level: (f64, f64),
    pub mean_reward: (f64, f64),
    pub episode_length: (f64, f64),
}

impl TrainRanges {
    /// Fixed ranges used for the logged per-iteration metric.
    pub fn fixed(max_episode_steps: f64) -> Self {
        Self {
            terrain_level: (0.0, MAX_LEVEL as f64),
            mean_reward: crate::trainer::TRAIN_REWARD_RANGE,
            episode_length: (0.0, max_episode_steps),
        }
    }

    /// Observed ranges over a set of `(terrain level, mean reward, length)`.
    pub fn observed(rows: &[(f64, f64, f64)]) -> Self {
        Self {
            terrain_level: observed_range(rows.iter().map(|r| r.0)),
            mean_reward: observed_range(rows.iter().map(|r| r.1)),
            episode_length: observed_range(rows.iter().map(|r| r.2)),
        }
    }
}

/// Training metric; higher is better.
pub fn training_metric(terrain_level: f64, mean_reward: f64, episode_length: f64, ranges: &TrainRanges) -> f64 {
    TRAIN_WEIGHTS[0] * min_max(terrain_level, ranges.terrain_level)
        + TRAIN_WEIGHTS[1] * min_max(mean_reward, ranges.mean_reward)
        + TRAIN_WEIGHTS[2] * min_max(episode_length, ranges.episode_length)
}

fn default_episodes() -> usize {
    50
}
fn default_seconds() -> f64 {
    10.0
}
fn yes() -> bool {
    true
}

/// One evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub frictions: Vec<f64>,
    pub payloads: Vec<f64>,
    pub command: CommandMode,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_seconds")]
    pub episode_seconds: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub terrain_level: u32,
    /// Keep the random external pushes of training.
    #[serde(default = "yes")]
    pub perturb: bool,
    /// Whether the evaluated policy may read privileged channels.
    #[serde(default = "yes")]
    pub privileged_inputs: bool,
    /// Height-scan width of the environment; must match the checkpoint.
    #[serde(default)]
    pub height_scan: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenario: Vec<Scenario>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(format!("{}: {m}", self.name)));
        if self.frictions.is_empty() || self.payloads.is_empty() {
            return bad("friction and payload lists must be non-empty".into());
        }
        if self.frictions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad(format!("frictions must be positive, got {:?}", self.frictions));
        }
        if self.payloads.iter().any(|m| !(m.is_finite() && *m > -crate::envsim::BASE_MASS)) {
            return bad(format!("payloads must keep the total mass positive, got {:?}", self.payloads));
        }
        if self.episodes == 0 || !(self.episode_seconds > 0.0) {
            return bad("episodes and episode_seconds must be positive".into());
        }
        if self.terrain_level > MAX_LEVEL {
            return bad(format!("terrain_level {} exceeds {MAX_LEVEL}", self.terrain_level));
        }
        Ok(())
    }

    /// Parse a file holding one or more `[[scenario]]` tables.
    pub fn parse_file(doc: &str) -> Result<Vec<Scenario>> {
        let f: ScenarioFile = toml::from_str(doc).map_err(|e| Error::Scenario(e.message().to_string()))?;
        if f.scenario.is_empty() {
            return Err(Error::Scenario("file defines no scenario".into()));
        }
        for s in &f.scenario {
            s.validate()?;
        }
        Ok(f.scenario)
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.frictions.iter().flat_map(|&f| self.payloads.iter().map(move |&m| (f, m))).collect()
    }
}

/// Outcome of one grid cell under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub friction: f64,
    pub payload: f64,
    pub seed: u64,
    pub lin_err: f64,
    pub ang_err: f64,
    pub falls: usize,
    pub faults: usize,
    pub episodes: usize,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scenario: String,
    pub seeds: Vec<u64>,
    /// Mean planar velocity error, m/s.
    pub lin_err: f64,
    /// Mean yaw-rate error, rad/s.
    pub ang_err: f64,
    pub falls: usize,
    pub faults: usize,
    pub episodes: usize,
    pub cells: Vec<EvalCell>,
}

impl EvalResult {
    pub fn fall_rate(&self) -> f64 {
        self.falls as f64 / self.episodes.max(1) as f64
    }

    pub fn components(&self) -> EvalComponents {
        EvalComponents { lin_err: self.lin_err, ang_err: self.ang_err, fall_rate: self.fall_rate() }
    }
}

/// Frozen networks loaded for evaluation.
#[derive(Clone, Debug)]
pub struct Policy<T: Real> {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub iteration: u64,
}

impl<T: Real> Policy<T> {
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let cfg = RunConfig::parse(&ck.config_toml, &[])?;
        let (mut model, _) = Model::build::<T>(&cfg.model, EnvDims::with_scan(cfg.env.height_scan), cfg.seed)?;
        if !ck.store.has_group(GroupKind::Teacher) {
            model.teacher = None;
            model.cfg.teacher = false;
        }
        model.check_store(&ck.store)?;
        Ok(Self { cfg, model, store: ck.store.clone(), iteration: ck.iteration })
    }

    pub fn from_trainer(t: &Trainer<T>) -> Self {
        Self { cfg: t.cfg.clone(), model: t.model.clone(), store: t.store.clone(), iteration: t.iteration as u64 }
    }

    pub fn needs_privileged(&self) -> bool {
        self.model.cfg.privileged_actor
    }

    fn mode(&self) -> Mode {
        if self.needs_privileged() {
            Mode::Privileged
        } else {
            Mode::PrivilegeFree
        }
    }
}

/// Recurrent state of a batch of agents driven by a [`Policy`].
struct Runner<'a, T: Real> {
    policy: &'a Policy<T>,
    n: usize,
    ctx: Vec<T>,
    vhist: Vec<f64>,
}

impl<'a, T: Real> Runner<'a, T> {
    fn new(policy: &'a Policy<T>, n: usize) -> Self {
        let m = &policy.model;
        Self { policy, n, ctx: vec![T::zero(); n * m.context_width()], vhist: vec![0.0; n * m.vhist_width()] }
    }

    fn step(&self, env: &VecEnv) -> Result<(Vec<Vec<f64>>, StepOutput<T>)> {
        let p = self.policy;
        let obs = env.observations();
        let o: Vec<T> = obs.concat().into_iter().map(T::of).collect();
        let v: Vec<T> = self.vhist.iter().map(|&x| T::of(x)).collect();
        let s: Option<Vec<T>> =
            p.needs_privileged().then(|| env.privileged().concat().into_iter().map(T::of).collect());
        let x = StepInput { n: self.n, obs: &o, ctx: &self.ctx, vhist: &v, privileged: s.as_deref() };
        let out = p.model.step(&p.store, &x, p.mode())?;
        let a = p.model.dims.act;
        let actions =
            (0..self.n).map(|i| out.mean[i * a..(i + 1) * a].iter().map(|x| Real::to_f64(*x)).collect()).collect();
        Ok((actions, out))
    }

    /// Advance recurrent state after the environment stepped.
    fn advance(&mut self, prev_obs: &[Vec<f64>], out: &StepOutput<T>, done: &[bool]) {
        let cw = self.policy.model.context_width();
        let vw = self.policy.model.vhist_width();
        for i in 0..self.n {
            let crow = &mut self.ctx[i * cw..(i + 1) * cw];
            if done[i] {
                crow.iter_mut().for_each(|c| *c = T::zero());
            } else {
                crow.copy_from_slice(&out.next_ctx[i * cw..(i + 1) * cw]);
            }
            if vw > 0 {
                let row = &mut self.vhist[i * vw..(i + 1) * vw];
                if done[i] {
                    row.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    let o = prev_obs[i].len();
                    row.copy_within(o.., 0);
                    row[vw - o..].copy_from_slice(&prev_obs[i]);
                }
            }
        }
    }
}

fn eval_env_config(policy_env: &EnvConfig, seconds: f64, level: u32) -> EnvConfig {
    EnvConfig { episode_seconds: seconds, curriculum: false, initial_level: level, ..policy_env.clone() }
}

fn cell_seed(seed: u64, cell: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (cell as u64 + 1)
}

fn check_compatible<T: Real>(policy: &Policy<T>, scenario: &Scenario) -> Result<()> {
    if let Some(h) = scenario.height_scan {
        let have = policy.cfg.env.height_scan;
        if h != have {
            return Err(Error::Scenario(format!(
                "scenario {} has privileged width {} (height scan {h}), checkpoint expects {} (height scan {have})",
                scenario.name,
                priv_layout::width(h),
                priv_layout::width(have),
            )));
        }
    }
    if policy.needs_privileged() && !scenario.privileged_inputs {
        return Err(Error::PrivilegedAccess(format!(
            "scenario {} withholds privileged inputs that the {} policy requires",
            scenario.name, policy.cfg.variant
        )));
    }
    Ok(())
}

fn run_cell<T: Real>(policy: &Policy<T>, sc: &Scenario, friction: f64, payload: f64, seed: u64) -> Result<EvalCell> {
    let cfg = eval_env_config(&policy.cfg.env, sc.episode_seconds, sc.terrain_level);
    let steps = cfg.episode_steps();
    let overrides = Overrides {
        friction: Some(friction),
        payload: Some(payload),
        ext_force: None,
        command_mode: Some(sc.command),
        perturb: Some(sc.perturb),
    };
    let n = sc.episodes;
    let mut env = VecEnv::new(cfg, n, seed, overrides);
    let mut runner = Runner::new(policy, n);
    let mut first: Vec<Option<(u32, f64, f64, Termination)>> = vec![None; n];
    for _ in 0..steps {
        let obs = env.observations();
        let (actions, out) = runner.step(&env)?;
        let res = env.step(&actions);
        for f in &res.finished {
            first[f.agent].get_or_insert((f.steps, f.mean_planar_err, f.mean_yaw_err, f.termination));
        }
        let done: Vec<bool> = res.terminated.iter().map(Option::is_some).collect();
        runner.advance(&obs, &out, &done);
        if first.iter().all(Option::is_some) {
            break;
        }
    }
    let mut cell =
        EvalCell { friction, payload, seed, lin_err: 0.0, ang_err: 0.0, falls: 0, faults: 0, episodes: n, steps: 0 };
    for (k, lin, ang, term) in first.into_iter().map(|f| f.expect("every episode ends by timeout")) {
        cell.steps += k as u64;
        cell.lin_err += lin * k as f64;
        cell.ang_err += ang * k as f64;
        match term {
            Termination::Fall => cell.falls += 1,
            Termination::Fault(_) => cell.faults += 1,
            Termination::Timeout => {}
        }
    }
    cell.lin_err /= cell.steps.max(1) as f64;
    cell.ang_err /= cell.steps.max(1) as f64;
    Ok(cell)
}

/// Evaluate `policy` on every cell of `scenario` for each seed.
pub fn run_scenario<T: Real>(policy: &Policy<T>, scenario: &Scenario, seeds: &[u64]) -> Result<EvalResult> {
    scenario.validate()?;
    check_compatible(policy, scenario)?;
    if seeds.is_empty() {
        return Err(Error::Scenario("at least one seed is required".into()));
    }
    let mut cells = Vec::new();
    for &s in seeds {
        for (k, (f, m)) in scenario.cells().into_iter().enumerate() {
            cells.push(run_cell(policy, scenario, f, m, cell_seed(scenario.seed ^ s, k))?);
        }
    }
    let steps: u64 = cells.iter().map(|c| c.steps).sum();
    let w = |c: &EvalCell| c.steps as f64 / steps.max(1) as f64;
    Ok(EvalResult {
        scenario: scenario.name.clone(),
        seeds: seeds.to_vec(),
        lin_err: cells.iter().map(|c| c.lin_err * w(c)).sum(),
        ang_err: cells.iter().map(|c| c.ang_err * w(c)).sum(),
        falls: cells.iter().map(|c| c.falls).sum(),
        faults: cells.iter().map(|c| c.faults).sum(),
        episodes: cells.iter().map(|c| c.episodes).sum(),
        cells,
    })
}

/// Evaluation of one method (checkpoint) on a set of scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub label: String,
    pub variant: Variant,
    pub iteration: u64,
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub results: Vec<EvalResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScores {
    pub scenario: String,
    pub weights: [f64; 3],
    pub ranges: EvalRanges,
    /// Combined score per method label; lower is better.
    pub scores: BTreeMap<String, f64>,
}

/// Structured evaluation output: raw results of every method plus the
/// combined scores and the ranges used to normalize them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub format: u32,
    pub methods: Vec<MethodEval>,
    pub combined: Vec<ScenarioScores>,
}

impl EvalDocument {
    pub fn build(methods: Vec<MethodEval>) -> Result<Self> {
        let first = methods.first().ok_or_else(|| Error::Config("no methods to evaluate".into()))?;
        let names: Vec<&str> = first.results.iter().map(|r| r.scenario.as_str()).collect();
        let mut labels = std::collections::BTreeSet::new();
        for m in &methods {
            if !labels.insert(m.label.as_str()) {
                return Err(Error::Config(format!("duplicate method label '{}'", m.label)));
            }
            let these: Vec<&str> = m.results.iter().map(|r| r.scenario.as_str()).collect();
            if these != names {
                return Err(Error::Scenario(format!(
                    "method '{}' was evaluated on {these:?}, '{}' on {names:?}",
                    m.label, first.label
                )));
            }
        }
        let mut combined = Vec::new();
        for (k, name) in names.iter().enumerate() {
            let comps: Vec<EvalComponents> = methods.iter().map(|m| m.results[k].components()).collect();
            let (scores, ranges) = combined_eval_metric(&comps)?;
            combined.push(ScenarioScores {
                scenario: name.to_string(),
                weights: EVAL_WEIGHTS,
                ranges,
                scores: methods.iter().map(|m| m.label.clone()).zip(scores).collect(),
            });
        }
        Ok(Self { format: 1, methods, combined })
    }

    pub fn score(&self, scenario: &str, label: &str) -> Option<f64> {
        self.combined.iter().find(|s| s.scenario == scenario)?.scores.get(label).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval document serializes")
    }
}

/// Extrinsic varied by a latent sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Friction,
    Payload,
    /// Constant forward push, N.
    ExtForce,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Friction => "friction",
            Factor::Payload => "payload",
            Factor::ExtForce => "ext_force",
        }
    }
}

fn sweep_agents() -> usize {
    4
}
fn sweep_steps() -> usize {
    200
}

/// Single-factor sweep; exactly one of the value lists must be set. The
/// other extrinsics stay at friction 1, payload 0 and no push.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub friction: Option<Vec<f64>>,
    #[serde(default)]
    pub payload: Option<Vec<f64>>,
    #[serde(default)]
    pub ext_force: Option<Vec<f64>>,
    #[serde(default = "sweep_agents")]
    pub agents: usize,
    #[serde(default = "sweep_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub terrain_level: u32,
}

impl Sweep {
    pub fn parse(doc: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            sweep: Sweep,
        }
        let f: File = toml::from_str(doc).map_err(|e| Error::Scenario(e.message().to_string()))?;
        f.sweep.factor()?;
        Ok(f.sweep)
    }

    pub fn single(factor: Factor, values: Vec<f64>) -> Self {
        let mut s = Self {
            friction: None,
            payload: None,
            ext_force: None,
            agents: sweep_agents(),
            steps: sweep_steps(),
            seed: 0,
            terrain_level: 0,
        };
        *match factor {
            Factor::Friction => &mut s.friction,
            Factor::Payload => &mut s.payload,
            Factor::ExtForce => &mut s.ext_force,
        } = Some(values);
        s
    }

    pub fn factor(&self) -> Result<(Factor, &[f64])> {
        let set: Vec<(Factor, &Vec<f64>)> =
            [(Factor::Friction, &self.friction), (Factor::Payload, &self.payload), (Factor::ExtForce, &self.ext_force)]
                .into_iter()
                .filter_map(|(f, v)| v.as_ref().map(|v| (f, v)))
                .collect();
        match set.as_slice() {
            [(f, v)] if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok((*f, v.as_slice())),
            [_] => Err(Error::Scenario("sweep values must be finite and non-empty".into())),
            _ => Err(Error::Scenario(format!("a sweep varies exactly one extrinsic, found {}", set.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub timestep: usize,
    pub agent: usize,
    pub value: f64,
    pub phase: f64,
    pub latent: Vec<f64>,
}

/// Student latents recorded during a single-factor sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub factor: Factor,
    pub latent_dim: usize,
    pub rows: Vec<LatentRow>,
}

impl LatentTable {
    /// Columns: `timestep, agent, <factor>, phase, z0 .. z{d-1}`.
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["timestep".to_string(), "agent".into(), self.factor.name().into(), "phase".into()];
        h.extend((0..self.latent_dim).map(|k| format!("z{k}")));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(self.header()).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![r.timestep.to_string(), r.agent.to_string(), r.value.to_string(), r.phase.to_string()];
            rec.extend(r.latent.iter().map(|v| v.to_string()));
            out.write_record(rec).map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Record the student latent of every agent at every step of `sweep`.
pub fn export_latents<T: Real>(policy: &Policy<T>, sweep: &Sweep) -> Result<LatentTable> {
    let (factor, values) = sweep.factor()?;
    if policy.model.student.is_none() {
        return Err(Error::Config(format!("the {} variant has no student encoder", policy.cfg.variant)));
    }
    if sweep.agents == 0 || sweep.steps == 0 {
        return Err(Error::Scenario("sweep agents and steps must be positive".into()));
    }
    let d = policy.model.latent_width();
    let cfg = EnvConfig { curriculum: false, initial_level: sweep.terrain_level, ..policy.cfg.env.clone() };
    let mut rows = Vec::with_capacity(values.len() * sweep.agents * sweep.steps);
    for (k, &v) in values.iter().enumerate() {
        let mut o = Overrides {
            friction: Some(1.0),
            payload: Some(0.0),
            ext_force: Some([0.0; 3]),
            command_mode: Some(CommandMode::EvalId),
            perturb: Some(false),
        };
        match factor {
            Factor::Friction => o.friction = Some(v),
            Factor::Payload => o.payload = Some(v),
            Factor::ExtForce => o.ext_force = Some([v, 0.0, 0.0]),
        }
        let n = sweep.agents;
        let mut env = VecEnv::new(cfg.clone(), n, cell_seed(sweep.seed, k), o);
        let mut runner = Runner::new(policy, n);
        for t in 0..sweep.steps {
            let obs = env.observations();
            let (actions, out) = runner.step(&env)?;
            for i in 0..n {
                rows.push(LatentRow {
                    timestep: t,
                    agent: k * n + i,
                    value: v,
                    phase: env.states[i].phase,
                    latent: out.latent[i * d..(i + 1) * d].iter().map(|x| Real::to_f64(*x)).collect(),
                });
            }
            let res = env.step(&actions);
            let done: Vec<bool> = res.terminated.iter().map(Option::is_some).collect();
            runner.advance(&obs, &out, &done);
        }
    }
    Ok(LatentTable { factor, latent_dim: d, rows })
}

/// Velocity-estimator accuracy against the zero predictor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityEval {
    /// Mean Euclidean error of the estimate.
    pub est_err: f64,
    /// Mean Euclidean norm of the true base velocity.
    pub zero_err: f64,
    pub samples: usize,
}

impl VelocityEval {
    pub fn ratio(&self) -> f64 {
        self.est_err / self.zero_err
    }
}

/// Roll the policy out in fresh training-distribution environments and
/// compare its velocity estimate with the simulator's base velocity.
pub fn velocity_error<T: Real>(
    policy: &Policy<T>,
    agents: usize,
    steps: usize,
    seed: u64,
    terrain_level: u32,
) -> Result<VelocityEval> {
    if policy.model.velocity.is_none() {
        return Err(Error::Config(format!("the {} variant has no velocity estimator", policy.cfg.variant)));
    }
    let cfg = EnvConfig { curriculum: false, initial_level: terrain_level, ..policy.cfg.env.clone() };
    let mut env = VecEnv::new(cfg, agents, seed, Overrides::default());
    let mut runner = Runner::new(policy, agents);
    let mut r = VelocityEval { est_err: 0.0, zero_err: 0.0, samples: 0 };
    for _ in 0..steps {
        let obs = env.observations();
        let (actions, out) = runner.step(&env)?;
        for i in 0..agents {
            let v = env.states[i].vel;
            let e = &out.vel_est[i * 3..i * 3 + 3];
            r.est_err += (0..3).map(|k| (v[k] - Real::to_f64(e[k])).powi(2)).sum::<f64>().sqrt();
            r.zero_err += v.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.samples += 1;
        }
        let res = env.step(&actions);
        let done: Vec<bool> = res.terminated.iter().map(Option::is_some).collect();
        runner.advance(&obs, &out, &done);
    }
    r.est_err /= r.samples.max(1) as f64;
    r.zero_err /= r.samples.max(1) as f64;
    Ok(r)
}

/// One fully resolved run of an ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub config: RunConfig,
}

impl AblationRun {
    /// Directory name relative to the matrix root.
    pub fn dir_name(&self) -> String {
        format!("{}/seed_{}", self.variant, self.seed)
    }
}

/// Expand `variants x seeds` on top of a base config document and overrides.
pub fn ablation_matrix(
    base: &str,
    overrides: &[String],
    variants: &[String],
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut runs = Vec::new();
    for name in variants {
        let variant = Variant::from_name(name)?;
        for &seed in seeds {
            let mut o = overrides.to_vec();
            o.push(format!("variant=\"{}\"", variant.name()));
            o.push(format!("seed={seed}"));
            let config = RunConfig::parse(base, &o)?;
            runs.push(AblationRun { variant, seed, config });
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::CellKind;

    fn comps(l: f64, a: f64, f: f64) -> EvalComponents {
        EvalComponents { lin_err: l, ang_err: a, fall_rate: f }
    }

    #[test]
    fn weights_sum_to_one() {
        MetricWeights::default().validate().unwrap();
        assert!(MetricWeights { eval: [0.5, 0.5, 0.5], train: TRAIN_WEIGHTS }.validate().is_err());
    }

    #[test]
    fn eval_score_examples() {
        assert!((weighted_eval_score([0.5, 0.2, 0.1]) - 0.235).abs() < 1e-15);
        let (s, _) = combined_eval_metric(&[comps(0.3, 0.2, 0.1)]).unwrap();
        assert_eq!(s, vec![0.0]);
        let (s, r) = combined_eval_metric(&[comps(0.1, 0.1, 0.0), comps(0.5, 0.3, 0.2), comps(0.3, 0.2, 0.1)]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert_eq!(r.lin_err, (0.1, 0.5));
        assert!(combined_eval_metric(&[]).is_err());
    }

    #[test]
    fn train_metric_examples() {
        let r = TrainRanges { terrain_level: (0.0, 1.0), mean_reward: (0.0, 1.0), episode_length: (0.0, 1.0) };
        assert!((training_metric(1.0, 1.0, 1.0, &r) - 1.0).abs() < 1e-15);
        assert_eq!(training_metric(0.0, 0.0, 0.0, &r), 0.0);
        assert!((training_metric(1.0, 0.5, 0.0, &r) - 0.55).abs() < 1e-15);
        let fixed = TrainRanges::fixed(1000.0);
        let logged = crate::trainer::logged_train_metric(4.0, 0.7, 800.0, 1000.0);
        assert!((training_metric(4.0, 0.7, 800.0, &fixed) - logged).abs() < 1e-12);
    }

    #[test]
    fn scenario_files_parse() {
        let doc = r#"
            [[scenario]]
            name = "id"
            frictions = [0.1, 1.0]
            payloads = [0.0, 7.5]
            command = "eval_id"

            [[scenario]]
            name = "ood"
            frictions = [0.1]
            payloads = [15.0]
            command = "eval_ood"
            episodes = 4
        "#;
        let s = Scenario::parse_file(doc).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].episodes, 50);
        assert_eq!(s[0].episode_seconds, 10.0);
        assert_eq!(s[0].cells().len(), 4);
        assert!(s[1].payloads.contains(&15.0));
        assert!(
            Scenario::parse_file("[[scenario]]\nname='x'\nfrictions=[]\npayloads=[0.0]\ncommand='eval_id'").is_err()
        );
        assert!(Scenario::parse_file(
            "[[scenario]]\nname='x'\nfrictions=[1.0]\npayloads=[0.0]\ncommand='eval_id'\nbogus=1"
        )
        .is_err());
    }

    #[test]
    fn sweeps_must_be_single_factor() {
        assert!(Sweep::parse("[sweep]\nfriction = [0.1, 1.0]\npayload = [0.0]").is_err());
        assert!(Sweep::parse("[sweep]\nagents = 2").is_err());
        let s = Sweep::parse("[sweep]\next_force = [0.0, 30.0]").unwrap();
        assert_eq!(s.factor().unwrap().0, Factor::ExtForce);
    }

    fn tiny_policy(variant: Variant) -> Policy<f64> {
        let mut cfg = RunConfig::for_variant(variant);
        cfg.env.height_scan = 4;
        cfg.model.cell = CellKind::Gru;
        cfg.model.recurrent_hidden = 8;
        cfg.model.actor_hidden = vec![8];
        cfg.model.critic_hidden = vec![8];
        cfg.model.teacher_hidden = vec![8];
        cfg.model.velocity_hidden = vec![8];
        let (model, store) = Model::build::<f64>(&cfg.model, EnvDims::with_scan(4), 3).unwrap();
        Policy { cfg, model, store, iteration: 0 }
    }

    fn tiny_scenario() -> Scenario {
        Scenario {
            name: "t".into(),
            frictions: vec![0.2, 1.0],
            payloads: vec![0.0],
            command: CommandMode::EvalId,
            episodes: 3,
            episode_seconds: 0.5,
            seed: 1,
            terrain_level: 0,
            perturb: true,
            privileged_inputs: false,
            height_scan: Some(4),
        }
    }

    #[test]
    fn scenario_runs_are_deterministic() {
        let p = tiny_policy(Variant::Tar);
        let a = run_scenario(&p, &tiny_scenario(), &[0, 1]).unwrap();
        let b = run_scenario(&p, &tiny_scenario(), &[0, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes, 12);
        assert!(a.falls <= a.episodes && a.lin_err >= 0.0 && a.ang_err >= 0.0);
    }

    #[test]
    fn incompatible_scenarios_rejected() {
        let p = tiny_policy(Variant::Teacher);
        let e = run_scenario(&p, &tiny_scenario(), &[0]).unwrap_err();
        assert!(matches!(e, Error::PrivilegedAccess(_)), "{e}");
        let mut sc = tiny_scenario();
        sc.privileged_inputs = true;
        run_scenario(&p, &sc, &[0]).unwrap();
        sc.height_scan = Some(187);
        let msg = run_scenario(&p, &sc, &[0]).unwrap_err().to_string();
        assert!(msg.contains("244") && msg.contains("61"), "{msg}");
    }

    #[test]
    fn standing_scenario_has_zero_command() {
        let p = tiny_policy(Variant::Tar);
        let mut sc = tiny_scenario();
        sc.command = CommandMode::Stand;
        sc.perturb = false;
        let r = run_scenario(&p, &sc, &[0]).unwrap();
        assert!(r.lin_err.is_finite());
    }

    #[test]
    fn latent_export_layout() {
        let p = tiny_policy(Variant::Tar);
        let mut s = Sweep::single(Factor::Friction, vec![0.05, 0.5, 1.5, 3.5, 5.0]);
        s.agents = 2;
        s.steps = 3;
        let t = export_latents(&p, &s).unwrap();
        assert_eq!(t.rows.len(), 5 * 2 * 3);
        assert_eq!(t.header().len(), 3 + 1 + 45);
        let labels: std::collections::BTreeSet<u64> = t.rows.iter().map(|r| r.value.to_bits()).collect();
        assert_eq!(labels.len(), 5);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 31);
        assert!(text.lines().all(|l| l.split(',').count() == 49));
        assert_eq!(export_latents(&p, &s).unwrap(), t);
        assert!(export_latents(&tiny_policy(Variant::Teacher), &s).is_err());
    }

    #[test]
    fn ablation_expands_matrix() {
        let runs = ablation_matrix("", &[], &["tar_tcn".into(), "no_priv_vel".into()], &DEFAULT_SEEDS).unwrap();
        assert_eq!(runs.len(), 6);
        assert_eq!(runs[0].config.model.tcn.kernels, vec![8, 5, 5]);
        let v = &runs[3].config;
        assert!(!v.model.velocity_estimator && !v.model.critic_velocity);
        assert_eq!(runs[4].dir_name(), "no_priv_vel/seed_1");
        assert!(ablation_matrix("", &[], &["him".into()], &[0]).is_err());
    }
}
