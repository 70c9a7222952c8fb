//! PPO pieces: rollout storage, GAE, the clipped surrogate and the
//! auxiliary regressions, and the KL-driven learning-rate rule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real};
use crate::repr::Slot;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub kl_coef: f64,
    pub desired_kl: f64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub vel_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Let the velocity loss reach the student encoder.
    pub vel_grad_to_student: bool,
    pub steps_per_iteration: usize,
    /// Multiplier applied to environment rewards before GAE.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatches: 4,
            kl_coef: 0.01,
            desired_kl: 0.01,
            lr_init: 1e-3,
            lr_min: 5e-5,
            lr_max: 1e-3,
            entropy_coef: 0.005,
            value_coef: 1.0,
            vel_coef: 1.0,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            vel_grad_to_student: false,
            steps_per_iteration: 24,
            reward_scale: 0.02,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        unit("ppo.gamma", self.gamma)?;
        unit("ppo.lam", self.lam)?;
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("ppo.clip must be positive, got {}", self.clip)));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.steps_per_iteration == 0 {
            return Err(Error::Config(
                "ppo.epochs, ppo.minibatches and ppo.steps_per_iteration must be positive".into(),
            ));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!("learning-rate bounds [{}, {}] are invalid", self.lr_min, self.lr_max)));
        }
        if !(self.lr_init >= self.lr_min && self.lr_init <= self.lr_max) {
            return Err(Error::Config(format!(
                "ppo.lr_init {} outside [{}, {}]",
                self.lr_init, self.lr_min, self.lr_max
            )));
        }
        if !(self.desired_kl > 0.0) {
            return Err(Error::Config("ppo.desired_kl must be positive".into()));
        }
        Ok(())
    }

    pub fn updates_per_iteration(&self) -> usize {
        self.epochs * self.minibatches
    }
}

/// Halve above twice the target, double below half of it, then clamp.
pub fn adapt_lr(kl: f64, lr: f64, cfg: &PpoConfig) -> f64 {
    let next = if kl > 2.0 * cfg.desired_kl {
        lr / 2.0
    } else if kl < cfg.desired_kl / 2.0 {
        lr * 2.0
    } else {
        lr
    };
    next.clamp(cfg.lr_min, cfg.lr_max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// GAE over one agent's sequence. `values` holds one extra entry, the
/// bootstrap value after the last step; `dones[t]` cuts the recursion.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Result<Advantages> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::Length(format!(
            "gae: {} rewards, {} values (need {}), {} done flags",
            n,
            values.len(),
            n + 1,
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        acc = delta + gamma * lam * live * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(Advantages { advantages: adv, returns })
}

/// In-place zero-mean unit-variance scaling.
pub fn normalize(v: &mut [f64]) {
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt() + 1e-8;
    for x in v {
        *x = (*x - mean) / sd;
    }
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)` for one sample.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Negative mean clipped objective. All inputs are `[n, 1]`.
pub fn ppo_surrogate<T: Real>(
    g: &mut Graph<T>,
    logp_new: NodeId,
    logp_old: NodeId,
    adv: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let d = g.sub(logp_new, logp_old)?;
    let ratio = g.exp(d);
    let unclipped = g.mul(ratio, adv)?;
    let rc = g.clamp(ratio, T::of(1.0 - eps), T::of(1.0 + eps));
    let clipped = g.mul(rc, adv)?;
    // min(x, y) = x - relu(x - y)
    let gap = g.sub(unclipped, clipped)?;
    let excess = g.relu(gap);
    let m = g.sub(unclipped, excess)?;
    let mean = g.mean(m);
    Ok(g.neg(mean))
}

/// Mean squared error over rows of `[n, 1]`.
pub fn value_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, returns: NodeId) -> Result<NodeId> {
    let d = g.sub(pred, returns)?;
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

/// Mean over rows of the squared Euclidean error.
pub fn velocity_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, truth: NodeId) -> Result<NodeId> {
    let d = g.sub(pred, truth)?;
    let s = g.sq_norm_rows(d);
    Ok(g.mean(s))
}

/// Widths of the per-transition records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferDims {
    pub obs: usize,
    pub ctx: usize,
    pub vhist: usize,
    pub act: usize,
    /// `None` seals the privileged channels: they are never stored and
    /// every read fails.
    pub privileged: Option<usize>,
}

/// One transition as observed during collection.
#[derive(Clone, Copy, Debug)]
pub struct Record<'a> {
    pub obs: &'a [f64],
    pub ctx_prev: &'a [f64],
    pub vhist: &'a [f64],
    pub privileged: &'a [f64],
    pub action: &'a [f64],
    pub mean: &'a [f64],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub next_obs: &'a [f64],
    pub ctx_next: &'a [f64],
    pub next_privileged: &'a [f64],
}

#[derive(Clone, Debug, Default)]
struct Field {
    width: usize,
    data: Vec<f64>,
}

impl Field {
    fn new(width: usize, rows: usize) -> Self {
        Self { width, data: vec![0.0; width * rows] }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    fn set(&mut self, r: usize, v: &[f64], name: &str) -> Result<()> {
        if v.len() != self.width {
            return Err(Error::Shape(format!("buffer field {name}: width {} expected {}", v.len(), self.width)));
        }
        self.data[r * self.width..(r + 1) * self.width].copy_from_slice(v);
        Ok(())
    }
}

/// On-policy storage of `agents x steps` transitions, agent-major.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub agents: usize,
    pub steps: usize,
    dims: BufferDims,
    obs: Field,
    ctx_prev: Field,
    vhist: Field,
    privileged: Field,
    action: Field,
    mean: Field,
    next_obs: Field,
    ctx_next: Field,
    next_privileged: Field,
    log_prob: Vec<f64>,
    value: Vec<f64>,
    reward: Vec<f64>,
    done: Vec<bool>,
    written: Vec<bool>,
    count: usize,
}

impl RolloutBuffer {
    pub fn new(agents: usize, steps: usize, dims: BufferDims) -> Self {
        let rows = agents * steps;
        let pw = dims.privileged.unwrap_or(0);
        Self {
            agents,
            steps,
            dims,
            obs: Field::new(dims.obs, rows),
            ctx_prev: Field::new(dims.ctx, rows),
            vhist: Field::new(dims.vhist, rows),
            privileged: Field::new(pw, rows),
            action: Field::new(dims.act, rows),
            mean: Field::new(dims.act, rows),
            next_obs: Field::new(dims.obs, rows),
            ctx_next: Field::new(dims.ctx, rows),
            next_privileged: Field::new(pw, rows),
            log_prob: vec![0.0; rows],
            value: vec![0.0; rows],
            reward: vec![0.0; rows],
            done: vec![false; rows],
            written: vec![false; rows],
            count: 0,
        }
    }

    pub fn dims(&self) -> BufferDims {
        self.dims
    }

    pub fn is_sealed(&self) -> bool {
        self.dims.privileged.is_none()
    }

    fn idx(&self, s: Slot) -> usize {
        assert!(s.agent < self.agents && s.step < self.steps, "slot {s:?} outside buffer");
        s.agent * self.steps + s.step
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.count == self.agents * self.steps
    }

    pub fn clear(&mut self) {
        self.written.iter_mut().for_each(|w| *w = false);
        self.count = 0;
    }

    pub fn push(&mut self, s: Slot, r: &Record<'_>) -> Result<()> {
        let i = self.idx(s);
        if self.written[i] {
            return Err(Error::Shape(format!("buffer slot {s:?} written twice")));
        }
        self.obs.set(i, r.obs, "obs")?;
        self.ctx_prev.set(i, r.ctx_prev, "ctx_prev")?;
        self.vhist.set(i, r.vhist, "vhist")?;
        self.action.set(i, r.action, "action")?;
        self.mean.set(i, r.mean, "mean")?;
        self.next_obs.set(i, r.next_obs, "next_obs")?;
        self.ctx_next.set(i, r.ctx_next, "ctx_next")?;
        if !self.is_sealed() {
            self.privileged.set(i, r.privileged, "privileged")?;
            self.next_privileged.set(i, r.next_privileged, "next_privileged")?;
        }
        self.log_prob[i] = r.log_prob;
        self.value[i] = r.value;
        self.reward[i] = r.reward;
        self.done[i] = r.done;
        self.written[i] = true;
        self.count += 1;
        Ok(())
    }

    pub fn obs(&self, s: Slot) -> &[f64] {
        self.obs.row(self.idx(s))
    }
    pub fn ctx_prev(&self, s: Slot) -> &[f64] {
        self.ctx_prev.row(self.idx(s))
    }
    pub fn vhist(&self, s: Slot) -> &[f64] {
        self.vhist.row(self.idx(s))
    }
    pub fn action(&self, s: Slot) -> &[f64] {
        self.action.row(self.idx(s))
    }
    pub fn mean(&self, s: Slot) -> &[f64] {
        self.mean.row(self.idx(s))
    }
    pub fn next_obs(&self, s: Slot) -> &[f64] {
        self.next_obs.row(self.idx(s))
    }
    pub fn ctx_next(&self, s: Slot) -> &[f64] {
        self.ctx_next.row(self.idx(s))
    }
    pub fn log_prob(&self, s: Slot) -> f64 {
        self.log_prob[self.idx(s)]
    }
    pub fn value(&self, s: Slot) -> f64 {
        self.value[self.idx(s)]
    }
    pub fn reward(&self, s: Slot) -> f64 {
        self.reward[self.idx(s)]
    }
    pub fn done(&self, s: Slot) -> bool {
        self.done[self.idx(s)]
    }

    pub fn privileged(&self, s: Slot) -> Result<&[f64]> {
        if self.is_sealed() {
            return Err(Error::PrivilegedAccess("privileged state read from a sealed buffer".into()));
        }
        Ok(self.privileged.row(self.idx(s)))
    }

    pub fn next_privileged(&self, s: Slot) -> Result<&[f64]> {
        if self.is_sealed() {
            return Err(Error::PrivilegedAccess("next privileged state read from a sealed buffer".into()));
        }
        Ok(self.next_privileged.row(self.idx(s)))
    }

    /// Advantages and returns for every slot, agent-major. `bootstrap[i]`
    /// is the value estimate after agent `i`'s last stored step.
    pub fn advantages(&self, bootstrap: &[f64], gamma: f64, lam: f64) -> Result<Advantages> {
        if bootstrap.len() != self.agents {
            return Err(Error::Length(format!("{} bootstrap values for {} agents", bootstrap.len(), self.agents)));
        }
        let mut out = Advantages { advantages: Vec::with_capacity(self.agents * self.steps), returns: Vec::new() };
        for a in 0..self.agents {
            let r0 = a * self.steps;
            let r1 = r0 + self.steps;
            let mut values = self.value[r0..r1].to_vec();
            values.push(bootstrap[a]);
            let g = compute_gae(&self.reward[r0..r1], &values, &self.done[r0..r1], gamma, lam)?;
            out.advantages.extend(g.advantages);
            out.returns.extend(g.returns);
        }
        Ok(out)
    }
}
