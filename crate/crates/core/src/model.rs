//! Network assembly for each variant and the loss graph of one update.
//!
//! Stop-gradient placement decides which parameter group each loss reaches:
//!
//! | loss     | actor | critic | teacher | student | dynamics | velocity |
//! |----------|-------|--------|---------|---------|----------|----------|
//! | ppo      | x     |        |         |         |          |          |
//! | value    |       | x      | x       |         |          |          |
//! | triplet  |       |        | x       | x       | x        |          |
//! | velocity |       |        |         | (flag)  |          | x        |

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::envsim::{priv_layout, ACT_DIM, OBS_DIM};
use crate::nets::{
    gaussian_entropy, gaussian_kl, gaussian_log_prob, Actor, Bound, CellKind, GroupKind, Mlp, MlpSpec, ParamBuilder,
    ParamStore, StudentEncoder, TcnSpec,
};
use crate::ppo::{ppo_surrogate, value_loss, velocity_loss, PpoConfig};
use crate::repr::{triplet_loss, NegativeEncoder, Strategy, TripletBatch, TripletConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Recurrent,
    /// Stacked-history MLP.
    Mlp,
    Tcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Privileged,
    PrivilegeFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent: usize,
    pub encoder: EncoderKind,
    pub cell: CellKind,
    pub recurrent_hidden: usize,
    pub history_steps: usize,
    pub history_hidden: Vec<usize>,
    pub tcn: TcnSpec,
    pub teacher_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub velocity_hidden: Vec<usize>,
    /// Observations fed to the velocity estimator, current one included.
    pub velocity_history: usize,
    pub init_log_std: f64,
    /// Privileged teacher encoder feeding the critic and anchoring triplets.
    pub teacher: bool,
    pub velocity_estimator: bool,
    /// Base linear velocity kept among the critic's privileged inputs.
    pub critic_velocity: bool,
    /// Actor and critic read the privileged state directly (single-step
    /// baseline with no encoders).
    pub privileged_actor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent: 45,
            encoder: EncoderKind::Recurrent,
            cell: CellKind::Lstm,
            recurrent_hidden: 256,
            history_steps: 10,
            history_hidden: vec![256, 128],
            tcn: TcnSpec { channels: vec![32, 32, 32], kernels: vec![8, 5, 5], strides: vec![4, 1, 1], history: 40 },
            teacher_hidden: vec![256, 128],
            actor_hidden: vec![512, 256, 128],
            critic_hidden: vec![512, 256, 128],
            dynamics_hidden: vec![64],
            velocity_hidden: vec![128, 64],
            velocity_history: 4,
            init_log_std: 0.0,
            teacher: true,
            velocity_estimator: true,
            critic_velocity: true,
            privileged_actor: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 {
            return Err(Error::Config("model.latent must be positive".into()));
        }
        if !(1..=8).contains(&self.velocity_history) {
            return Err(Error::Config(format!(
                "model.velocity_history must be in 1..=8, got {}",
                self.velocity_history
            )));
        }
        if self.encoder == EncoderKind::Tcn {
            self.tcn.validate()?;
        }
        if self.privileged_actor && (self.teacher || self.velocity_estimator) {
            return Err(Error::Config("privileged_actor excludes the teacher encoder and velocity estimator".into()));
        }
        Ok(())
    }
}

/// Input widths fixed by the environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvDims {
    pub obs: usize,
    pub act: usize,
    pub privileged: usize,
}

impl EnvDims {
    pub fn with_scan(h: usize) -> Self {
        Self { obs: OBS_DIM, act: ACT_DIM, privileged: priv_layout::width(h) }
    }
}

/// Assembled networks. Parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dims: EnvDims,
    pub student: Option<StudentEncoder>,
    pub teacher: Option<Mlp>,
    pub dynamics: Option<Mlp>,
    pub velocity: Option<Mlp>,
    pub actor: Actor,
    pub critic: Mlp,
}

/// Rows of one rollout step, in the model's scalar type.
#[derive(Clone, Debug)]
pub struct StepInput<'a, T> {
    pub n: usize,
    pub obs: &'a [T],
    pub ctx: &'a [T],
    pub vhist: &'a [T],
    pub privileged: Option<&'a [T]>,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
    pub latent: Vec<T>,
    pub next_ctx: Vec<T>,
    pub vel_est: Vec<T>,
    pub value: Vec<T>,
}

/// Rows of one update mini-batch.
#[derive(Clone, Debug, Default)]
pub struct MiniBatch<T> {
    pub n: usize,
    pub obs: Vec<T>,
    pub ctx_prev: Vec<T>,
    pub vhist: Vec<T>,
    pub action: Vec<T>,
    pub old_mean: Vec<T>,
    pub old_log_std: Vec<T>,
    pub old_log_prob: Vec<T>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
    pub next_obs: Vec<T>,
    pub ctx_next: Vec<T>,
    pub privileged: Option<Vec<T>>,
    pub next_privileged: Option<Vec<T>>,
    pub neg_next_obs: Vec<T>,
    pub neg_ctx_next: Vec<T>,
    pub neg_next_privileged: Option<Vec<T>>,
    pub agents: Vec<usize>,
    pub neg_agents: Vec<usize>,
}

/// Loss nodes of one update graph.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub ppo: NodeId,
    pub value: NodeId,
    pub triplet: Option<NodeId>,
    pub vel: Option<NodeId>,
    pub total: NodeId,
    pub kl: NodeId,
    pub entropy: NodeId,
    pub triplet_batch: Option<TripletBatch>,
}

fn input<T: Real>(g: &mut Graph<T>, rows: usize, cols: usize, data: &[T]) -> Result<NodeId> {
    Ok(g.constant(Tensor::new(rows, cols, data.to_vec())?))
}

impl Model {
    /// Build networks and draw initial parameters.
    pub fn build<T: Real>(cfg: &ModelConfig, dims: EnvDims, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);
        let l = cfg.latent;
        let (student, teacher, dynamics, velocity, actor_in, critic_in);
        if cfg.privileged_actor {
            student = None;
            teacher = None;
            dynamics = None;
            velocity = None;
            actor_in = dims.privileged;
            critic_in = critic_priv_width(cfg, dims);
        } else {
            let s = match cfg.encoder {
                EncoderKind::Recurrent => {
                    StudentEncoder::recurrent(&mut b, cfg.cell, dims.obs, cfg.recurrent_hidden, l)
                }
                EncoderKind::Mlp => {
                    StudentEncoder::history(&mut b, cfg.history_steps, dims.obs, &cfg.history_hidden, l)?
                }
                EncoderKind::Tcn => StudentEncoder::tcn(&mut b, &cfg.tcn, dims.obs, l)?,
            };
            student = Some(s);
            teacher = if cfg.teacher {
                Some(Mlp::build(
                    &mut b,
                    GroupKind::Teacher,
                    "mlp",
                    &MlpSpec::new(dims.privileged, &cfg.teacher_hidden, l),
                )?)
            } else {
                None
            };
            dynamics = Some(Mlp::build(
                &mut b,
                GroupKind::Dynamics,
                "mlp",
                &MlpSpec::new(l + dims.act, &cfg.dynamics_hidden, l),
            )?);
            velocity = if cfg.velocity_estimator {
                let w = l + cfg.velocity_history * dims.obs;
                Some(Mlp::build(&mut b, GroupKind::Velocity, "mlp", &MlpSpec::new(w, &cfg.velocity_hidden, 3))?)
            } else {
                None
            };
            actor_in = dims.obs + l + if cfg.velocity_estimator { 3 } else { 0 };
            critic_in = critic_priv_width(cfg, dims) + l;
        }
        let actor = Actor::build(&mut b, &MlpSpec::new(actor_in, &cfg.actor_hidden, dims.act), cfg.init_log_std)?;
        let critic = Mlp::build(&mut b, GroupKind::Critic, "mlp", &MlpSpec::new(critic_in, &cfg.critic_hidden, 1))?;
        store.check_partition()?;
        let model = Self { cfg: cfg.clone(), dims, student, teacher, dynamics, velocity, actor, critic };
        Ok((model, store))
    }

    /// Check that `store` holds exactly the parameters this model expects.
    pub fn check_store<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let (_, fresh) = Model::build::<T>(&self.cfg, self.dims, 0)?;
        for g in &fresh.groups {
            if g.kind == GroupKind::Teacher && self.teacher.is_none() {
                continue;
            }
            let have =
                store.group(g.kind).ok_or_else(|| Error::Checkpoint(format!("parameter group {} missing", g.kind)))?;
            if have.params.len() != g.params.len() {
                return Err(Error::Checkpoint(format!(
                    "group {}: {} tensors, model expects {}",
                    g.kind,
                    have.params.len(),
                    g.params.len()
                )));
            }
            for (a, b) in have.params.iter().zip(&g.params) {
                if a.name != b.name || a.rows != b.rows || a.cols != b.cols {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} [{}, {}] does not match model's {} [{}, {}]",
                        a.name, a.rows, a.cols, b.name, b.rows, b.cols
                    )));
                }
            }
        }
        if self.teacher.is_none() && store.has_group(GroupKind::Teacher) {
            return Err(Error::Checkpoint("teacher parameters present for a model without teacher".into()));
        }
        Ok(())
    }

    /// Drop the teacher encoder, as done when entering privilege-free mode.
    pub fn drop_teacher<T: Real>(&mut self, store: &mut ParamStore<T>) {
        self.teacher = None;
        self.cfg.teacher = false;
        store.remove_group(GroupKind::Teacher);
    }

    pub fn groups(&self) -> Vec<GroupKind> {
        let mut v = vec![GroupKind::Actor, GroupKind::Critic];
        if self.teacher.is_some() {
            v.push(GroupKind::Teacher);
        }
        if self.student.is_some() {
            v.push(GroupKind::Student);
        }
        if self.dynamics.is_some() {
            v.push(GroupKind::Dynamics);
        }
        if self.velocity.is_some() {
            v.push(GroupKind::Velocity);
        }
        v
    }

    /// Groups updated in `mode`; the velocity estimator is frozen without
    /// privileged velocity targets.
    pub fn trainable(&self, mode: Mode) -> Vec<GroupKind> {
        self.groups().into_iter().filter(|g| !(mode == Mode::PrivilegeFree && *g == GroupKind::Velocity)).collect()
    }

    pub fn context_width(&self) -> usize {
        self.student.as_ref().map_or(0, |s| s.context_width())
    }

    /// Width of stored past observations for the velocity estimator.
    pub fn vhist_width(&self) -> usize {
        if self.velocity.is_some() {
            (self.cfg.velocity_history - 1) * self.dims.obs
        } else {
            0
        }
    }

    pub fn latent_width(&self) -> usize {
        if self.student.is_some() {
            self.cfg.latent
        } else {
            0
        }
    }

    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode == Mode::PrivilegeFree && self.cfg.privileged_actor {
            return Err(Error::PrivilegedAccess("the privileged baseline needs privileged inputs".into()));
        }
        Ok(())
    }

    fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, obs: NodeId, ctx: NodeId) -> Result<(NodeId, NodeId)> {
        self.student.as_ref().expect("student encoder").encode(g, p, obs, ctx)
    }

    fn velocity_est<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: NodeId,
        obs: NodeId,
        vhist: NodeId,
    ) -> Result<Option<NodeId>> {
        match &self.velocity {
            Some(v) => {
                let x = g.concat(&[z, vhist, obs])?;
                Ok(Some(v.forward(g, p, x)?))
            }
            None => Ok(None),
        }
    }

    /// Critic input: selected privileged channels (or their zero stand-in
    /// built from the observation alone), then the critic latent.
    fn critic_input<T: Real>(
        &self,
        g: &mut Graph<T>,
        obs: NodeId,
        privileged: Option<NodeId>,
        latent: Option<NodeId>,
    ) -> Result<NodeId> {
        let n = g.shape(obs)[0];
        let pw = self.dims.privileged;
        let base = match privileged {
            Some(s) if self.cfg.critic_velocity => s,
            Some(s) => {
                let head = g.slice_cols(s, 0, priv_layout::BASE_VEL)?;
                let tail = g.slice_cols(s, priv_layout::BASE_VEL + 3, pw)?;
                g.concat(&[head, tail])?
            }
            None => {
                let extra = critic_priv_width(&self.cfg, self.dims) - self.dims.obs;
                let zeros = g.constant(Tensor::zeros(n, extra));
                g.concat(&[obs, zeros])?
            }
        };
        match latent {
            Some(z) => g.concat(&[base, z]),
            None => Ok(base),
        }
    }

    /// Forward pass of one collection step; nothing is trainable.
    pub fn step<T: Real>(&self, store: &ParamStore<T>, x: &StepInput<'_, T>, mode: Mode) -> Result<StepOutput<T>> {
        self.check_mode(mode)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let n = x.n;
        let obs = input(&mut g, n, self.dims.obs, x.obs)?;
        let privileged = match (mode, x.privileged) {
            (Mode::Privileged, Some(s)) => Some(input(&mut g, n, self.dims.privileged, s)?),
            (Mode::Privileged, None) => {
                return Err(Error::PrivilegedAccess("privileged mode step without privileged state".into()))
            }
            (Mode::PrivilegeFree, _) => None,
        };
        if self.cfg.privileged_actor {
            let s = privileged.expect("checked above");
            let (mean, ls) = self.actor.forward(&mut g, &p, s)?;
            let cin = self.critic_input(&mut g, obs, Some(s), None)?;
            let v = self.critic.forward(&mut g, &p, cin)?;
            return Ok(StepOutput {
                mean: g.value(mean).data.clone(),
                log_std: g.value(ls).data.clone(),
                latent: Vec::new(),
                next_ctx: Vec::new(),
                vel_est: Vec::new(),
                value: g.value(v).data.clone(),
            });
        }
        let ctx = input(&mut g, n, self.context_width(), x.ctx)?;
        let vhist = input(&mut g, n, self.vhist_width(), x.vhist)?;
        let (z, next) = self.encode(&mut g, &p, obs, ctx)?;
        let v_hat = self.velocity_est(&mut g, &p, z, obs, vhist)?;
        let mut parts = vec![obs, z];
        parts.extend(v_hat);
        let ain = g.concat(&parts)?;
        let (mean, ls) = self.actor.forward(&mut g, &p, ain)?;
        let clat = match (&self.teacher, privileged) {
            (Some(t), Some(s)) => t.forward(&mut g, &p, s)?,
            _ => z,
        };
        let cin = self.critic_input(&mut g, obs, privileged, Some(clat))?;
        let v = self.critic.forward(&mut g, &p, cin)?;
        Ok(StepOutput {
            mean: g.value(mean).data.clone(),
            log_std: g.value(ls).data.clone(),
            latent: g.value(z).data.clone(),
            next_ctx: g.value(next).data.clone(),
            vel_est: v_hat.map(|v| g.value(v).data.clone()).unwrap_or_default(),
            value: g.value(v).data.clone(),
        })
    }

    /// Build every loss of one mini-batch on `g`.
    pub fn losses<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        mb: &MiniBatch<T>,
        mode: Mode,
        ppo: &PpoConfig,
        triplet: &TripletConfig,
    ) -> Result<LossNodes> {
        self.check_mode(mode)?;
        let n = mb.n;
        let (o, a, l) = (self.dims.obs, self.dims.act, self.cfg.latent);
        let obs = input(g, n, o, &mb.obs)?;
        let action = input(g, n, a, &mb.action)?;
        let old_mean = input(g, n, a, &mb.old_mean)?;
        let old_ls = input(g, 1, a, &mb.old_log_std)?;
        let old_lp = input(g, n, 1, &mb.old_log_prob)?;
        let adv = input(g, n, 1, &mb.advantages)?;
        let ret = input(g, n, 1, &mb.returns)?;
        let privileged = match mode {
            Mode::Privileged => {
                let s = mb
                    .privileged
                    .as_ref()
                    .ok_or_else(|| Error::PrivilegedAccess("privileged mode batch without privileged state".into()))?;
                Some(input(g, n, self.dims.privileged, s)?)
            }
            Mode::PrivilegeFree => None,
        };

        let policy = |g: &mut Graph<T>, ain: NodeId| -> Result<(NodeId, NodeId, NodeId)> {
            let (mean, ls) = self.actor.forward(g, p, ain)?;
            let lp = gaussian_log_prob(g, mean, ls, action)?;
            let surr = ppo_surrogate(g, lp, old_lp, adv, ppo.clip)?;
            let ent = gaussian_entropy(g, ls);
            let kl_rows = gaussian_kl(g, old_mean, old_ls, mean, ls)?;
            let kl = g.mean(kl_rows);
            let e = g.mul_scalar(ent, T::of(-ppo.entropy_coef));
            let k = g.mul_scalar(kl, T::of(ppo.kl_coef));
            let l0 = g.add(surr, e)?;
            Ok((g.add(l0, k)?, kl, ent))
        };

        if self.cfg.privileged_actor {
            let s = privileged.expect("checked by check_mode");
            let (l_ppo, kl, ent) = policy(g, s)?;
            let cin = self.critic_input(g, obs, Some(s), None)?;
            let v = self.critic.forward(g, p, cin)?;
            let l_val = value_loss(g, v, ret)?;
            let sv = g.mul_scalar(l_val, T::of(ppo.value_coef));
            let total = g.add(l_ppo, sv)?;
            return Ok(LossNodes {
                ppo: l_ppo,
                value: l_val,
                triplet: None,
                vel: None,
                total,
                kl,
                entropy: ent,
                triplet_batch: None,
            });
        }

        let ctx = input(g, n, self.context_width(), &mb.ctx_prev)?;
        let vhist = input(g, n, self.vhist_width(), &mb.vhist)?;
        let (z, _) = self.encode(g, p, obs, ctx)?;
        let z_sg = g.stop_gradient(z);
        let z_vel = if ppo.vel_grad_to_student { z } else { z_sg };
        let v_hat = self.velocity_est(g, p, z_vel, obs, vhist)?;
        let mut parts = vec![obs, z_sg];
        if let Some(v) = v_hat {
            parts.push(g.stop_gradient(v));
        }
        let ain = g.concat(&parts)?;
        let (l_ppo, kl, ent) = policy(g, ain)?;

        let clat = match (&self.teacher, privileged) {
            (Some(t), Some(s)) => t.forward(g, p, s)?,
            _ => z_sg,
        };
        let cin = self.critic_input(g, obs, privileged, Some(clat))?;
        let v = self.critic.forward(g, p, cin)?;
        let l_val = value_loss(g, v, ret)?;

        // triplets
        let dynamics = self.dynamics.as_ref().expect("dynamics model");
        let za = g.concat(&[z, action])?;
        let predicted = dynamics.forward(g, p, za)?;
        let student_negatives = |g: &mut Graph<T>| -> Result<NodeId> {
            let neg_obs = input(g, n, o, &mb.neg_next_obs)?;
            let neg_ctx = input(g, n, self.context_width(), &mb.neg_ctx_next)?;
            let (neg, _) = self.encode(g, p, neg_obs, neg_ctx)?;
            Ok(g.stop_gradient(neg))
        };
        let tb = match (triplet.strategy, mode) {
            (Strategy::PrivilegeFree, _) | (_, Mode::PrivilegeFree) => {
                let next_obs = input(g, n, o, &mb.next_obs)?;
                let next_ctx = input(g, n, self.context_width(), &mb.ctx_next)?;
                let (pos, _) = self.encode(g, p, next_obs, next_ctx)?;
                let pos = g.stop_gradient(pos);
                TripletBatch {
                    anchors: predicted,
                    positives: pos,
                    negatives: student_negatives(g)?,
                    anchor_agents: mb.agents.clone(),
                    negative_agents: mb.neg_agents.clone(),
                }
            }
            (Strategy::TeacherAnchored | Strategy::RandomNegative, Mode::Privileged) => {
                let t = self.teacher.as_ref().ok_or_else(|| {
                    Error::Config(format!("triplet strategy {:?} needs the teacher encoder", triplet.strategy))
                })?;
                let s1 = mb
                    .next_privileged
                    .as_ref()
                    .ok_or_else(|| Error::PrivilegedAccess("batch without next privileged state".into()))?;
                let s1 = input(g, n, self.dims.privileged, s1)?;
                let anchor = t.forward(g, p, s1)?;
                let negatives = match triplet.negative_encoder {
                    NegativeEncoder::Student => student_negatives(g)?,
                    NegativeEncoder::Teacher => {
                        let sn = mb.neg_next_privileged.as_ref().ok_or_else(|| {
                            Error::PrivilegedAccess("batch without the negatives' privileged state".into())
                        })?;
                        let sn = input(g, n, self.dims.privileged, sn)?;
                        t.forward(g, p, sn)?
                    }
                };
                TripletBatch {
                    anchors: anchor,
                    positives: predicted,
                    negatives,
                    anchor_agents: mb.agents.clone(),
                    negative_agents: mb.neg_agents.clone(),
                }
            }
        };
        debug_assert_eq!(g.shape(tb.anchors), [n, l]);
        tb.validate(g, triplet.strategy.cross_agent())?;
        let l_trip = triplet_loss(g, &tb, triplet)?;

        let l_vel = match (v_hat, privileged) {
            (Some(vh), Some(s)) => {
                let truth = g.slice_cols(s, priv_layout::BASE_VEL, priv_layout::BASE_VEL + 3)?;
                Some(velocity_loss(g, vh, truth)?)
            }
            _ => None,
        };

        let sv = g.mul_scalar(l_val, T::of(ppo.value_coef));
        let st = g.mul_scalar(l_trip, T::of(triplet.coef));
        let mut total = g.add(l_ppo, sv)?;
        total = g.add(total, st)?;
        if let Some(lv) = l_vel {
            let s = g.mul_scalar(lv, T::of(ppo.vel_coef));
            total = g.add(total, s)?;
        }
        Ok(LossNodes {
            ppo: l_ppo,
            value: l_val,
            triplet: Some(l_trip),
            vel: l_vel,
            total,
            kl,
            entropy: ent,
            triplet_batch: Some(tb),
        })
    }
}

/// Losses of one update, as probed by the routing check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ppo,
    Value,
    Triplet,
    Vel,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ppo, LossKind::Value, LossKind::Triplet, LossKind::Vel];
}

/// Losses whose gradient updates `kind`.
pub fn update_rule(kind: GroupKind, vel_to_student: bool) -> Vec<LossKind> {
    match kind {
        GroupKind::Actor => vec![LossKind::Ppo],
        GroupKind::Critic => vec![LossKind::Value],
        GroupKind::Teacher => vec![LossKind::Value, LossKind::Triplet],
        GroupKind::Student if vel_to_student => vec![LossKind::Triplet, LossKind::Vel],
        GroupKind::Student => vec![LossKind::Triplet],
        GroupKind::Dynamics => vec![LossKind::Triplet],
        GroupKind::Velocity => vec![LossKind::Vel],
    }
}

impl LossNodes {
    pub fn get(&self, k: LossKind) -> Option<NodeId> {
        match k {
            LossKind::Ppo => Some(self.ppo),
            LossKind::Value => Some(self.value),
            LossKind::Triplet => self.triplet,
            LossKind::Vel => self.vel,
        }
    }
}

/// Privileged channels the critic reads, before the latent.
pub fn critic_priv_width(cfg: &ModelConfig, dims: EnvDims) -> usize {
    dims.privileged - if cfg.critic_velocity { 0 } else { 3 }
}
