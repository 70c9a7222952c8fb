//! On-policy training loop: rollout collection, routed updates, metrics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::envsim::{priv_layout, Overrides, Termination, VecEnv, REWARD_NAMES};
use crate::evalsuite::{training_metric, TrainRanges};
use crate::model::{update_rule, EnvDims, MiniBatch, Mode, Model, StepInput};
use crate::nets::{gaussian_log_prob_plain, GroupKind, ParamStore};
use crate::optim::Adam;
use crate::ppo::{adapt_lr, normalize, BufferDims, Record, RolloutBuffer};
use crate::repr::{sample_negatives, Slot};
use crate::{Error, Result};

/// Reward range used to normalize the logged training metric.
pub const TRAIN_REWARD_RANGE: (f64, f64) = (-1.0, 2.25);

/// One row of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mode: String,
    pub mean_reward: f64,
    pub reward_terms: [f64; 9],
    pub episode_length: f64,
    pub episode_return: f64,
    pub episodes: usize,
    pub falls: usize,
    pub terrain_level: f64,
    pub loss_ppo: f64,
    pub loss_value: f64,
    pub loss_triplet: f64,
    pub loss_vel: f64,
    pub kl: f64,
    pub entropy: f64,
    pub lr: f64,
    pub grad_norms: [f64; 6],
    pub anchor_pos_dist: f64,
    pub anchor_neg_dist: f64,
    pub vel_est_err: f64,
    pub nan_restarts: usize,
    pub train_metric: f64,
}

impl IterationMetrics {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["iteration", "mode", "mean_reward"].iter().map(|s| s.to_string()).collect();
        h.extend(REWARD_NAMES.iter().map(|n| format!("rew_{n}")));
        h.extend(
            [
                "episode_length",
                "episode_return",
                "episodes",
                "falls",
                "terrain_level",
                "loss_ppo",
                "loss_value",
                "loss_triplet",
                "loss_vel",
                "kl",
                "entropy",
                "lr",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        h.extend(GroupKind::ALL.iter().map(|g| format!("grad_norm_{}", g.name())));
        h.extend(
            ["anchor_pos_dist", "anchor_neg_dist", "vel_est_err", "nan_restarts", "train_metric"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    pub fn row(&self) -> Vec<String> {
        let f = |v: f64| format!("{v}");
        let mut r = vec![self.iteration.to_string(), self.mode.clone(), f(self.mean_reward)];
        r.extend(self.reward_terms.iter().map(|&v| f(v)));
        r.extend([
            f(self.episode_length),
            f(self.episode_return),
            self.episodes.to_string(),
            self.falls.to_string(),
            f(self.terrain_level),
            f(self.loss_ppo),
            f(self.loss_value),
            f(self.loss_triplet),
            f(self.loss_vel),
            f(self.kl),
            f(self.entropy),
            f(self.lr),
        ]);
        r.extend(self.grad_norms.iter().map(|&v| f(v)));
        r.extend([
            f(self.anchor_pos_dist),
            f(self.anchor_neg_dist),
            f(self.vel_est_err),
            self.nan_restarts.to_string(),
            f(self.train_metric),
        ]);
        r
    }
}

/// Training metric with the fixed normalization ranges.
pub fn logged_train_metric(terrain_level: f64, mean_reward: f64, episode_length: f64, max_episode_steps: f64) -> f64 {
    training_metric(terrain_level, mean_reward, episode_length, &TrainRanges::fixed(max_episode_steps))
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| Real::to_f64(*x)).collect()
}

fn flip_bits(v: &mut [f64]) {
    for x in v {
        *x = f64::from_bits(!x.to_bits());
    }
}

/// Context, velocity history, sampler RNG, last episode length and action
/// digest carried into a resumed trainer.
type Carried = (Vec<f64>, Vec<f64>, ChaCha8Rng, f64, u32);

/// Everything besides parameters and optimizer state needed to resume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuntimeState {
    pub env: VecEnv,
    pub ctx: Vec<f64>,
    pub vhist: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub last_episode_length: f64,
    pub action_digest: u32,
}

pub struct Trainer<T: Real> {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub adam: Adam,
    pub lr: f64,
    pub iteration: usize,
    pub env: VecEnv,
    /// Student context per agent, `N x context_width`.
    ctx: Vec<T>,
    /// Past observations for the velocity estimator, oldest first.
    vhist: Vec<f64>,
    rng: ChaCha8Rng,
    last_episode_length: f64,
    /// Bit-flip every privileged vector as it leaves the environment.
    pub privileged_canary: bool,
    /// CRC of every sampled action, for bit-level comparisons.
    pub action_digest: u32,
    /// Per-group gradients of the most recent update step.
    pub last_grads: Vec<(GroupKind, Vec<Vec<f64>>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = EnvDims::with_scan(cfg.env.height_scan);
        let (mut model, mut store) = Model::build::<T>(&cfg.model, dims, cfg.seed)?;
        if cfg.mode == Mode::PrivilegeFree && model.teacher.is_some() {
            model.drop_teacher(&mut store);
        }
        let env = VecEnv::new(cfg.env.clone(), cfg.num_agents, cfg.seed, Overrides::default());
        Self::assemble(cfg, model, store, None, env, None)
    }

    fn assemble(
        cfg: RunConfig,
        model: Model,
        store: ParamStore<T>,
        adam: Option<Adam>,
        env: VecEnv,
        runtime: Option<Carried>,
    ) -> Result<Self> {
        store.check_partition()?;
        for g in &store.groups {
            if update_rule(g.kind, cfg.ppo.vel_grad_to_student).is_empty() {
                return Err(Error::Config(format!("group {} has no update rule", g.kind)));
            }
        }
        model.check_store(&store)?;
        model.check_mode(cfg.mode)?;
        let n = cfg.num_agents;
        let adam = adam.unwrap_or_else(|| Adam::new(&store));
        let (ctx, vhist, rng, last_len, digest) = match runtime {
            Some((c, v, r, l, d)) => (to_t(&c), v, r, l, d),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(0);
                (vec![T::zero(); n * model.context_width()], vec![0.0; n * model.vhist_width()], rng, 0.0, 0)
            }
        };
        if ctx.len() != n * model.context_width() || vhist.len() != n * model.vhist_width() || env.len() != n {
            return Err(Error::Checkpoint("runtime state does not match the configured agent count".into()));
        }
        Ok(Self {
            lr: cfg.ppo.lr_init,
            cfg,
            model,
            store,
            adam,
            iteration: 0,
            env,
            ctx,
            vhist,
            rng,
            last_episode_length: last_len,
            privileged_canary: false,
            action_digest: digest,
            last_grads: Vec::new(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    fn privileged_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = rows.to_vec();
        if self.privileged_canary {
            out.iter_mut().for_each(|r| flip_bits(r));
        }
        out
    }

    /// Collect one rollout, update, and return the iteration's metrics.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let n = self.cfg.num_agents;
        let steps = self.cfg.ppo.steps_per_iteration;
        let mode = self.cfg.mode;
        let privileged_mode = mode == Mode::Privileged;
        let dims = self.model.dims;
        let cw = self.model.context_width();
        let vw = self.model.vhist_width();
        let bdims = BufferDims {
            obs: dims.obs,
            ctx: cw,
            vhist: vw,
            act: dims.act,
            privileged: privileged_mode.then_some(dims.privileged),
        };
        let mut buf = RolloutBuffer::new(n, steps, bdims);
        let snapshot = (self.store.clone(), self.adam.clone());
        let gamma = self.cfg.ppo.gamma;
        let scale = self.cfg.ppo.reward_scale;

        let mut m = IterationMetrics { iteration: self.iteration, mode: mode_name(mode).into(), ..Default::default() };
        let mut obs = self.env.observations();
        let mut privileged = if privileged_mode { self.privileged_rows(&self.env.privileged()) } else { Vec::new() };
        let mut lens = Vec::new();
        let mut rets = Vec::new();
        let mut vel_err = (0.0, 0usize);
        let mut log_std = Vec::new();

        for t in 0..steps {
            let obs_t: Vec<T> = to_t(&obs.concat());
            let vh_t: Vec<T> = to_t(&self.vhist);
            let priv_t: Option<Vec<T>> = privileged_mode.then(|| to_t(&privileged.concat()));
            let x = StepInput { n, obs: &obs_t, ctx: &self.ctx, vhist: &vh_t, privileged: priv_t.as_deref() };
            let out = self.model.step(&self.store, &x, mode)?;
            log_std = to_f64(&out.log_std);
            let mean = to_f64(&out.mean);
            let a_dim = dims.act;
            let mut actions = Vec::with_capacity(n);
            let mut logps = Vec::with_capacity(n);
            let mut hasher = crc32fast::Hasher::new_with_initial(self.action_digest);
            for i in 0..n {
                let mu = &mean[i * a_dim..(i + 1) * a_dim];
                let a: Vec<f64> = mu
                    .iter()
                    .zip(&log_std)
                    .map(|(m, ls)| {
                        let e: f64 = self.rng.sample(StandardNormal);
                        T::of(m + ls.exp() * e).to_f64()
                    })
                    .collect();
                for v in &a {
                    hasher.update(&v.to_bits().to_le_bytes());
                }
                logps.push(gaussian_log_prob_plain(mu, &log_std, &a));
                actions.push(a);
            }
            self.action_digest = hasher.finalize();
            if privileged_mode && !out.vel_est.is_empty() {
                for i in 0..n {
                    let truth = &privileged[i][priv_layout::BASE_VEL..priv_layout::BASE_VEL + 3];
                    let est = &out.vel_est[i * 3..i * 3 + 3];
                    vel_err.0 += truth.iter().zip(est).map(|(a, b)| (a - Real::to_f64(*b)).powi(2)).sum::<f64>().sqrt();
                    vel_err.1 += 1;
                }
            }

            let res = self.env.step(&actions);
            let final_priv = if privileged_mode { self.privileged_rows(&res.final_priv) } else { Vec::new() };
            let next_priv = if privileged_mode { self.privileged_rows(&res.privileged) } else { Vec::new() };

            // bootstrap through timeouts with the value of the reached state
            let timeouts: Vec<usize> = (0..n).filter(|&i| res.terminated[i] == Some(Termination::Timeout)).collect();
            let mut timeout_value = vec![0.0; n];
            if !timeouts.is_empty() {
                let k = timeouts.len();
                let o: Vec<T> = to_t(&timeouts.iter().flat_map(|&i| res.final_obs[i].clone()).collect::<Vec<_>>());
                let c: Vec<T> = timeouts.iter().flat_map(|&i| out.next_ctx[i * cw..(i + 1) * cw].to_vec()).collect();
                let v: Vec<T> =
                    to_t(&timeouts.iter().flat_map(|&i| self.shifted_vhist(i, &obs[i])).collect::<Vec<_>>());
                let p: Option<Vec<T>> = privileged_mode
                    .then(|| to_t(&timeouts.iter().flat_map(|&i| final_priv[i].clone()).collect::<Vec<_>>()));
                let x = StepInput { n: k, obs: &o, ctx: &c, vhist: &v, privileged: p.as_deref() };
                let vo = self.model.step(&self.store, &x, mode)?;
                for (j, &i) in timeouts.iter().enumerate() {
                    timeout_value[i] = vo.value[j].to_f64();
                }
            }

            for i in 0..n {
                let r = &res.rewards[i];
                m.mean_reward += r.total;
                for (acc, w) in m.reward_terms.iter_mut().zip(r.weighted()) {
                    *acc += w;
                }
                let ctx_prev = to_f64(&self.ctx[i * cw..(i + 1) * cw]);
                let ctx_next = to_f64(&out.next_ctx[i * cw..(i + 1) * cw]);
                let done = res.terminated[i].is_some();
                let reward = scale * r.total + gamma * timeout_value[i];
                let empty: &[f64] = &[];
                let rec = Record {
                    obs: &obs[i],
                    ctx_prev: &ctx_prev,
                    vhist: &self.vhist[i * vw..(i + 1) * vw],
                    privileged: if privileged_mode { &privileged[i] } else { empty },
                    action: &actions[i],
                    mean: &mean[i * dims.act..(i + 1) * dims.act],
                    log_prob: logps[i],
                    value: out.value[i].to_f64(),
                    reward,
                    done,
                    next_obs: &res.final_obs[i],
                    ctx_next: &ctx_next,
                    next_privileged: if privileged_mode { &final_priv[i] } else { empty },
                };
                buf.push(Slot { agent: i, step: t }, &rec)?;
            }

            // advance recurrent state; terminated rows restart from zero
            for i in 0..n {
                let done = res.terminated[i].is_some();
                let shifted = self.shifted_vhist(i, &obs[i]);
                let vrow = &mut self.vhist[i * vw..(i + 1) * vw];
                let crow = &mut self.ctx[i * cw..(i + 1) * cw];
                if done {
                    vrow.iter_mut().for_each(|v| *v = 0.0);
                    crow.iter_mut().for_each(|v| *v = T::zero());
                } else {
                    vrow.copy_from_slice(&shifted);
                    crow.copy_from_slice(&out.next_ctx[i * cw..(i + 1) * cw]);
                }
            }
            for f in &res.finished {
                lens.push(f.steps as f64);
                rets.push(f.ret);
                if f.termination == Termination::Fall {
                    m.falls += 1;
                }
            }
            obs = res.obs;
            privileged = next_priv;
        }

        let total = (n * steps) as f64;
        m.mean_reward /= total;
        m.reward_terms.iter_mut().for_each(|v| *v /= total);
        m.episodes = lens.len();
        if !lens.is_empty() {
            self.last_episode_length = lens.iter().sum::<f64>() / lens.len() as f64;
            m.episode_return = rets.iter().sum::<f64>() / rets.len() as f64;
        }
        m.episode_length = self.last_episode_length;
        m.terrain_level = self.env.mean_level();
        m.vel_est_err = if vel_err.1 > 0 { vel_err.0 / vel_err.1 as f64 } else { 0.0 };

        // bootstrap values after the last step
        let obs_t: Vec<T> = to_t(&obs.concat());
        let vh_t: Vec<T> = to_t(&self.vhist);
        let priv_t: Option<Vec<T>> = privileged_mode.then(|| to_t(&privileged.concat()));
        let x = StepInput { n, obs: &obs_t, ctx: &self.ctx, vhist: &vh_t, privileged: priv_t.as_deref() };
        let boot: Vec<f64> = to_f64(&self.model.step(&self.store, &x, mode)?.value);

        let mut adv = buf.advantages(&boot, gamma, self.cfg.ppo.lam)?;
        if self.cfg.ppo.normalize_advantages {
            normalize(&mut adv.advantages);
        }
        match self.update(&buf, &adv.advantages, &adv.returns, &log_std, &mut m) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => {
                self.store = snapshot.0;
                self.adam = snapshot.1;
                self.lr = (self.lr / 2.0).max(self.cfg.ppo.lr_min);
                m.nan_restarts += 1;
            }
            Err(e) => return Err(e),
        }
        buf.clear();
        m.lr = self.lr;
        m.train_metric =
            logged_train_metric(m.terrain_level, m.mean_reward, m.episode_length, self.cfg.env.episode_steps() as f64);
        self.iteration += 1;
        Ok(m)
    }

    fn shifted_vhist(&self, i: usize, obs: &[f64]) -> Vec<f64> {
        let vw = self.model.vhist_width();
        if vw == 0 {
            return Vec::new();
        }
        let row = &self.vhist[i * vw..(i + 1) * vw];
        let o = obs.len();
        let mut v = row[o..].to_vec();
        v.extend_from_slice(obs);
        v
    }

    fn minibatch(
        &mut self,
        buf: &RolloutBuffer,
        agents: &[usize],
        adv: &[f64],
        ret: &[f64],
        log_std: &[f64],
    ) -> Result<MiniBatch<T>> {
        let steps = buf.steps;
        let slots: Vec<Slot> =
            agents.iter().flat_map(|&a| (0..steps).map(move |t| Slot { agent: a, step: t })).collect();
        let mut mb = MiniBatch { n: slots.len(), old_log_std: to_t(log_std), ..Default::default() };
        let sealed = buf.is_sealed();
        let mut pv = Vec::new();
        let mut npv = Vec::new();
        for &s in &slots {
            let k = s.agent * steps + s.step;
            mb.obs.extend(to_t::<T>(buf.obs(s)));
            mb.ctx_prev.extend(to_t::<T>(buf.ctx_prev(s)));
            mb.vhist.extend(to_t::<T>(buf.vhist(s)));
            mb.action.extend(to_t::<T>(buf.action(s)));
            mb.old_mean.extend(to_t::<T>(buf.mean(s)));
            mb.old_log_prob.push(T::of(buf.log_prob(s)));
            mb.advantages.push(T::of(adv[k]));
            mb.returns.push(T::of(ret[k]));
            mb.next_obs.extend(to_t::<T>(buf.next_obs(s)));
            mb.ctx_next.extend(to_t::<T>(buf.ctx_next(s)));
            if !sealed {
                pv.extend(to_t::<T>(buf.privileged(s)?));
                npv.extend(to_t::<T>(buf.next_privileged(s)?));
            }
            mb.agents.push(s.agent);
        }
        if !sealed {
            mb.privileged = Some(pv);
            mb.next_privileged = Some(npv);
        }
        if self.model.student.is_some() {
            let negs = sample_negatives(&mut self.rng, self.cfg.triplet.strategy, &slots, buf.agents, steps)?;
            let mut nps = Vec::new();
            for s in negs {
                mb.neg_next_obs.extend(to_t::<T>(buf.next_obs(s)));
                mb.neg_ctx_next.extend(to_t::<T>(buf.ctx_next(s)));
                if !sealed {
                    nps.extend(to_t::<T>(buf.next_privileged(s)?));
                }
                mb.neg_agents.push(s.agent);
            }
            if !sealed {
                mb.neg_next_privileged = Some(nps);
            }
        }
        Ok(mb)
    }

    fn update(
        &mut self,
        buf: &RolloutBuffer,
        adv: &[f64],
        ret: &[f64],
        log_std: &[f64],
        m: &mut IterationMetrics,
    ) -> Result<()> {
        let ppo = self.cfg.ppo.clone();
        let trip = self.cfg.triplet.clone();
        let mode = self.cfg.mode;
        let trainable = self.model.trainable(mode);
        let mut agents: Vec<usize> = (0..buf.agents).collect();
        let chunk = buf.agents.div_ceil(ppo.minibatches);
        let mut count = 0.0;
        let mut acc = [0.0f64; 8];
        let mut norms = [0.0f64; 6];
        for _ in 0..ppo.epochs {
            agents.shuffle(&mut self.rng);
            for part in agents.chunks(chunk) {
                let mb = self.minibatch(buf, part, adv, ret, log_std)?;
                let mut g = Graph::<T>::new();
                let bound = self.store.bind(&mut g, &trainable);
                let l = self.model.losses(&mut g, &bound, &mb, mode, &ppo, &trip)?;
                let total = g.scalar_value(l.total).to_f64();
                if !total.is_finite() {
                    return Err(Error::NonFinite(format!("total loss {total} at iteration {}", self.iteration)));
                }
                g.backward(l.total)?;
                let kl = g.scalar_value(l.kl).to_f64();
                let mut grads = Vec::with_capacity(trainable.len());
                for &kind in &trainable {
                    let nodes = bound.group(kind).expect("trainable group bound");
                    let gs: Vec<Vec<f64>> = nodes
                        .iter()
                        .map(|&id| match g.grad(id) {
                            Some(v) => to_f64(v),
                            None => vec![0.0; g.value(id).data.len()],
                        })
                        .collect();
                    let norm = gs.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
                    if !norm.is_finite() {
                        return Err(Error::NonFinite(format!("{kind} gradient norm {norm}")));
                    }
                    grads.push((kind, gs));
                }
                self.lr = adapt_lr(kl, self.lr, &ppo);
                for (kind, gs) in &grads {
                    let norm = self.adam.step(&mut self.store, *kind, gs, self.lr, ppo.max_grad_norm)?;
                    norms[GroupKind::ALL.iter().position(|k| k == kind).unwrap()] += norm;
                }
                self.last_grads = grads;
                let val = |id: Option<crate::autodiff::NodeId>| id.map_or(0.0, |i| g.scalar_value(i).to_f64());
                acc[0] += val(Some(l.ppo));
                acc[1] += val(Some(l.value));
                acc[2] += val(l.triplet);
                acc[3] += val(l.vel);
                acc[4] += kl;
                acc[5] += val(Some(l.entropy));
                if let Some(tb) = &l.triplet_batch {
                    let (dp, dn) = triplet_distances(&g, tb, trip.normalize);
                    acc[6] += dp;
                    acc[7] += dn;
                }
                count += 1.0;
            }
        }
        m.loss_ppo = acc[0] / count;
        m.loss_value = acc[1] / count;
        m.loss_triplet = acc[2] / count;
        m.loss_vel = acc[3] / count;
        m.kl = acc[4] / count;
        m.entropy = acc[5] / count;
        m.anchor_pos_dist = acc[6] / count;
        m.anchor_neg_dist = acc[7] / count;
        for (o, v) in m.grad_norms.iter_mut().zip(norms) {
            *o = v / count;
        }
        Ok(())
    }

    /// Resumable snapshot at an iteration boundary.
    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        let rt = RuntimeState {
            env: self.env.clone(),
            ctx: to_f64(&self.ctx),
            vhist: self.vhist.clone(),
            rng: self.rng.clone(),
            last_episode_length: self.last_episode_length,
            action_digest: self.action_digest,
        };
        Ok(Checkpoint {
            config_toml: self.cfg.to_toml(),
            iteration: self.iteration as u64,
            lr: self.lr,
            store: self.store.clone(),
            adam: Some(self.adam.clone()),
            runtime: Some(serde_json::to_string(&rt).map_err(|e| Error::Checkpoint(e.to_string()))?),
        })
    }

    /// Continue exactly where `ck` left off.
    pub fn resume(ck: Checkpoint<T>) -> Result<Self> {
        let cfg = RunConfig::parse(&ck.config_toml, &[])?;
        let dims = EnvDims::with_scan(cfg.env.height_scan);
        let (mut model, _) = Model::build::<T>(&cfg.model, dims, cfg.seed)?;
        if !ck.store.has_group(GroupKind::Teacher) {
            model.teacher = None;
            model.cfg.teacher = false;
        }
        let rt: RuntimeState = serde_json::from_str(
            ck.runtime.as_deref().ok_or_else(|| Error::Checkpoint("checkpoint has no runtime state".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("runtime state: {e}")))?;
        let mut t = Self::assemble(
            cfg,
            model,
            ck.store,
            ck.adam,
            rt.env,
            Some((rt.ctx, rt.vhist, rt.rng, rt.last_episode_length, rt.action_digest)),
        )?;
        t.iteration = ck.iteration as usize;
        t.lr = ck.lr;
        Ok(t)
    }

    /// Start privilege-free fine-tuning from a privileged checkpoint. The
    /// teacher is dropped and the velocity estimator frozen; the environment
    /// restarts from `cfg`'s seed.
    pub fn finetune(ck: Checkpoint<T>, mut cfg: RunConfig) -> Result<Self> {
        let src = RunConfig::parse(&ck.config_toml, &[])?;
        if src.mode != Mode::Privileged {
            return Err(Error::Config("fine-tuning starts from a privileged-mode checkpoint".into()));
        }
        if src.model.privileged_actor {
            return Err(Error::Config("the privileged baseline cannot be fine-tuned without privileged inputs".into()));
        }
        if cfg.triplet.strategy != crate::repr::Strategy::PrivilegeFree {
            return Err(Error::Config(format!(
                "fine-tuning requires the privilege_free triplet strategy, got {:?}",
                cfg.triplet.strategy
            )));
        }
        cfg.mode = Mode::PrivilegeFree;
        cfg.model = src.model.clone();
        cfg.model.teacher = false;
        cfg.env.height_scan = src.env.height_scan;
        cfg.variant = src.variant;
        cfg.validate()?;
        let dims = EnvDims::with_scan(cfg.env.height_scan);
        let (model, _) = Model::build::<T>(&cfg.model, dims, cfg.seed)?;
        let mut store = ck.store;
        store.remove_group(GroupKind::Teacher);
        let mut adam = ck.adam.unwrap_or_else(|| Adam::new(&store));
        adam.drop_group(GroupKind::Teacher);
        let env = VecEnv::new(cfg.env.clone(), cfg.num_agents, cfg.seed, Overrides::default());
        let mut t = Self::assemble(cfg, model, store, Some(adam), env, None)?;
        t.lr = ck.lr;
        Ok(t)
    }
}

/// Mean anchor-positive and anchor-negative squared distances of a batch.
fn triplet_distances<T: Real>(g: &Graph<T>, tb: &crate::repr::TripletBatch, normalize: bool) -> (f64, f64) {
    let a = g.value(tb.anchors);
    let p = g.value(tb.positives);
    let n = g.value(tb.negatives);
    let rows = a.rows;
    let prep = |r: &[T]| -> Vec<f64> {
        let v: Vec<f64> = r.iter().map(|x| Real::to_f64(*x)).collect();
        if normalize {
            let s = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            v.iter().map(|x| x / s).collect()
        } else {
            v
        }
    };
    let (mut dp, mut dn) = (0.0, 0.0);
    for r in 0..rows {
        let (ar, pr, nr) = (prep(a.row(r)), prep(p.row(r)), prep(n.row(r)));
        dp += ar.iter().zip(&pr).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        dn += ar.iter().zip(&nr).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    (dp / rows as f64, dn / rows as f64)
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Privileged => "privileged",
        Mode::PrivilegeFree => "privilege_free",
    }
}
