//! Self-checks of the learning machinery: finite-difference gradients,
//! gradient routing, GAE against brute-force summation, privileged-channel
//! independence and run determinism.
//!
//! Checks return reports rather than panicking so that they can back both
//! the test suite and the acceptance summary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::model::{update_rule, EncoderKind, EnvDims, LossKind, MiniBatch, Mode, Model, ModelConfig, StepInput};
use crate::nets::{
    gaussian_kl, gaussian_log_prob, gaussian_log_prob_plain, Bound, CellKind, GroupKind, ParamStore, TcnSpec,
};
use crate::ppo::{compute_gae, ppo_surrogate, value_loss, velocity_loss, PpoConfig};
use crate::repr::{triplet_loss, Strategy, TripletBatch, TripletConfig};
use crate::trainer::Trainer;
use crate::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// analytically are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst finite-difference disagreement over a set of random coordinates.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.max_rel_err < FD_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Magnitude in `[0.1, 1]` with random sign: keeps inputs away from the
/// kinks of relu, elu, clamp and the hinge.
fn away(rng: &mut ChaCha8Rng) -> f64 {
    let m = uniform(rng, 0.1, 1.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, f: fn(&mut ChaCha8Rng) -> f64) -> Tensor<f64> {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| f(rng)).collect()).expect("shape")
}

fn positive(rng: &mut ChaCha8Rng) -> f64 {
    uniform(rng, 0.5, 2.0)
}

/// Scalar readout `sum_k <out_k, w_k>` with fixed weights, so that every
/// output entry contributes.
struct Readout {
    weights: Vec<Tensor<f64>>,
}

impl Readout {
    fn new(g: &Graph<f64>, outs: &[NodeId], rng: &mut ChaCha8Rng) -> Self {
        let weights = outs
            .iter()
            .map(|&o| {
                let [r, c] = g.shape(o);
                tensor(rng, r, c, away)
            })
            .collect();
        Self { weights }
    }

    fn apply(&self, g: &mut Graph<f64>, outs: &[NodeId]) -> Result<NodeId> {
        let mut total = None;
        for (&o, w) in outs.iter().zip(&self.weights) {
            let wn = g.constant(w.clone());
            let prod = g.mul(o, wn)?;
            let s = g.sum(prod);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        total.ok_or_else(|| Error::Shape("readout of no outputs".into()))
    }
}

type InputFn<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<Vec<NodeId>> + 'a;
type ParamFn<'a> = dyn Fn(&mut Graph<f64>, &Bound) -> Result<Vec<NodeId>> + 'a;

/// Finite differences with respect to graph inputs.
pub fn fd_inputs(name: &str, inputs: &[Tensor<f64>], cases: usize, seed: u64, f: &InputFn<'_>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let outs = f(&mut g, &leaves)?;
    let readout = Readout::new(&g, &outs, &mut rng);
    let root = readout.apply(&mut g, &outs)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, t)| g.grad(l).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let outs = f(&mut g, &leaves)?;
        let root = readout.apply(&mut g, &outs)?;
        Ok(g.scalar_value(root))
    };
    let sizes: Vec<usize> = inputs.iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rep = GradReport { name: name.into(), cases, max_rel_err: 0.0, worst: String::new() };
    for _ in 0..cases {
        let mut k = rng.random_range(0..total);
        let mut i = 0;
        while k >= sizes[i] {
            k -= sizes[i];
            i += 1;
        }
        let mut plus = inputs.to_vec();
        plus[i].data[k] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data[k] -= FD_STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i][k], numeric);
        if e >= rep.max_rel_err {
            rep.max_rel_err = e;
            rep.worst = format!("input {i}[{k}]: analytic {:.9e}, numeric {numeric:.9e}", analytic[i][k]);
        }
    }
    Ok(rep)
}

/// Finite differences with respect to the parameters of `groups`.
pub fn fd_params(
    name: &str,
    store: &ParamStore<f64>,
    groups: &[GroupKind],
    cases: usize,
    seed: u64,
    f: &ParamFn<'_>,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let bound = store.bind(&mut g, groups);
    let outs = f(&mut g, &bound)?;
    let readout = Readout::new(&g, &outs, &mut rng);
    let root = readout.apply(&mut g, &outs)?;
    g.backward(root)?;
    // (group, tensor index, coordinate, analytic)
    let mut coords = Vec::new();
    for &kind in groups {
        let nodes = bound.group(kind).ok_or_else(|| Error::Config(format!("group {kind} not in store")))?;
        for (pi, &node) in nodes.iter().enumerate() {
            let n = g.value(node).data.len();
            let grad = g.grad(node).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            coords.extend(grad.into_iter().enumerate().map(|(k, a)| (kind, pi, k, a)));
        }
    }
    if coords.is_empty() {
        return Err(Error::Config(format!("{name}: no parameters to check")));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g, &[]);
        let outs = f(&mut g, &b)?;
        let root = readout.apply(&mut g, &outs)?;
        Ok(g.scalar_value(root))
    };
    let mut rep = GradReport { name: name.into(), cases, max_rel_err: 0.0, worst: String::new() };
    for _ in 0..cases {
        let (kind, pi, k, a) = coords[rng.random_range(0..coords.len())];
        let mut plus = store.clone();
        plus.group_mut(kind).unwrap().params[pi].data[k] += FD_STEP;
        let mut minus = store.clone();
        minus.group_mut(kind).unwrap().params[pi].data[k] -= FD_STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        let e = rel_err(a, numeric);
        if e >= rep.max_rel_err {
            let pname = &store.group(kind).unwrap().params[pi].name;
            rep.max_rel_err = e;
            rep.worst = format!("{pname}[{k}]: analytic {a:.9e}, numeric {numeric:.9e}");
        }
    }
    Ok(rep)
}

/// Finite-difference checks of every differentiable graph operation.
pub fn op_gradient_checks(cases: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut s = seed;
    let mut check = |name: &str, inputs: Vec<Tensor<f64>>, f: &InputFn<'_>| -> Result<()> {
        s = s.wrapping_add(1);
        out.push(fd_inputs(name, &inputs, cases, s, f)?);
        Ok(())
    };
    let a = tensor(&mut rng, 3, 4, away);
    let b = tensor(&mut rng, 3, 4, away);
    let row = tensor(&mut rng, 1, 4, away);
    let pos = tensor(&mut rng, 3, 4, positive);
    let w = tensor(&mut rng, 4, 2, away);
    check("matmul", vec![a.clone(), w], &|g, x| Ok(vec![g.matmul(x[0], x[1])?]))?;
    check("add", vec![a.clone(), b.clone()], &|g, x| Ok(vec![g.add(x[0], x[1])?]))?;
    check("add_broadcast_row", vec![a.clone(), row.clone()], &|g, x| Ok(vec![g.add(x[0], x[1])?]))?;
    check("sub", vec![a.clone(), b.clone()], &|g, x| Ok(vec![g.sub(x[0], x[1])?]))?;
    check("mul", vec![a.clone(), b.clone()], &|g, x| Ok(vec![g.mul(x[0], x[1])?]))?;
    check("mul_broadcast_row", vec![a.clone(), row], &|g, x| Ok(vec![g.mul(x[0], x[1])?]))?;
    check("div", vec![a.clone(), pos.clone()], &|g, x| Ok(vec![g.div(x[0], x[1])?]))?;
    check("add_scalar", vec![a.clone()], &|g, x| Ok(vec![g.add_scalar(x[0], 0.7)]))?;
    check("mul_scalar", vec![a.clone()], &|g, x| Ok(vec![g.mul_scalar(x[0], -1.3)]))?;
    check("neg", vec![a.clone()], &|g, x| Ok(vec![g.neg(x[0])]))?;
    check("exp", vec![a.clone()], &|g, x| Ok(vec![g.exp(x[0])]))?;
    check("log", vec![pos.clone()], &|g, x| Ok(vec![g.log(x[0])]))?;
    check("tanh", vec![a.clone()], &|g, x| Ok(vec![g.tanh(x[0])]))?;
    check("sigmoid", vec![a.clone()], &|g, x| Ok(vec![g.sigmoid(x[0])]))?;
    check("elu", vec![a.clone()], &|g, x| Ok(vec![g.elu(x[0])]))?;
    check("relu", vec![a.clone()], &|g, x| Ok(vec![g.relu(x[0])]))?;
    check("sqrt", vec![pos], &|g, x| Ok(vec![g.sqrt(x[0])]))?;
    check("square", vec![a.clone()], &|g, x| Ok(vec![g.square(x[0])]))?;
    // bounds at +-0.05 fall between the sampled magnitudes
    check("clamp", vec![a.clone()], &|g, x| Ok(vec![g.clamp(x[0], -0.05, 0.05)]))?;
    check("clamp_wide", vec![a.clone()], &|g, x| Ok(vec![g.clamp(x[0], -0.5, 0.55)]))?;
    check("sum_rows", vec![a.clone()], &|g, x| Ok(vec![g.sum_rows(x[0])]))?;
    check("sq_norm_rows", vec![a.clone()], &|g, x| Ok(vec![g.sq_norm_rows(x[0])]))?;
    check("sum", vec![a.clone()], &|g, x| Ok(vec![g.sum(x[0])]))?;
    check("mean", vec![a.clone()], &|g, x| Ok(vec![g.mean(x[0])]))?;
    check("concat", vec![a.clone(), b.clone()], &|g, x| Ok(vec![g.concat(&[x[0], x[1], x[0]])?]))?;
    check("slice_cols", vec![a.clone()], &|g, x| Ok(vec![g.slice_cols(x[0], 1, 3)?]))?;
    check("gather", vec![a.clone()], &|g, x| Ok(vec![g.gather(x[0], vec![0, 5, 5, 11, 2, 7], 2, 3)?]))?;
    check("reshape", vec![a.clone()], &|g, x| Ok(vec![g.reshape(x[0], 2, 6)?]))?;
    check("stop_gradient_mixed", vec![a, b], &|g, x| {
        let s = g.stop_gradient(x[1]);
        let m = g.mul(x[0], x[0])?;
        let sg_of_a = g.stop_gradient(x[0]);
        let z = g.mul(sg_of_a, s)?;
        let zz = g.sub(m, z)?;
        // value a^2 with b entering only through stopped nodes, so the
        // analytic gradient matches numerics only if nothing leaks
        Ok(vec![g.add(zz, z)?])
    })?;
    Ok(out)
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        latent: 6,
        cell: CellKind::Gru,
        recurrent_hidden: 5,
        history_steps: 3,
        history_hidden: vec![7],
        tcn: TcnSpec { channels: vec![4, 4], kernels: vec![4, 3], strides: vec![2, 1], history: 10 },
        teacher_hidden: vec![7],
        actor_hidden: vec![7, 5],
        critic_hidden: vec![7],
        dynamics_hidden: vec![6],
        velocity_hidden: vec![5],
        velocity_history: 2,
        init_log_std: -0.5,
        ..ModelConfig::default()
    }
}

const CHECK_SCAN: usize = 3;

/// Finite-difference checks of every network's parameters.
pub fn network_gradient_checks(cases: usize, seed: u64) -> Result<Vec<GradReport>> {
    let dims = EnvDims::with_scan(CHECK_SCAN);
    let n = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let base = small_model_config();
    let (m, store) = Model::build::<f64>(&base, dims, seed)?;
    let priv_in = tensor(&mut rng, n, dims.privileged, away);
    let teacher = m.teacher.as_ref().expect("teacher");
    out.push(fd_params("teacher encoder", &store, &[GroupKind::Teacher], cases, seed + 1, &|g, p| {
        let x = g.constant(priv_in.clone());
        Ok(vec![teacher.forward(g, p, x)?])
    })?);
    let cin = tensor(&mut rng, n, m.critic.input(), away);
    out.push(fd_params("critic", &store, &[GroupKind::Critic], cases, seed + 2, &|g, p| {
        let x = g.constant(cin.clone());
        Ok(vec![m.critic.forward(g, p, x)?])
    })?);
    let dynamics = m.dynamics.as_ref().expect("dynamics");
    let din = tensor(&mut rng, n, dynamics.input(), away);
    out.push(fd_params("dynamics model", &store, &[GroupKind::Dynamics], cases, seed + 3, &|g, p| {
        let x = g.constant(din.clone());
        Ok(vec![dynamics.forward(g, p, x)?])
    })?);
    let velocity = m.velocity.as_ref().expect("velocity");
    let vin = tensor(&mut rng, n, velocity.input(), away);
    out.push(fd_params("velocity estimator", &store, &[GroupKind::Velocity], cases, seed + 4, &|g, p| {
        let x = g.constant(vin.clone());
        Ok(vec![velocity.forward(g, p, x)?])
    })?);
    let ain = tensor(&mut rng, n, m.actor.mlp.input(), away);
    out.push(fd_params("actor", &store, &[GroupKind::Actor], cases, seed + 5, &|g, p| {
        let x = g.constant(ain.clone());
        let (mean, ls) = m.actor.forward(g, p, x)?;
        Ok(vec![mean, ls])
    })?);
    let students = [
        ("student gru", EncoderKind::Recurrent, CellKind::Gru),
        ("student lstm", EncoderKind::Recurrent, CellKind::Lstm),
        ("student history mlp", EncoderKind::Mlp, CellKind::Gru),
        ("student tcn", EncoderKind::Tcn, CellKind::Gru),
    ];
    for (k, (name, encoder, cell)) in students.into_iter().enumerate() {
        let cfg = ModelConfig { encoder, cell, ..base.clone() };
        let (m, store) = Model::build::<f64>(&cfg, dims, seed + 10 + k as u64)?;
        let enc = m.student.as_ref().expect("student");
        let obs = tensor(&mut rng, n, dims.obs, away);
        let ctx = tensor(&mut rng, n, enc.context_width(), away);
        out.push(fd_params(name, &store, &[GroupKind::Student], cases, seed + 20 + k as u64, &|g, p| {
            let o = g.constant(obs.clone());
            let c = g.constant(ctx.clone());
            let (z, next) = enc.encode(g, p, o, c)?;
            Ok(vec![z, next])
        })?);
    }
    Ok(out)
}

/// Random mini-batch consistent with `model`. Old log-probabilities sit
/// near the current policy's so that both clip branches occur.
pub fn random_minibatch(
    model: &Model,
    store: &ParamStore<f64>,
    n: usize,
    mode: Mode,
    seed: u64,
) -> Result<MiniBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dims;
    let mut v = |len: usize| -> Vec<f64> { (0..len).map(|_| uniform(&mut rng, -1.0, 1.0)).collect() };
    let obs = v(n * d.obs);
    let ctx_prev = v(n * model.context_width());
    let vhist = v(n * model.vhist_width());
    let next_obs = v(n * d.obs);
    let ctx_next = v(n * model.context_width());
    let neg_next_obs = v(n * d.obs);
    let neg_ctx_next = v(n * model.context_width());
    let advantages = v(n);
    let returns = v(n);
    let privileged = v(n * d.privileged);
    let next_privileged = v(n * d.privileged);
    let neg_next_privileged = v(n * d.privileged);
    let noise = v(n * d.act);
    let jitter = v(n);
    let step_mode = if model.cfg.privileged_actor { Mode::Privileged } else { mode };
    let x = StepInput {
        n,
        obs: &obs,
        ctx: &ctx_prev,
        vhist: &vhist,
        privileged: (step_mode == Mode::Privileged).then_some(privileged.as_slice()),
    };
    let out = model.step(store, &x, step_mode)?;
    let a = d.act;
    let mut action = Vec::with_capacity(n * a);
    let mut old_log_prob = Vec::with_capacity(n);
    for r in 0..n {
        let mean = &out.mean[r * a..(r + 1) * a];
        let act: Vec<f64> = (0..a).map(|j| mean[j] + out.log_std[j].exp() * noise[r * a + j]).collect();
        old_log_prob.push(gaussian_log_prob_plain(mean, &out.log_std, &act) + 0.3 * jitter[r]);
        action.extend(act);
    }
    let old_mean: Vec<f64> = out.mean.iter().zip(&noise).map(|(m, e)| m + 0.05 * e).collect();
    let agents: Vec<usize> = (0..n).map(|r| r % 4).collect();
    let neg_agents = agents.iter().map(|&ag| (ag + 1 + rng.random_range(0..3)) % 4).collect();
    let privileged_mode = mode == Mode::Privileged;
    Ok(MiniBatch {
        n,
        obs,
        ctx_prev,
        vhist,
        action,
        old_mean,
        old_log_std: out.log_std.iter().map(|x| x + 0.05).collect(),
        old_log_prob,
        advantages,
        returns,
        next_obs,
        ctx_next,
        privileged: privileged_mode.then_some(privileged),
        next_privileged: privileged_mode.then_some(next_privileged),
        neg_next_obs,
        neg_ctx_next,
        neg_next_privileged: privileged_mode.then_some(neg_next_privileged),
        agents,
        neg_agents,
    })
}

/// Groups that the update rule routes loss `l` to.
pub fn routed_groups(l: LossKind, vel_to_student: bool) -> Vec<GroupKind> {
    GroupKind::ALL.into_iter().filter(|&g| update_rule(g, vel_to_student).contains(&l)).collect()
}

/// Finite-difference checks of each loss with respect to the loss inputs
/// and, through the full model, the parameter groups it is routed to.
pub fn loss_gradient_checks(cases: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, a, l) = (5, 4, 6);
    let mean = tensor(&mut rng, n, a, away);
    let ls = tensor(&mut rng, 1, a, |r| uniform(r, -0.8, -0.2));
    let act: Tensor<f64> = Tensor::new(n, a, mean.data.iter().map(|m| m + 0.5 * away(&mut rng)).collect())?;
    let adv = tensor(&mut rng, n, 1, away);
    let old_lp = {
        let mut g = Graph::new();
        let (m, s, x) = (g.constant(mean.clone()), g.constant(ls.clone()), g.constant(act.clone()));
        let lp = gaussian_log_prob(&mut g, m, s, x)?;
        let v: Vec<f64> = g.value(lp).data.iter().map(|v| v + 0.25 * away(&mut rng)).collect();
        Tensor::new(n, 1, v)?
    };
    out.push(fd_inputs("ppo surrogate", &[mean.clone(), ls.clone()], cases, seed + 1, &|g, x| {
        let acts = g.constant(act.clone());
        let lp = gaussian_log_prob(g, x[0], x[1], acts)?;
        let old = g.constant(old_lp.clone());
        let ad = g.constant(adv.clone());
        Ok(vec![ppo_surrogate(g, lp, old, ad, 0.2)?])
    })?);
    let old_mean = tensor(&mut rng, n, a, away);
    let old_ls = tensor(&mut rng, 1, a, |r| uniform(r, -0.8, -0.2));
    out.push(fd_inputs("gaussian kl", &[mean, ls], cases, seed + 2, &|g, x| {
        let (om, os) = (g.constant(old_mean.clone()), g.constant(old_ls.clone()));
        let kl = gaussian_kl(g, om, os, x[0], x[1])?;
        Ok(vec![g.mean(kl)])
    })?);
    let pred = tensor(&mut rng, n, 1, away);
    let ret = tensor(&mut rng, n, 1, away);
    out.push(fd_inputs("value loss", &[pred, ret], cases, seed + 3, &|g, x| Ok(vec![value_loss(g, x[0], x[1])?]))?);
    let vp = tensor(&mut rng, n, 3, away);
    let vt = tensor(&mut rng, n, 3, away);
    out.push(fd_inputs("velocity loss", &[vp, vt], cases, seed + 4, &|g, x| Ok(vec![velocity_loss(g, x[0], x[1])?]))?);
    for normalize in [true, false] {
        let anchors = tensor(&mut rng, n, l, away);
        let pos = tensor(&mut rng, n, l, away);
        let neg = tensor(&mut rng, n, l, away);
        let cfg = TripletConfig { normalize, ..TripletConfig::default() };
        let name = if normalize { "triplet loss (normalized)" } else { "triplet loss (raw)" };
        out.push(fd_inputs(name, &[anchors, pos, neg], cases, seed + 5 + normalize as u64, &|g, x| {
            let tb = TripletBatch {
                anchors: x[0],
                positives: x[1],
                negatives: x[2],
                anchor_agents: (0..n).collect(),
                negative_agents: (0..n).map(|i| i + 1).collect(),
            };
            Ok(vec![triplet_loss(g, &tb, &cfg)?])
        })?);
    }

    // through the model, privileged mode with teacher-anchored triplets
    let dims = EnvDims::with_scan(CHECK_SCAN);
    let (m, store) = Model::build::<f64>(&small_model_config(), dims, seed)?;
    let mb = random_minibatch(&m, &store, 6, Mode::Privileged, seed + 7)?;
    let ppo = PpoConfig::default();
    let trip = TripletConfig::default();
    for (k, loss) in LossKind::ALL.into_iter().enumerate() {
        for group in routed_groups(loss, ppo.vel_grad_to_student) {
            let name = format!("{} loss wrt {}", loss_name(loss), group);
            out.push(fd_params(&name, &store, &[group], cases, seed + 100 + 10 * k as u64 + group as u64, &|g, p| {
                let ln = m.losses(g, p, &mb, Mode::Privileged, &ppo, &trip)?;
                Ok(vec![ln.get(loss).ok_or_else(|| Error::Config(format!("no {loss:?} loss")))?])
            })?);
        }
    }
    Ok(out)
}

pub fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::Ppo => "ppo",
        LossKind::Value => "value",
        LossKind::Triplet => "triplet",
        LossKind::Vel => "velocity",
    }
}

/// One cell of the routing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingCell {
    pub group: GroupKind,
    pub loss: LossKind,
    pub expected: bool,
    /// Largest absolute gradient entry; exactly 0.0 when nothing flows.
    pub max_abs: f64,
}

impl RoutingCell {
    pub fn ok(&self) -> bool {
        self.expected == (self.max_abs != 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct RoutingReport {
    pub label: String,
    pub cells: Vec<RoutingCell>,
}

impl RoutingReport {
    pub fn passed(&self) -> bool {
        !self.cells.is_empty() && self.cells.iter().all(RoutingCell::ok)
    }

    pub fn cell(&self, group: GroupKind, loss: LossKind) -> Option<&RoutingCell> {
        self.cells.iter().find(|c| c.group == group && c.loss == loss)
    }
}

/// Backpropagate each loss alone and record which groups receive gradient.
/// Every group of the model is bound as trainable, so leaks into frozen or
/// unrouted groups show up as nonzero entries.
pub fn routing_matrix(
    label: &str,
    cfg: &ModelConfig,
    mode: Mode,
    triplet: &TripletConfig,
    ppo: &PpoConfig,
    seed: u64,
) -> Result<RoutingReport> {
    let (mut m, mut store) = Model::build::<f64>(cfg, EnvDims::with_scan(CHECK_SCAN), seed)?;
    if mode == Mode::PrivilegeFree && m.teacher.is_some() {
        m.drop_teacher(&mut store);
    }
    let mb = random_minibatch(&m, &store, 8, mode, seed + 1)?;
    let groups = m.groups();
    let mut cells = Vec::new();
    for loss in LossKind::ALL {
        let mut g = Graph::new();
        let p = store.bind(&mut g, &groups);
        let ln = m.losses(&mut g, &p, &mb, mode, ppo, triplet)?;
        let Some(root) = ln.get(loss) else { continue };
        g.backward(root)?;
        for &kind in &groups {
            let max_abs = p
                .group(kind)
                .unwrap()
                .iter()
                .filter_map(|&id| g.grad(id))
                .flatten()
                .fold(0.0f64, |acc, x| acc.max(x.abs()));
            // the velocity estimator is frozen without privileged targets
            let trainable = mode == Mode::Privileged || kind != GroupKind::Velocity;
            let expected = trainable && update_rule(kind, ppo.vel_grad_to_student).contains(&loss);
            cells.push(RoutingCell { group: kind, loss, expected, max_abs });
        }
    }
    Ok(RoutingReport { label: label.into(), cells })
}

/// Routing matrices of the configurations the trainer supports.
pub fn routing_checks(seed: u64) -> Result<Vec<RoutingReport>> {
    let cfg = small_model_config();
    let ppo = PpoConfig::default();
    let ta = TripletConfig::default();
    let rn = TripletConfig { strategy: Strategy::RandomNegative, ..TripletConfig::default() };
    let pf = TripletConfig { strategy: Strategy::PrivilegeFree, ..TripletConfig::default() };
    let student_neg =
        TripletConfig { negative_encoder: crate::repr::NegativeEncoder::Student, ..TripletConfig::default() };
    let vel_student = PpoConfig { vel_grad_to_student: true, ..PpoConfig::default() };
    let no_teacher = ModelConfig { teacher: false, ..cfg.clone() };
    Ok(vec![
        routing_matrix("teacher-anchored", &cfg, Mode::Privileged, &ta, &ppo, seed)?,
        routing_matrix("teacher-anchored, student negatives", &cfg, Mode::Privileged, &student_neg, &ppo, seed)?,
        routing_matrix("random negatives", &cfg, Mode::Privileged, &rn, &ppo, seed)?,
        routing_matrix("velocity loss reaches student", &cfg, Mode::Privileged, &ta, &vel_student, seed)?,
        routing_matrix("privileged critic, no teacher", &no_teacher, Mode::Privileged, &pf, &ppo, seed)?,
        routing_matrix("privilege-free", &cfg, Mode::PrivilegeFree, &pf, &ppo, seed)?,
    ])
}

/// Advantages by explicit `sum_k (gamma lambda)^k delta_{t+k}`, stopping
/// after the first terminal step.
pub fn gae_brute_force(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            for k in t..n {
                let live = if dones[k] { 0.0 } else { 1.0 };
                let delta = rewards[k] + gamma * values[k + 1] * live - values[k];
                a += (gamma * lam).powi((k - t) as i32) * delta;
                if dones[k] {
                    break;
                }
            }
            a
        })
        .collect()
}

/// Largest deviation of [`compute_gae`] from the brute-force sum over
/// `episodes` random sequences of length up to `max_len`.
pub fn gae_oracle_check(episodes: usize, max_len: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..episodes {
        let n = rng.random_range(1..=max_len);
        let gamma = uniform(&mut rng, 0.8, 1.0);
        let lam = uniform(&mut rng, 0.0, 1.0);
        let rewards: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let values: Vec<f64> = (0..=n).map(|_| uniform(&mut rng, -5.0, 5.0)).collect();
        let mut dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
        dones[n - 1] = rng.random_bool(0.5);
        let got = compute_gae(&rewards, &values, &dones, gamma, lam)?;
        let want = gae_brute_force(&rewards, &values, &dones, gamma, lam);
        for t in 0..n {
            worst = worst.max((got.advantages[t] - want[t]).abs());
            worst = worst.max((got.returns[t] - (want[t] + values[t])).abs());
        }
    }
    Ok(worst)
}

/// Outcome of comparing two runs that should agree bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub iterations: usize,
    /// First iteration whose metrics row differs.
    pub first_metrics_diff: Option<usize>,
    pub params_identical: bool,
    pub grads_identical: bool,
    pub actions_identical: bool,
}

impl Comparison {
    pub fn identical(&self) -> bool {
        self.first_metrics_diff.is_none() && self.params_identical && self.grads_identical && self.actions_identical
    }
}

fn store_bits<T: Real>(s: &ParamStore<T>) -> Vec<u64> {
    s.groups.iter().flat_map(|g| &g.params).flat_map(|p| &p.data).map(|x| Real::to_f64(*x).to_bits()).collect()
}

fn grad_bits(g: &[(GroupKind, Vec<Vec<f64>>)]) -> Vec<(GroupKind, Vec<u64>)> {
    g.iter().map(|(k, v)| (*k, v.iter().flatten().map(|x| x.to_bits()).collect())).collect()
}

fn compare<T: Real>(a: &mut Trainer<T>, b: &mut Trainer<T>, iterations: usize) -> Result<Comparison> {
    let mut c = Comparison {
        iterations,
        first_metrics_diff: None,
        params_identical: true,
        grads_identical: true,
        actions_identical: true,
    };
    for i in 0..iterations {
        let ra = a.train_iteration()?.row();
        let rb = b.train_iteration()?.row();
        if ra != rb && c.first_metrics_diff.is_none() {
            c.first_metrics_diff = Some(i);
        }
        c.grads_identical &= grad_bits(&a.last_grads) == grad_bits(&b.last_grads);
        c.actions_identical &= a.action_digest == b.action_digest;
    }
    c.params_identical = store_bits(&a.store) == store_bits(&b.store);
    Ok(c)
}

/// Two privilege-free runs, one of which sees every privileged channel
/// with all bits flipped.
pub fn privilege_independence<T: Real>(cfg: &RunConfig, iterations: usize) -> Result<Comparison> {
    if cfg.mode != Mode::PrivilegeFree {
        return Err(Error::Config("the canary check runs in privilege_free mode".into()));
    }
    let mut a = Trainer::<T>::new(cfg.clone())?;
    let mut b = Trainer::<T>::new(cfg.clone())?;
    b.privileged_canary = true;
    compare(&mut a, &mut b, iterations)
}

/// Two independent runs of the same config.
pub fn determinism<T: Real>(cfg: &RunConfig, iterations: usize) -> Result<Comparison> {
    let mut a = Trainer::<T>::new(cfg.clone())?;
    let mut b = Trainer::<T>::new(cfg.clone())?;
    compare(&mut a, &mut b, iterations)
}

/// An uninterrupted run against one saved to bytes after `split`
/// iterations and resumed, over the iterations after the split.
pub fn resume_determinism<T: Real>(cfg: &RunConfig, split: usize, iterations: usize) -> Result<Comparison> {
    let mut a = Trainer::<T>::new(cfg.clone())?;
    let mut b = Trainer::<T>::new(cfg.clone())?;
    for _ in 0..split {
        a.train_iteration()?;
        b.train_iteration()?;
    }
    let bytes = b.checkpoint()?.to_bytes();
    let mut b = Trainer::<T>::resume(Checkpoint::from_bytes(&bytes)?)?;
    compare(&mut a, &mut b, iterations)
}

/// Small fast config for determinism-style checks.
pub fn tiny_run_config(mode: Mode) -> Result<RunConfig> {
    let mut o: Vec<String> = [
        "num_agents=8",
        "iterations=50",
        "checkpoint_every=10",
        "env.height_scan=4",
        "model.cell=\"gru\"",
        "model.recurrent_hidden=8",
        "model.latent=8",
        "model.actor_hidden=[16]",
        "model.critic_hidden=[16]",
        "model.teacher_hidden=[16]",
        "model.dynamics_hidden=[8]",
        "model.velocity_hidden=[8]",
        "ppo.steps_per_iteration=8",
        "ppo.epochs=2",
        "ppo.minibatches=2",
    ]
    .map(String::from)
    .to_vec();
    if mode == Mode::PrivilegeFree {
        o.extend(["variant=\"no_priv\"", "mode=\"privilege_free\""].map(String::from));
    }
    RunConfig::parse("", &o)
}
