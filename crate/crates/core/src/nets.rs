//! Parameterized networks: MLPs, recurrent cells, history encoders and the
//! Gaussian action head.
//!
//! Parameters live in a [`ParamStore`] split into six named groups, one per
//! update rule of the training loop. Networks only hold [`ParamRef`]s; a
//! forward pass binds the store onto a [`Graph`] and reads the bound leaves.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// Update group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Policy, updated by the PPO surrogate.
    Actor,
    /// Value function.
    Critic,
    /// Privileged teacher encoder, updated by value + triplet losses.
    Teacher,
    /// Proprioceptive student encoder.
    Student,
    /// Forward dynamics model in latent space.
    Dynamics,
    /// Base-velocity estimator.
    Velocity,
}

impl GroupKind {
    pub const ALL: [GroupKind; 6] = [
        GroupKind::Actor,
        GroupKind::Critic,
        GroupKind::Teacher,
        GroupKind::Student,
        GroupKind::Dynamics,
        GroupKind::Velocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Actor => "actor",
            GroupKind::Critic => "critic",
            GroupKind::Teacher => "teacher",
            GroupKind::Student => "student",
            GroupKind::Dynamics => "dynamics",
            GroupKind::Velocity => "velocity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    pub kind: GroupKind,
    pub params: Vec<Param<T>>,
}

/// Named parameter groups of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub groups: Vec<ParamGroup<T>>,
    /// Human-readable initialization metadata.
    pub init: String,
}

pub const INIT_SCHEME: &str = "fan_in_uniform(w ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0)";

/// Location of one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub group: GroupKind,
    pub index: usize,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { groups: Vec::new(), init: INIT_SCHEME.to_string() }
    }

    pub fn group(&self, kind: GroupKind) -> Option<&ParamGroup<T>> {
        self.groups.iter().find(|g| g.kind == kind)
    }

    pub fn group_mut(&mut self, kind: GroupKind) -> Option<&mut ParamGroup<T>> {
        self.groups.iter_mut().find(|g| g.kind == kind)
    }

    pub fn has_group(&self, kind: GroupKind) -> bool {
        self.group(kind).is_some()
    }

    pub fn get(&self, r: ParamRef) -> &Param<T> {
        &self.group(r.group).expect("bound group").params[r.index]
    }

    pub fn remove_group(&mut self, kind: GroupKind) -> Option<ParamGroup<T>> {
        let pos = self.groups.iter().position(|g| g.kind == kind)?;
        Some(self.groups.remove(pos))
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.params).map(|p| p.data.len()).sum()
    }

    /// Every parameter name is unique and owned by exactly one group.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut kinds = std::collections::HashSet::new();
        for g in &self.groups {
            if !kinds.insert(g.kind) {
                return Err(Error::Config(format!("group {} appears twice", g.kind)));
            }
            for p in &g.params {
                if !p.name.starts_with(g.kind.name()) {
                    return Err(Error::Config(format!("parameter {} filed under group {}", p.name, g.kind)));
                }
                if !seen.insert(p.name.clone()) {
                    return Err(Error::Config(format!("parameter {} appears in more than one place", p.name)));
                }
            }
        }
        Ok(())
    }

    /// Place every parameter on `g`. Groups listed in `trainable` become
    /// gradient-accumulating leaves, the rest are constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &[GroupKind]) -> Bound {
        let mut ids = Vec::with_capacity(self.groups.len());
        for grp in &self.groups {
            let train = trainable.contains(&grp.kind);
            let nodes = grp
                .params
                .iter()
                .map(|p| g.leaf(Tensor { rows: p.rows, cols: p.cols, data: p.data.clone() }, train))
                .collect();
            ids.push((grp.kind, nodes));
        }
        Bound { ids }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph nodes of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<(GroupKind, Vec<NodeId>)>,
}

impl Bound {
    pub fn node(&self, r: ParamRef) -> NodeId {
        self.group(r.group).expect("group bound")[r.index]
    }

    pub fn group(&self, kind: GroupKind) -> Option<&[NodeId]> {
        self.ids.iter().find(|(k, _)| *k == kind).map(|(_, v)| v.as_slice())
    }
}

/// Allocates parameters with the fan-in uniform scheme. Each group draws
/// from its own stream so groups initialize independently of each other.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    rngs: Vec<(GroupKind, ChaCha8Rng)>,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, seed, rngs: Vec::new() }
    }

    fn rng(&mut self, kind: GroupKind) -> &mut ChaCha8Rng {
        if let Some(pos) = self.rngs.iter().position(|(k, _)| *k == kind) {
            return &mut self.rngs[pos].1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(kind.stream());
        self.rngs.push((kind, rng));
        &mut self.rngs.last_mut().unwrap().1
    }

    fn push(&mut self, kind: GroupKind, p: Param<T>) -> ParamRef {
        if self.store.group(kind).is_none() {
            self.store.groups.push(ParamGroup { kind, params: Vec::new() });
        }
        let grp = self.store.group_mut(kind).unwrap();
        grp.params.push(p);
        ParamRef { group: kind, index: grp.params.len() - 1 }
    }

    pub fn uniform(&mut self, kind: GroupKind, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamRef {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = self.rng(kind);
        let data = (0..rows * cols).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.push(kind, Param { name: format!("{}.{name}", kind.name()), rows, cols, data })
    }

    pub fn filled(&mut self, kind: GroupKind, name: &str, rows: usize, cols: usize, v: f64) -> ParamRef {
        let data = vec![T::of(v); rows * cols];
        self.push(kind, Param { name: format!("{}.{name}", kind.name()), rows, cols, data })
    }

    pub fn linear(&mut self, kind: GroupKind, name: &str, input: usize, output: usize) -> Linear {
        let w = self.uniform(kind, &format!("{name}.w"), input, output, input);
        let b = self.filled(kind, &format!("{name}.b"), 1, output, 0.0);
        Linear { w, b, input, output }
    }
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamRef,
    pub b: ParamRef,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, p.node(self.w))?;
        g.add(xw, p.node(self.b))
    }
}

/// Layer widths of an MLP: ELU between layers, identity output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self { input, hidden: hidden.to_vec(), output }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("mlp widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, kind: GroupKind, name: &str, spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input];
        widths.extend(&spec.hidden);
        widths.push(spec.output);
        let layers =
            widths.windows(2).enumerate().map(|(i, w)| b.linear(kind, &format!("{name}.l{i}"), w[0], w[1])).collect();
        Ok(Self { layers })
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let w = g.shape(x)[1];
        if w != self.input() {
            return Err(Error::Shape(format!("mlp expects input width {}, got {w}", self.input())));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i < last {
                h = g.elu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// One state vector (GRU-style gates).
    Gru,
    /// Hidden and cell state (LSTM-style gates); context holds both.
    Lstm,
}

/// Gated recurrent cell. The context row is `h` for GRU and `[h, c]` for LSTM.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub hidden: usize,
    wx: Linear,
    wh: Linear,
}

impl RecurrentCell {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, kind: CellKind, input: usize, hidden: usize) -> Self {
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        };
        let wx = b.linear(GroupKind::Student, "cell.x", input, gates * hidden);
        let wh = b.linear(GroupKind::Student, "cell.h", hidden, gates * hidden);
        Self { kind, hidden, wx, wh }
    }

    pub fn context_width(&self) -> usize {
        match self.kind {
            CellKind::Gru => self.hidden,
            CellKind::Lstm => 2 * self.hidden,
        }
    }

    /// Returns `(output h, next context)`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId, ctx: NodeId) -> Result<(NodeId, NodeId)> {
        let hsz = self.hidden;
        let cw = g.shape(ctx)[1];
        if cw != self.context_width() {
            return Err(Error::Shape(format!("recurrent context width {cw}, expected {}", self.context_width())));
        }
        match self.kind {
            CellKind::Gru => {
                let gx = self.wx.forward(g, p, x)?;
                let gh = self.wh.forward(g, p, ctx)?;
                let gxz = g.slice_cols(gx, 0, 2 * hsz)?;
                let ghz = g.slice_cols(gh, 0, 2 * hsz)?;
                let zr_pre = g.add(gxz, ghz)?;
                let zr = g.sigmoid(zr_pre);
                let z = g.slice_cols(zr, 0, hsz)?;
                let r = g.slice_cols(zr, hsz, 2 * hsz)?;
                let xn = g.slice_cols(gx, 2 * hsz, 3 * hsz)?;
                let hn = g.slice_cols(gh, 2 * hsz, 3 * hsz)?;
                let rhn = g.mul(r, hn)?;
                let n_pre = g.add(xn, rhn)?;
                let n = g.tanh(n_pre);
                // h' = n + z (h - n)
                let diff = g.sub(ctx, n)?;
                let zd = g.mul(z, diff)?;
                let h = g.add(n, zd)?;
                Ok((h, h))
            }
            CellKind::Lstm => {
                let h_prev = g.slice_cols(ctx, 0, hsz)?;
                let c_prev = g.slice_cols(ctx, hsz, 2 * hsz)?;
                let gx = self.wx.forward(g, p, x)?;
                let gh = self.wh.forward(g, p, h_prev)?;
                let pre = g.add(gx, gh)?;
                let ifo_pre = g.slice_cols(pre, 0, 3 * hsz)?;
                let ifo = g.sigmoid(ifo_pre);
                let i = g.slice_cols(ifo, 0, hsz)?;
                let f = g.slice_cols(ifo, hsz, 2 * hsz)?;
                let o = g.slice_cols(ifo, 2 * hsz, 3 * hsz)?;
                let c_in = g.slice_cols(pre, 3 * hsz, 4 * hsz)?;
                let cand = g.tanh(c_in);
                let fc = g.mul(f, c_prev)?;
                let ic = g.mul(i, cand)?;
                let c = g.add(fc, ic)?;
                let tc = g.tanh(c);
                let h = g.mul(o, tc)?;
                let next = g.concat(&[h, c])?;
                Ok((h, next))
            }
        }
    }
}

/// One strided 1-D convolution over a time-major flattened window.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    lin: Linear,
}

impl Conv1d {
    pub fn out_len(&self, len: usize) -> usize {
        if len < self.kernel {
            0
        } else {
            (len - self.kernel) / self.stride + 1
        }
    }

    /// `x`: `[n, len * in_ch]` -> `[n, out_len * out_ch]`, ELU applied.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId, len: usize) -> Result<(NodeId, usize)> {
        let [n, w] = g.shape(x);
        if w != len * self.in_ch {
            return Err(Error::Shape(format!("conv1d: width {w} != {len} x {}", self.in_ch)));
        }
        let lout = self.out_len(len);
        if lout == 0 {
            return Err(Error::Shape(format!("conv1d: length {len} shorter than kernel {}", self.kernel)));
        }
        let patch = self.kernel * self.in_ch;
        let mut index = Vec::with_capacity(n * lout * patch);
        for row in 0..n {
            for pos in 0..lout {
                let start = row * w + pos * self.stride * self.in_ch;
                index.extend(start..start + patch);
            }
        }
        let cols = g.gather(x, index, n * lout, patch)?;
        let y = self.lin.forward(g, p, cols)?;
        let y = g.elu(y);
        Ok((g.reshape(y, n, lout * self.out_ch)?, lout))
    }
}

/// Temporal convolution stack configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcnSpec {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub history: usize,
}

impl TcnSpec {
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::Config("tcn: channels, kernels and strides must have equal nonzero length".into()));
        }
        if self.kernels.contains(&0) || self.strides.contains(&0) || self.channels.contains(&0) {
            return Err(Error::Config("tcn: sizes must be positive".into()));
        }
        let rf = self.receptive_field();
        if rf > self.history {
            return Err(Error::Config(format!("tcn: receptive field {rf} exceeds history {}", self.history)));
        }
        // the last output position must end on the newest input step
        let mut len = self.history;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            if !(len - k).is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "tcn: length {len} with kernel {k} and stride {s} drops the newest steps"
                )));
            }
            len = (len - k) / s + 1;
        }
        Ok(())
    }
}

/// Encoder of the proprioceptive history. All variants map
/// `(observation, context)` to `(latent, next context)`.
#[derive(Clone, Debug)]
pub enum StudentEncoder {
    Recurrent {
        cell: RecurrentCell,
        head: Linear,
    },
    /// Stacked window of the last `steps` observations through an MLP.
    History {
        steps: usize,
        obs: usize,
        mlp: Mlp,
    },
    /// Temporal convolution over the last `steps` observations; the latent is
    /// read from the newest output position.
    Tcn {
        steps: usize,
        obs: usize,
        convs: Vec<Conv1d>,
        head: Linear,
    },
}

impl StudentEncoder {
    pub fn recurrent<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        kind: CellKind,
        obs: usize,
        hidden: usize,
        latent: usize,
    ) -> Self {
        let cell = RecurrentCell::build(b, kind, obs, hidden);
        let head = b.linear(GroupKind::Student, "head", hidden, latent);
        StudentEncoder::Recurrent { cell, head }
    }

    pub fn history<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        steps: usize,
        obs: usize,
        hidden: &[usize],
        latent: usize,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("history encoder needs at least one step".into()));
        }
        let mlp = Mlp::build(b, GroupKind::Student, "mlp", &MlpSpec::new(steps * obs, hidden, latent))?;
        Ok(StudentEncoder::History { steps, obs, mlp })
    }

    pub fn tcn<T: Real>(b: &mut ParamBuilder<'_, T>, spec: &TcnSpec, obs: usize, latent: usize) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut in_ch = obs;
        for (i, ((&c, &k), &s)) in spec.channels.iter().zip(&spec.kernels).zip(&spec.strides).enumerate() {
            let lin = b.linear(GroupKind::Student, &format!("conv{i}"), k * in_ch, c);
            convs.push(Conv1d { kernel: k, stride: s, in_ch, out_ch: c, lin });
            in_ch = c;
        }
        let head = b.linear(GroupKind::Student, "head", in_ch, latent);
        Ok(StudentEncoder::Tcn { steps: spec.history, obs, convs, head })
    }

    pub fn context_width(&self) -> usize {
        match self {
            StudentEncoder::Recurrent { cell, .. } => cell.context_width(),
            StudentEncoder::History { steps, obs, .. } | StudentEncoder::Tcn { steps, obs, .. } => (steps - 1) * obs,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, StudentEncoder::Recurrent { .. })
    }

    pub fn latent_width(&self) -> usize {
        match self {
            StudentEncoder::Recurrent { head, .. } | StudentEncoder::Tcn { head, .. } => head.output,
            StudentEncoder::History { mlp, .. } => mlp.output(),
        }
    }

    /// `obs`: `[n, 45]`, `ctx`: `[n, context_width]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, obs: NodeId, ctx: NodeId) -> Result<(NodeId, NodeId)> {
        let [n, _] = g.shape(obs);
        let [cn, cw] = g.shape(ctx);
        if cn != n || cw != self.context_width() {
            return Err(Error::Shape(format!(
                "student context [{cn}, {cw}], expected [{n}, {}]",
                self.context_width()
            )));
        }
        match self {
            StudentEncoder::Recurrent { cell, head } => {
                let (h, next) = cell.step(g, p, obs, ctx)?;
                Ok((head.forward(g, p, h)?, next))
            }
            StudentEncoder::History { steps, obs: ow, mlp } => {
                let window = g.concat(&[ctx, obs])?;
                let next = if *steps > 1 { g.slice_cols(window, *ow, steps * ow)? } else { ctx };
                Ok((mlp.forward(g, p, window)?, next))
            }
            StudentEncoder::Tcn { steps, obs: ow, convs, head } => {
                let window = g.concat(&[ctx, obs])?;
                let next = g.slice_cols(window, *ow, steps * ow)?;
                let mut x = window;
                let mut len = *steps;
                for c in convs {
                    let (y, l) = c.forward(g, p, x, len)?;
                    x = y;
                    len = l;
                }
                let ch = convs.last().unwrap().out_ch;
                let newest = g.slice_cols(x, (len - 1) * ch, len * ch)?;
                Ok((head.forward(g, p, newest)?, next))
            }
        }
    }
}

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian policy head with state-independent log-std.
#[derive(Clone, Debug)]
pub struct Actor {
    pub mlp: Mlp,
    pub log_std: ParamRef,
}

impl Actor {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, spec: &MlpSpec, init_log_std: f64) -> Result<Self> {
        let mlp = Mlp::build(b, GroupKind::Actor, "mlp", spec)?;
        let log_std = b.filled(GroupKind::Actor, "log_std", 1, spec.output, init_log_std);
        Ok(Self { mlp, log_std })
    }

    pub fn actions(&self) -> usize {
        self.mlp.output()
    }

    /// Returns `(mean [n, A], clamped log-std [1, A])`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<(NodeId, NodeId)> {
        if let Some(bad) = g.value(x).data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("actor input entry {bad} is not finite")));
        }
        let mean = self.mlp.forward(g, p, x)?;
        let ls = g.clamp(p.node(self.log_std), T::of(LOG_STD_MIN), T::of(LOG_STD_MAX));
        Ok((mean, ls))
    }
}

/// Gaussian log-density summed over action dims, `[n, 1]`.
pub fn gaussian_log_prob<T: Real>(g: &mut Graph<T>, mean: NodeId, log_std: NodeId, actions: NodeId) -> Result<NodeId> {
    let a = g.shape(mean)[1];
    let diff = g.sub(actions, mean)?;
    let neg_ls = g.neg(log_std);
    let inv_std = g.exp(neg_ls);
    let z = g.mul(diff, inv_std)?;
    let zz = g.sq_norm_rows(z);
    let quad = g.mul_scalar(zz, T::of(-0.5));
    let ls_sum = g.sum(log_std);
    let lp = g.sub(quad, ls_sum)?;
    Ok(g.add_scalar(lp, T::of(-0.5 * LN_2PI * a as f64)))
}

/// Entropy of the diagonal Gaussian, scalar.
pub fn gaussian_entropy<T: Real>(g: &mut Graph<T>, log_std: NodeId) -> NodeId {
    let a = g.shape(log_std)[1];
    let s = g.sum(log_std);
    g.add_scalar(s, T::of(0.5 * (1.0 + LN_2PI) * a as f64))
}

/// `KL(old || new)` per row for diagonal Gaussians, `[n, 1]`.
pub fn gaussian_kl<T: Real>(
    g: &mut Graph<T>,
    old_mean: NodeId,
    old_log_std: NodeId,
    mean: NodeId,
    log_std: NodeId,
) -> Result<NodeId> {
    let ls_diff = g.sub(log_std, old_log_std)?;
    let two_old = g.mul_scalar(old_log_std, T::of(2.0));
    let var_old = g.exp(two_old);
    let dm = g.sub(old_mean, mean)?;
    let dm2 = g.square(dm);
    let num = g.add(dm2, var_old)?;
    let two_new = g.mul_scalar(log_std, T::of(-2.0));
    let inv_var_new = g.exp(two_new);
    let frac = g.mul(num, inv_var_new)?;
    let half = g.mul_scalar(frac, T::of(0.5));
    let per = g.add(half, ls_diff)?;
    let per = g.add_scalar(per, T::of(-0.5));
    Ok(g.sum_rows(per))
}

/// Closed-form Gaussian log-density evaluated without a graph.
pub fn gaussian_log_prob_plain(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}
