//! PointQuad: a deterministic, vectorized proxy locomotion task.
//!
//! The base is a point mass driven by a fixed linear mix of twelve joint
//! torques, limited by a friction-dependent traction bound and disturbed by
//! randomized external forces. Joints follow a damped spring model whose
//! inertia grows with payload, and feet contact the ground on a fixed trot
//! clock. None of the randomized extrinsics are observed directly, but all of
//! them leave a trace in the proprioceptive stream.
//!
//! Observation layout (45 entries):
//!
//! | range   | content                                   | scale |
//! |---------|-------------------------------------------|-------|
//! | 0..3    | base angular velocity (roll, pitch, yaw)  | 0.25  |
//! | 3..6    | projected gravity                         | 1     |
//! | 6..9    | command (v_x, v_y, yaw rate)              | 1     |
//! | 9..21   | joint positions                           | 1     |
//! | 21..33  | joint velocities (stance legs include the base motion) | 0.05 |
//! | 33..45  | previous action                           | 1     |
//!
//! Privileged layout: the observation, then base linear velocity (m/s, 3),
//! height scan (H, x5, clipped to +-1), external force (/20, 3), foot
//! contacts (4), friction (1), payload (/10, 1).

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const OBS_DIM: usize = 45;
pub const ACT_DIM: usize = 12;
pub const PRIV_EXTRA: usize = 12;
pub const DEFAULT_SCAN: usize = 187;
pub const BASE_MASS: f64 = 15.0;
pub const TORQUE_SCALE: f64 = 20.0;
pub const GRAVITY: f64 = 9.81;
pub const TRACTION_FACTOR: f64 = 0.1;
pub const PLANAR_DRAG: f64 = 0.8;
pub const YAW_DRAG: f64 = 0.8;
pub const GAIT_HZ: f64 = 1.5;
pub const FALL_TILT: f64 = 1.0;
pub const MAX_LEVEL: u32 = 9;
pub const HIP_LIMIT: f64 = 1.2;
pub const TRACKING_SIGMA2: f64 = 0.25;
pub const ANG_VEL_SCALE: f64 = 0.25;
pub const JOINT_VEL_SCALE: f64 = 0.05;
const LEG_LENGTH: f64 = 0.3;
const YAW_LEVER: f64 = 0.3;
const NOMINAL_Q: [f64; 3] = [0.0, 0.8, -1.5];

/// Offsets of the privileged blocks that follow the observation.
pub mod priv_layout {
    use super::OBS_DIM;
    pub const BASE_VEL: usize = OBS_DIM;
    pub const SCAN: usize = OBS_DIM + 3;
    pub fn force(h: usize) -> usize {
        SCAN + h
    }
    pub fn contacts(h: usize) -> usize {
        SCAN + h + 3
    }
    pub fn friction(h: usize) -> usize {
        SCAN + h + 7
    }
    pub fn payload(h: usize) -> usize {
        SCAN + h + 8
    }
    pub fn width(h: usize) -> usize {
        SCAN + h + 9
    }
}

/// Table 2 reward weights, in [`RewardBreakdown::terms`] order.
pub const REWARD_WEIGHTS: [f64; 9] = [1.5, 0.75, -2.0, -0.05, -2e-4, -2.5e-7, -0.01, 0.01, -1.0];
pub const REWARD_NAMES: [&str; 9] = [
    "lin_vel_xy_exp",
    "ang_vel_z_exp",
    "lin_vel_z",
    "ang_vel_xy",
    "joint_torque",
    "joint_accel",
    "action_rate",
    "feet_air_time",
    "undesired_contacts",
];

/// Propulsion mix `u = B tau`: rows are (force x, force y, yaw moment).
/// Joint order per leg is (hip, thigh, calf); legs are FL, FR, RL, RR.
pub fn mixing_matrix() -> [[f64; ACT_DIM]; 3] {
    let mut b = [[0.0; ACT_DIM]; 3];
    for leg in 0..4 {
        let left = leg % 2 == 0;
        let front = leg < 2;
        let (hip, thigh, calf) = (3 * leg, 3 * leg + 1, 3 * leg + 2);
        b[0][thigh] = 0.25;
        b[0][calf] = 0.10;
        b[1][hip] = 0.25;
        b[1][calf] = if left { 0.05 } else { -0.05 };
        b[2][hip] = if front { 0.05 } else { -0.05 };
        b[2][thigh] = if left { -0.03 } else { 0.03 };
    }
    b
}

/// Randomized physical parameters of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub friction: f64,
    pub restitution: f64,
    pub payload: f64,
    pub ext_force: [f64; 3],
    pub ext_torque: [f64; 3],
    pub joint_init_scale: f64,
    pub terrain_level: u32,
    /// Per-episode ground slope (pitch, roll) in rad.
    pub slope: [f64; 2],
}

impl EnvParams {
    /// Nominal parameters: unit friction, no payload, no disturbance, flat.
    pub fn nominal() -> Self {
        Self {
            friction: 1.0,
            restitution: 0.0,
            payload: 0.0,
            ext_force: [0.0; 3],
            ext_torque: [0.0; 3],
            joint_init_scale: 1.0,
            terrain_level: 0,
            slope: [0.0; 2],
        }
    }

    pub fn total_mass(&self) -> f64 {
        BASE_MASS + self.payload
    }

    /// Maximum planar propulsion the ground can transmit.
    pub fn traction_limit(&self) -> f64 {
        self.friction * self.total_mass() * GRAVITY * TRACTION_FACTOR
    }
}

pub const FRICTION_RANGE: (f64, f64) = (0.1, 3.0);
pub const RESTITUTION_RANGE: (f64, f64) = (0.0, 1.0);
pub const PAYLOAD_RANGE: (f64, f64) = (-2.0, 10.0);
pub const FORCE_MAX: f64 = 20.0;
pub const TORQUE_MAX: f64 = 5.0;
pub const JOINT_INIT_RANGE: (f64, f64) = (0.5, 1.5);

/// Draw episode parameters uniformly within the training ranges.
pub fn randomize<R: Rng>(rng: &mut R, level: u32) -> EnvParams {
    let level = level.min(MAX_LEVEL);
    let slope_max = 0.05 * level as f64;
    let mut p = EnvParams {
        friction: rng.random_range(FRICTION_RANGE.0..=FRICTION_RANGE.1),
        restitution: rng.random_range(RESTITUTION_RANGE.0..=RESTITUTION_RANGE.1),
        payload: rng.random_range(PAYLOAD_RANGE.0..=PAYLOAD_RANGE.1),
        ext_force: [0.0; 3],
        ext_torque: [0.0; 3],
        joint_init_scale: rng.random_range(JOINT_INIT_RANGE.0..=JOINT_INIT_RANGE.1),
        terrain_level: level,
        slope: [rng.random_range(-slope_max..=slope_max), rng.random_range(-slope_max..=slope_max)],
    };
    resample_perturbation(rng, &mut p);
    p
}

/// Share of the full push range available at `level`.
pub fn perturbation_scale(level: u32) -> f64 {
    (level.min(MAX_LEVEL) + 1) as f64 / (MAX_LEVEL + 1) as f64
}

/// Fresh external force and torque, used at episode start and mid-episode.
pub fn resample_perturbation<R: Rng>(rng: &mut R, p: &mut EnvParams) {
    let k = perturbation_scale(p.terrain_level);
    for f in &mut p.ext_force {
        *f = k * rng.random_range(-FORCE_MAX..=FORCE_MAX);
    }
    for t in &mut p.ext_torque {
        *t = k * rng.random_range(-TORQUE_MAX..=TORQUE_MAX);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandMode {
    Train,
    EvalId,
    EvalOod,
    /// Zero command throughout: the robot should stand still.
    Stand,
}

impl CommandMode {
    pub fn max_speed(self) -> f64 {
        match self {
            CommandMode::Train | CommandMode::EvalId => 1.0,
            CommandMode::EvalOod => 2.0,
            CommandMode::Stand => 0.0,
        }
    }

    pub fn sample<R: Rng>(self, rng: &mut R) -> [f64; 3] {
        match self {
            CommandMode::Stand => [0.0; 3],
            m => sample_command(rng, m.max_speed()),
        }
    }
}

pub const MAX_YAW_CMD: f64 = 1.0;

/// Velocity command `(v_x, v_y, yaw rate)`.
pub fn sample_command<R: Rng>(rng: &mut R, max_speed: f64) -> [f64; 3] {
    if rng.random_bool(0.1) {
        return [0.0; 3];
    }
    let vx = rng.random_range(-max_speed..=max_speed);
    let vy = rng.random_range(-0.5 * max_speed..=0.5 * max_speed);
    let norm = vx.hypot(vy);
    let k = if norm > max_speed { max_speed / norm } else { 1.0 };
    [vx * k, vy * k, rng.random_range(-MAX_YAW_CMD..=MAX_YAW_CMD)]
}

/// Dynamic state of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Base linear velocity (x, y, z), body frame.
    pub vel: [f64; 3],
    pub yaw_rate: f64,
    pub roll_rate: f64,
    pub pitch_rate: f64,
    pub phase: f64,
    pub q: [f64; ACT_DIM],
    pub qd: [f64; ACT_DIM],
    pub prev_action: [f64; ACT_DIM],
    pub tilt: f64,
    pub air_time: [f64; 4],
    pub contacts: [bool; 4],
    pub steps: u32,
    pub pos: [f64; 2],
    pub heading: f64,
    pub command: [f64; 3],
    /// Acceleration-induced lean (pitch, roll).
    pub lean: [f64; 2],
}

fn contacts_at(phase: f64) -> [bool; 4] {
    std::array::from_fn(|i| (phase + i as f64 * PI / 2.0).sin() > 0.0)
}

impl EnvState {
    /// Standing still at the origin with all joints at zero.
    pub fn zero(command: [f64; 3]) -> Self {
        Self {
            vel: [0.0; 3],
            yaw_rate: 0.0,
            roll_rate: 0.0,
            pitch_rate: 0.0,
            phase: 0.0,
            q: [0.0; ACT_DIM],
            qd: [0.0; ACT_DIM],
            prev_action: [0.0; ACT_DIM],
            tilt: 0.0,
            air_time: [0.0; 4],
            contacts: contacts_at(0.0),
            steps: 0,
            pos: [0.0; 2],
            heading: 0.0,
            command,
            lean: [0.0; 2],
        }
    }

    /// Episode start: nominal pose scaled by the randomized factor.
    pub fn reset<R: Rng>(rng: &mut R, params: &EnvParams, command: [f64; 3]) -> Self {
        let mut s = Self::zero(command);
        for leg in 0..4 {
            for j in 0..3 {
                s.q[3 * leg + j] = NOMINAL_Q[j] * params.joint_init_scale;
            }
        }
        s.phase = rng.random_range(0.0..TAU);
        s.contacts = contacts_at(s.phase);
        s
    }

    pub fn is_finite(&self) -> bool {
        self.vel.iter().chain(&self.q).chain(&self.qd).all(|v| v.is_finite())
            && self.yaw_rate.is_finite()
            && self.tilt.is_finite()
    }
}

/// Per-term reward values before weighting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub terms: [f64; 9],
    pub total: f64,
}

impl RewardBreakdown {
    fn from_terms(terms: [f64; 9]) -> Self {
        let total = terms.iter().zip(REWARD_WEIGHTS).map(|(t, w)| t * w).sum();
        Self { terms, total }
    }

    pub fn weighted(&self) -> [f64; 9] {
        std::array::from_fn(|i| self.terms[i] * REWARD_WEIGHTS[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    NonFiniteAction,
    NonFiniteState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Fall,
    Timeout,
    Fault(Fault),
}

/// Diagnostics of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub planar_propulsion: f64,
    pub traction_limit: f64,
    pub traction_deficit: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: EnvState,
    pub reward: RewardBreakdown,
    pub termination: Option<Termination>,
    pub obs: Vec<f64>,
    pub privileged: Vec<f64>,
    pub info: StepInfo,
}

fn stair(x: f64) -> f64 {
    if ((x / 0.5).floor() as i64).rem_euclid(2) == 1 {
        1.0
    } else {
        0.0
    }
}

/// Terrain height at world position `(x, y)`.
pub fn heightfield(x: f64, y: f64, level: u32) -> f64 {
    let l = level as f64;
    l * (0.01 * (1.7 * x).sin() * (2.3 * y).cos() + 0.015 * stair(x))
}

/// One control step of `dt` seconds for a single agent.
pub fn step(
    state: &EnvState,
    params: &EnvParams,
    action: &[f64],
    dt: f64,
    max_steps: u32,
    scan_points: usize,
) -> StepOutput {
    let mut s = state.clone();
    let nan_action = action.len() != ACT_DIM || action.iter().any(|a| !a.is_finite());
    let act: [f64; ACT_DIM] = std::array::from_fn(|i| if nan_action { 0.0 } else { action[i].clamp(-1.0, 1.0) });
    let tau: [f64; ACT_DIM] = std::array::from_fn(|i| TORQUE_SCALE * act[i]);

    // joints
    let j_eff = 0.1 * (1.0 + 0.05 * params.payload.max(0.0));
    let mut qdd = [0.0; ACT_DIM];
    for i in 0..ACT_DIM {
        qdd[i] = (tau[i] - 1.5 * s.qd[i] - 5.0 * s.q[i]) / j_eff;
        s.qd[i] += qdd[i] * dt;
        s.q[i] += s.qd[i] * dt;
    }

    // base propulsion with traction limit
    let b = mixing_matrix();
    let mut u = [0.0; 3];
    for (row, ui) in b.iter().zip(&mut u) {
        *ui = row.iter().zip(&tau).map(|(b, t)| b * t).sum();
    }
    let mass = params.total_mass();
    let limit = params.traction_limit();
    let planar = u[0].hypot(u[1]);
    let (ux, uy) =
        if planar > limit && planar > 0.0 { (u[0] * limit / planar, u[1] * limit / planar) } else { (u[0], u[1]) };
    let deficit = (planar - limit).max(0.0) / (mass * GRAVITY * TRACTION_FACTOR);
    let yaw_limit = YAW_LEVER * limit;
    let u_yaw = u[2].clamp(-yaw_limit, yaw_limit);

    let slope_force = [
        -mass * GRAVITY * TRACTION_FACTOR * params.slope[0].sin(),
        -mass * GRAVITY * TRACTION_FACTOR * params.slope[1].sin(),
    ];
    let ax = (ux + params.ext_force[0] + slope_force[0]) / mass - PLANAR_DRAG * s.vel[0];
    let ay = (uy + params.ext_force[1] + slope_force[1]) / mass - PLANAR_DRAG * s.vel[1];
    s.vel[0] += ax * dt;
    s.vel[1] += ay * dt;
    let inertia = 0.1 * mass;
    let aw = (u_yaw + params.ext_torque[2]) / inertia - YAW_DRAG * s.yaw_rate;
    s.yaw_rate += aw * dt;

    let (sh, ch) = s.heading.sin_cos();
    s.pos[0] += (ch * s.vel[0] - sh * s.vel[1]) * dt;
    s.pos[1] += (sh * s.vel[0] + ch * s.vel[1]) * dt;
    s.heading = (s.heading + s.yaw_rate * dt).rem_euclid(TAU);

    // gait clock and contacts
    s.phase = (s.phase + TAU * GAIT_HZ * dt).rem_euclid(TAU);
    let contacts = contacts_at(s.phase);
    let mut touchdown_air = [0.0; 4];
    let mut touchdowns = 0.0;
    for i in 0..4 {
        if contacts[i] && !s.contacts[i] {
            touchdown_air[i] = s.air_time[i] + dt;
            s.air_time[i] = 0.0;
            touchdowns += 1.0;
        } else if !contacts[i] {
            s.air_time[i] += dt;
        }
    }
    s.contacts = contacts;

    let speed = s.vel[0].hypot(s.vel[1]);
    let square = 2.0 * stair(s.pos[0]) - 1.0;
    s.vel[2] = (0.02 * params.terrain_level as f64 * square + 0.02 * params.restitution * touchdowns) * speed.min(1.0);

    s.pitch_rate = 0.2 * ax + 0.02 * params.ext_torque[1];
    s.roll_rate = -0.2 * ay + 0.02 * params.ext_torque[0];
    s.lean = [(0.05 * ax).clamp(-0.3, 0.3), (-0.05 * ay).clamp(-0.3, 0.3)];

    let f_norm = params.ext_force.iter().map(|f| f * f).sum::<f64>().sqrt();
    s.tilt = 0.95 * s.tilt + 0.05 * (deficit + 0.3 * f_norm / (mass * GRAVITY));
    s.steps += 1;

    // rewards
    let cmd = s.command;
    let lin_err = (s.vel[0] - cmd[0]).powi(2) + (s.vel[1] - cmd[1]).powi(2);
    let ang_err = (s.yaw_rate - cmd[2]).powi(2);
    let moving_cmd = cmd[0].hypot(cmd[1]) > 0.1;
    let air: f64 = if moving_cmd { touchdown_air.iter().filter(|t| **t > 0.0).map(|t| t - 0.5).sum() } else { 0.0 };
    let undesired = (0..4).filter(|&leg| s.contacts[leg] && s.q[3 * leg].abs() > HIP_LIMIT).count() as f64;
    let terms = [
        (-lin_err / TRACKING_SIGMA2).exp(),
        (-ang_err / TRACKING_SIGMA2).exp(),
        s.vel[2] * s.vel[2],
        s.roll_rate * s.roll_rate + s.pitch_rate * s.pitch_rate,
        tau.iter().map(|t| t * t).sum(),
        qdd.iter().map(|a| a * a).sum(),
        act.iter().zip(&s.prev_action).map(|(a, p)| (a - p).powi(2)).sum(),
        air,
        undesired,
    ];
    s.prev_action = act;

    let termination = if nan_action {
        Some(Termination::Fault(Fault::NonFiniteAction))
    } else if !s.is_finite() {
        Some(Termination::Fault(Fault::NonFiniteState))
    } else if s.tilt > FALL_TILT {
        Some(Termination::Fall)
    } else if s.steps >= max_steps {
        Some(Termination::Timeout)
    } else {
        None
    };
    let reward = if nan_action { RewardBreakdown::default() } else { RewardBreakdown::from_terms(terms) };

    let obs = observe(&s, params);
    let privileged = observe_priv(&s, params, scan_points);
    StepOutput {
        state: s,
        reward,
        termination,
        obs,
        privileged,
        info: StepInfo { planar_propulsion: ux.hypot(uy), traction_limit: limit, traction_deficit: deficit },
    }
}

/// Proprioceptive observation, see the module table for layout and scales.
pub fn observe(s: &EnvState, params: &EnvParams) -> Vec<f64> {
    let mut o = Vec::with_capacity(OBS_DIM);
    o.extend([s.roll_rate, s.pitch_rate, s.yaw_rate].map(|w| w * ANG_VEL_SCALE));
    let pitch = params.slope[0] + s.lean[0] + 0.02 * s.phase.sin();
    let roll = params.slope[1] + s.lean[1];
    o.extend([pitch.sin(), -roll.sin() * pitch.cos(), -roll.cos() * pitch.cos()]);
    o.extend(s.command);
    o.extend(s.q);
    for leg in 0..4 {
        let stance = if s.contacts[leg] { 1.0 } else { 0.0 };
        let hip = s.qd[3 * leg] - stance * s.vel[1] / LEG_LENGTH;
        let thigh = s.qd[3 * leg + 1] - stance * s.vel[0] / LEG_LENGTH;
        o.extend([hip, thigh, s.qd[3 * leg + 2]].map(|v| v * JOINT_VEL_SCALE));
    }
    o.extend(s.prev_action);
    debug_assert_eq!(o.len(), OBS_DIM);
    o
}

/// Observation followed by the simulator-only channels.
pub fn observe_priv(s: &EnvState, params: &EnvParams, scan_points: usize) -> Vec<f64> {
    let mut p = observe(s, params);
    p.reserve(scan_points + PRIV_EXTRA);
    p.extend(s.vel);
    let level = params.terrain_level;
    let base_h = heightfield(s.pos[0], s.pos[1], level);
    let (sh, ch) = s.heading.sin_cos();
    for k in 0..scan_points {
        let dx = -0.8 + 0.1 * (k % 17) as f64;
        let dy = -0.5 + 0.1 * (k / 17) as f64;
        let x = s.pos[0] + ch * dx - sh * dy;
        let y = s.pos[1] + sh * dx + ch * dy;
        p.push((5.0 * (base_h - heightfield(x, y, level))).clamp(-1.0, 1.0));
    }
    p.extend(params.ext_force.map(|f| f / FORCE_MAX));
    p.extend(s.contacts.map(|c| if c { 1.0 } else { 0.0 }));
    p.push(params.friction);
    p.push(params.payload / 10.0);
    debug_assert_eq!(p.len(), priv_layout::width(scan_points));
    p
}

/// Terrain curriculum rule applied at episode end.
pub fn curriculum_update(level: u32, mean_planar_error: f64, mean_command_speed: f64, fell: bool) -> u32 {
    if fell {
        level.saturating_sub(1)
    } else if mean_planar_error < 0.25 * mean_command_speed {
        (level + 1).min(MAX_LEVEL)
    } else {
        level
    }
}

/// Vectorized environment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub height_scan: usize,
    pub dt: f64,
    pub episode_seconds: f64,
    pub perturb_interval_seconds: f64,
    pub command_resample_seconds: f64,
    pub curriculum: bool,
    pub initial_level: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            height_scan: DEFAULT_SCAN,
            dt: 0.02,
            episode_seconds: 20.0,
            perturb_interval_seconds: 2.0,
            command_resample_seconds: 10.0,
            curriculum: true,
            initial_level: 0,
        }
    }
}

impl EnvConfig {
    pub fn episode_steps(&self) -> u32 {
        (self.episode_seconds / self.dt).round() as u32
    }

    fn interval_steps(&self, seconds: f64) -> u32 {
        ((seconds / self.dt).round() as u32).max(1)
    }

    pub fn priv_dim(&self) -> usize {
        priv_layout::width(self.height_scan)
    }
}

/// Fixed extrinsics for evaluation cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub friction: Option<f64>,
    pub payload: Option<f64>,
    pub ext_force: Option<[f64; 3]>,
    pub command_mode: Option<CommandMode>,
    pub perturb: Option<bool>,
}

/// Episode statistics accumulated per agent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: u32,
    pub ret: f64,
    pub planar_err: f64,
    pub yaw_err: f64,
    pub cmd_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinishedEpisode {
    pub agent: usize,
    pub steps: u32,
    pub ret: f64,
    pub mean_planar_err: f64,
    pub mean_yaw_err: f64,
    pub termination: Termination,
    pub level_before: u32,
    pub level_after: u32,
}

/// Result of stepping every agent once.
#[derive(Clone, Debug)]
pub struct VecStep {
    pub rewards: Vec<RewardBreakdown>,
    pub terminated: Vec<Option<Termination>>,
    /// Observation/privileged state reached by the step (before any reset).
    pub final_obs: Vec<Vec<f64>>,
    pub final_priv: Vec<Vec<f64>>,
    /// Observation/privileged state the next step starts from.
    pub obs: Vec<Vec<f64>>,
    pub privileged: Vec<Vec<f64>>,
    pub finished: Vec<FinishedEpisode>,
    pub max_propulsion_ratio: f64,
}

/// Independent agents, each with its own random stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VecEnv {
    pub cfg: EnvConfig,
    pub overrides: Overrides,
    pub states: Vec<EnvState>,
    pub params: Vec<EnvParams>,
    pub levels: Vec<u32>,
    pub stats: Vec<EpisodeStats>,
    rngs: Vec<ChaCha8Rng>,
}

impl VecEnv {
    pub fn new(cfg: EnvConfig, n: usize, seed: u64, overrides: Overrides) -> Self {
        let rngs = (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(1000 + i as u64);
                r
            })
            .collect();
        let level = cfg.initial_level.min(MAX_LEVEL);
        let mut env = Self {
            overrides,
            states: Vec::with_capacity(n),
            params: Vec::with_capacity(n),
            levels: vec![level; n],
            stats: vec![EpisodeStats::default(); n],
            rngs,
            cfg,
        };
        for i in 0..n {
            let (s, p) = env.fresh_episode(i);
            env.states.push(s);
            env.params.push(p);
        }
        env
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn command_mode(&self) -> CommandMode {
        self.overrides.command_mode.unwrap_or(CommandMode::Train)
    }

    fn fresh_episode(&mut self, i: usize) -> (EnvState, EnvParams) {
        let level = self.levels[i];
        let mode = self.command_mode();
        let rng = &mut self.rngs[i];
        let mut p = randomize(rng, level);
        if let Some(f) = self.overrides.friction {
            p.friction = f;
        }
        if let Some(m) = self.overrides.payload {
            p.payload = m;
        }
        if let Some(f) = self.overrides.ext_force {
            p.ext_force = f;
        }
        if self.overrides.perturb == Some(false) {
            p.ext_force = self.overrides.ext_force.unwrap_or([0.0; 3]);
            p.ext_torque = [0.0; 3];
        }
        let cmd = mode.sample(rng);
        (EnvState::reset(rng, &p, cmd), p)
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.states.iter().zip(&self.params).map(|(s, p)| observe(s, p)).collect()
    }

    pub fn privileged(&self) -> Vec<Vec<f64>> {
        self.states.iter().zip(&self.params).map(|(s, p)| observe_priv(s, p, self.cfg.height_scan)).collect()
    }

    /// Step all agents; terminated agents are reset in place.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> VecStep {
        let n = self.len();
        assert_eq!(actions.len(), n, "one action row per agent");
        let max_steps = self.cfg.episode_steps();
        let perturb_every = self.cfg.interval_steps(self.cfg.perturb_interval_seconds);
        let resample_every = self.cfg.interval_steps(self.cfg.command_resample_seconds);
        let mode = self.command_mode();
        let mut out = VecStep {
            rewards: Vec::with_capacity(n),
            terminated: Vec::with_capacity(n),
            final_obs: Vec::with_capacity(n),
            final_priv: Vec::with_capacity(n),
            obs: Vec::with_capacity(n),
            privileged: Vec::with_capacity(n),
            finished: Vec::new(),
            max_propulsion_ratio: 0.0,
        };
        for i in 0..n {
            let o = step(&self.states[i], &self.params[i], &actions[i], self.cfg.dt, max_steps, self.cfg.height_scan);
            if o.info.traction_limit > 0.0 {
                out.max_propulsion_ratio =
                    out.max_propulsion_ratio.max(o.info.planar_propulsion / o.info.traction_limit);
            }
            let st = &mut self.stats[i];
            let cmd = o.state.command;
            st.steps += 1;
            st.ret += o.reward.total;
            st.planar_err += (o.state.vel[0] - cmd[0]).hypot(o.state.vel[1] - cmd[1]);
            st.yaw_err += (o.state.yaw_rate - cmd[2]).abs();
            st.cmd_speed += cmd[0].hypot(cmd[1]);
            self.states[i] = o.state;
            out.rewards.push(o.reward);
            out.terminated.push(o.termination);
            if let Some(term) = o.termination {
                let st = std::mem::take(&mut self.stats[i]);
                let k = st.steps.max(1) as f64;
                let before = self.levels[i];
                let after = if self.cfg.curriculum {
                    curriculum_update(before, st.planar_err / k, st.cmd_speed / k, term == Termination::Fall)
                } else {
                    before
                };
                self.levels[i] = after;
                out.finished.push(FinishedEpisode {
                    agent: i,
                    steps: st.steps,
                    ret: st.ret,
                    mean_planar_err: st.planar_err / k,
                    mean_yaw_err: st.yaw_err / k,
                    termination: term,
                    level_before: before,
                    level_after: after,
                });
                let (s, p) = self.fresh_episode(i);
                self.states[i] = s;
                self.params[i] = p;
                out.final_obs.push(o.obs);
                out.final_priv.push(o.privileged);
                out.obs.push(observe(&self.states[i], &self.params[i]));
                out.privileged.push(observe_priv(&self.states[i], &self.params[i], self.cfg.height_scan));
            } else {
                let steps = self.states[i].steps;
                let rng = &mut self.rngs[i];
                if steps.is_multiple_of(perturb_every) && self.overrides.perturb != Some(false) {
                    resample_perturbation(rng, &mut self.params[i]);
                    if let Some(f) = self.overrides.ext_force {
                        self.params[i].ext_force = f;
                    }
                }
                if steps.is_multiple_of(resample_every) {
                    self.states[i].command = mode.sample(rng);
                }
                // perturbation/command changes show up in the next observation
                let obs = observe(&self.states[i], &self.params[i]);
                let pr = observe_priv(&self.states[i], &self.params[i], self.cfg.height_scan);
                out.final_obs.push(obs.clone());
                out.final_priv.push(pr.clone());
                out.obs.push(obs);
                out.privileged.push(pr);
            }
        }
        out
    }

    pub fn mean_level(&self) -> f64 {
        self.levels.iter().map(|&l| l as f64).sum::<f64>() / self.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn friction_draws_stay_in_range() {
        let mut r = rng(1);
        for _ in 0..100_000 {
            let p = randomize(&mut r, 5);
            assert!((0.1..=3.0).contains(&p.friction));
            assert!((0.5..=1.5).contains(&p.joint_init_scale));
            assert!((-2.0..=10.0).contains(&p.payload));
            assert!((0.0..=1.0).contains(&p.restitution));
            assert!(p.ext_force.iter().all(|f| f.abs() <= 20.0));
            assert!(p.ext_torque.iter().all(|t| t.abs() <= 5.0));
        }
    }

    #[test]
    fn randomize_is_deterministic() {
        let a: Vec<_> = (0..10)
            .map({
                let mut r = rng(7);
                move |_| randomize(&mut r, 3)
            })
            .collect();
        let b: Vec<_> = (0..10)
            .map({
                let mut r = rng(7);
                move |_| randomize(&mut r, 3)
            })
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_tracking_earns_both_kernels() {
        let mut s = EnvState::zero([0.0; 3]);
        let p = EnvParams::nominal();
        // zero command and standstill: every penalty is zero
        let o = step(&s, &p, &[0.0; 12], 0.02, 1000, DEFAULT_SCAN);
        assert!((o.reward.total - 2.25).abs() < 1e-12, "{:?}", o.reward);
        assert!(o.reward.weighted()[2..].iter().all(|&v| v == 0.0));
        s.vel = [0.5, 0.0, 0.0];
        s.command = [0.5, 0.0, 0.0];
        let terms = step(&s, &p, &[0.0; 12], 0.02, 1000, DEFAULT_SCAN).reward.terms;
        // drag decelerates the base slightly within the step
        assert!(terms[0] > 0.999);
    }

    #[test]
    fn full_scale_torque_penalty() {
        let s = EnvState::zero([0.0; 3]);
        let p = EnvParams::nominal();
        let o = step(&s, &p, &[1.0; 12], 0.02, 1000, DEFAULT_SCAN);
        assert!((o.reward.weighted()[4] - (-0.96)).abs() < 1e-12);
    }

    #[test]
    fn reward_total_is_weighted_sum() {
        let mut r = rng(3);
        let mut s = EnvState::reset(&mut r, &EnvParams::nominal(), [0.7, -0.2, 0.3]);
        let p = randomize(&mut r, 4);
        for _ in 0..200 {
            let a: Vec<f64> = (0..12).map(|_| r.random_range(-1.5..1.5)).collect();
            let o = step(&s, &p, &a, 0.02, 1000, DEFAULT_SCAN);
            let dot: f64 = o.reward.terms.iter().zip(REWARD_WEIGHTS).map(|(t, w)| t * w).sum();
            assert_eq!(o.reward.total, dot);
            s = o.state;
        }
    }

    #[test]
    fn observation_widths() {
        let s = EnvState::zero([0.0; 3]);
        let p = EnvParams::nominal();
        assert_eq!(observe(&s, &p).len(), 45);
        assert_eq!(observe_priv(&s, &p, 187).len(), 244);
        let pr = observe_priv(&s, &p, 187);
        let c = priv_layout::contacts(187);
        assert!(pr[c..c + 4].iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(pr[priv_layout::friction(187)], 1.0);
    }

    #[test]
    fn curriculum_rule() {
        assert_eq!(curriculum_update(9, 0.0, 1.0, false), 9);
        assert_eq!(curriculum_update(3, 0.0, 1.0, true), 2);
        assert_eq!(curriculum_update(0, 0.0, 1.0, true), 0);
        assert_eq!(curriculum_update(4, 0.1, 1.0, false), 5);
        assert_eq!(curriculum_update(4, 0.3, 1.0, false), 4);
    }

    #[test]
    fn command_speed_caps() {
        let mut r = rng(11);
        let mut max_id: f64 = 0.0;
        let mut max_ood: f64 = 0.0;
        let mut zeros = 0;
        for _ in 0..100_000 {
            let c = sample_command(&mut r, CommandMode::EvalId.max_speed());
            max_id = max_id.max(c[0].hypot(c[1]));
            assert!(c[2].abs() <= MAX_YAW_CMD);
            if c == [0.0; 3] {
                zeros += 1;
            }
            let c = sample_command(&mut r, CommandMode::EvalOod.max_speed());
            max_ood = max_ood.max(c[0].hypot(c[1]));
        }
        assert!(max_id <= 1.0 + 1e-12);
        assert!(max_ood > 1.0 && max_ood <= 2.0 + 1e-12);
        assert!(zeros > 0);
    }

    #[test]
    fn friction_changes_trajectory_quickly() {
        let mut lo = EnvParams::nominal();
        lo.friction = 0.1;
        let mut hi = EnvParams::nominal();
        hi.friction = 3.0;
        let mut a = EnvState::zero([1.0, 0.0, 0.0]);
        let mut b = a.clone();
        let act = [0.6; 12];
        let mut diverged = false;
        for _ in 0..10 {
            a = step(&a, &lo, &act, 0.02, 1000, 0).state;
            b = step(&b, &hi, &act, 0.02, 1000, 0).state;
            if (a.vel[0] - b.vel[0]).abs() > 1e-3 {
                diverged = true;
            }
        }
        assert!(diverged);
    }

    #[test]
    fn traction_clamp_holds() {
        let mut r = rng(5);
        for _ in 0..2000 {
            let p = randomize(&mut r, 2);
            let s = EnvState::reset(&mut r, &p, [0.0; 3]);
            let a: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
            let o = step(&s, &p, &a, 0.02, 1000, 0);
            assert!(o.info.planar_propulsion <= p.traction_limit() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn episodes_end_by_timeout() {
        let cfg = EnvConfig { height_scan: 0, ..EnvConfig::default() };
        let mut env = VecEnv::new(cfg, 2, 9, Overrides { perturb: Some(false), ..Default::default() });
        let mut ended = [false; 2];
        for t in 0..1000 {
            let out = env.step(&vec![vec![0.0; 12]; 2]);
            for f in &out.finished {
                ended[f.agent] = true;
                assert!(f.steps <= 1000);
            }
            if t == 999 {
                assert!(ended.iter().all(|&e| e));
            }
        }
    }

    #[test]
    fn nan_action_faults() {
        let s = EnvState::zero([0.0; 3]);
        let mut a = [0.0; 12];
        a[3] = f64::NAN;
        let o = step(&s, &EnvParams::nominal(), &a, 0.02, 1000, 0);
        assert_eq!(o.termination, Some(Termination::Fault(Fault::NonFiniteAction)));
    }

    #[test]
    fn vec_env_is_deterministic() {
        let run = || {
            let mut env = VecEnv::new(EnvConfig::default(), 3, 42, Overrides::default());
            let mut r = rng(0);
            let mut trace = Vec::new();
            for _ in 0..300 {
                let acts: Vec<Vec<f64>> =
                    (0..3).map(|_| (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
                let out = env.step(&acts);
                trace.push(out.obs.concat());
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
