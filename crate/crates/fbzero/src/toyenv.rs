//! Toy continuous-control environments: a 2-D point mass and a 2-joint
//! planar arm.
//!
//! Both expose the same interface the training loop needs: a privileged /
//! proprioceptive state split, an observation-action history window,
//! per-episode domain randomization, additive observation noise, random
//! pushes, and non-positive regularization rewards. Episodes have fixed
//! length; there is no termination condition besides numerical blow-up.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::motions::Motion;

pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 2;
/// pose (2) + velocity (2) + prev action (2) + episode params (5).
pub const PRIV_DIM: usize = 11;

/// PD gains for the arm; the point mass takes bounded accelerations directly.
pub const ARM_KP: f64 = 20.0;
pub const ARM_KD: f64 = 0.5;
/// Planar arm link lengths (base at the origin).
pub const ARM_L1: f64 = 0.5;
pub const ARM_L2: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("invalid init spec: motion frame {index} out of range (motion `{id}` has {len} frames)")]
    BadInitFrame { id: String, index: usize, len: usize },
    #[error("numerical blow-up at step {step}: non-finite state")]
    NumericalBlowUp { step: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    PointMass,
    Arm2,
}

/// Uniform sampling interval.
pub type Interval = (f64, f64);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrRanges {
    pub mass_scale: Interval,
    pub friction: Interval,
    pub gain_scale: Interval,
    pub action_offset: Interval,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseScales {
    /// Additive uniform half-width per pose-error channel.
    pub pose: f64,
    /// Additive uniform half-width per velocity channel.
    pub velocity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuxWeights {
    pub action_rate: f64,
    pub dof_limit: f64,
    pub velocity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvConfig {
    pub env_kind: EnvKind,
    pub dt: f64,
    pub episode_len: usize,
    pub history_len: usize,
    pub dr_ranges: DrRanges,
    pub noise_scales: NoiseScales,
    pub push_prob: f64,
    pub push_speed_max: f64,
    pub fall_init_prob: f64,
    pub aux_weights: AuxWeights,
    /// Soft pose limit used by the DoF-limit penalty.
    pub limit_q_max: f64,
    /// Soft velocity limit used by the velocity penalty.
    pub limit_v_max: f64,
}

impl EnvConfig {
    pub fn pointmass() -> Self {
        EnvConfig {
            env_kind: EnvKind::PointMass,
            dt: 0.05,
            episode_len: 200,
            history_len: 4,
            dr_ranges: DrRanges {
                mass_scale: (0.95, 1.05),
                friction: (0.05, 0.5),
                gain_scale: (0.9, 1.1),
                action_offset: (-0.02, 0.02),
            },
            noise_scales: NoiseScales { pose: 0.01, velocity: 0.05 },
            push_prob: 0.01,
            push_speed_max: 0.5,
            fall_init_prob: 0.3,
            aux_weights: AuxWeights { action_rate: 0.1, dof_limit: 10.0, velocity: 1.0 },
            limit_q_max: 2.0,
            limit_v_max: 2.0,
        }
    }

    pub fn arm2() -> Self {
        EnvConfig {
            env_kind: EnvKind::Arm2,
            dt: 0.05,
            episode_len: 200,
            history_len: 4,
            dr_ranges: DrRanges {
                mass_scale: (0.95, 1.05),
                friction: (0.05, 0.5),
                gain_scale: (0.9, 1.1),
                action_offset: (-0.02, 0.02),
            },
            noise_scales: NoiseScales { pose: 0.01, velocity: 0.05 },
            push_prob: 0.01,
            push_speed_max: 0.5,
            fall_init_prob: 0.3,
            aux_weights: AuxWeights { action_rate: 0.1, dof_limit: 10.0, velocity: 1.0 },
            limit_q_max: 0.9 * PI,
            limit_v_max: 8.0,
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointMass => Self::pointmass(),
            EnvKind::Arm2 => Self::arm2(),
        }
    }

    /// A copy with every stochastic element disabled: nominal dynamics,
    /// no observation noise, no pushes, no fall initialization.
    pub fn nominal(&self) -> Self {
        let mut cfg = self.clone();
        cfg.dr_ranges = DrRanges {
            mass_scale: (1.0, 1.0),
            friction: (nominal_mid(self.dr_ranges.friction), nominal_mid(self.dr_ranges.friction)),
            gain_scale: (1.0, 1.0),
            action_offset: (0.0, 0.0),
        };
        cfg.noise_scales = NoiseScales { pose: 0.0, velocity: 0.0 };
        cfg.push_prob = 0.0;
        cfg.fall_init_prob = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0) {
            return fail("dt must be > 0");
        }
        if self.episode_len < 2 {
            return fail("episode_len must be >= 2");
        }
        for (name, (lo, hi)) in [
            ("mass_scale", self.dr_ranges.mass_scale),
            ("friction", self.dr_ranges.friction),
            ("gain_scale", self.dr_ranges.gain_scale),
            ("action_offset", self.dr_ranges.action_offset),
        ] {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(EnvError::InvalidConfig(format!("empty DR interval for {name}")));
            }
        }
        if !(0.0..=1.0).contains(&self.push_prob) {
            return fail("push_prob must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fall_init_prob) {
            return fail("fall_init_prob must be in [0, 1]");
        }
        if self.noise_scales.pose < 0.0 || self.noise_scales.velocity < 0.0 {
            return fail("noise half-widths must be >= 0");
        }
        Ok(())
    }

    pub fn history_dim(&self) -> usize {
        self.history_len * (OBS_DIM + ACT_DIM) + OBS_DIM
    }
}

fn nominal_mid((lo, hi): Interval) -> f64 {
    0.5 * (lo + hi)
}

/// Per-episode domain-randomization draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub mass_scale: f64,
    pub friction: f64,
    pub gain_scale: f64,
    pub action_offset: [f64; ACT_DIM],
}

impl EpisodeParams {
    pub fn nominal() -> Self {
        EpisodeParams { mass_scale: 1.0, friction: 0.0, gain_scale: 1.0, action_offset: [0.0; ACT_DIM] }
    }

    pub fn features(&self) -> [f64; 5] {
        [self.mass_scale, self.friction, self.gain_scale, self.action_offset[0], self.action_offset[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedState {
    pub pose: [f64; 2],
    pub velocity: [f64; 2],
    pub prev_action: [f64; ACT_DIM],
    pub params: EpisodeParams,
    pub step_index: usize,
}

impl PrivilegedState {
    /// Flat feature vector fed to privileged critics and B.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(PRIV_DIM);
        out.extend_from_slice(&self.pose);
        out.extend_from_slice(&self.velocity);
        out.extend_from_slice(&self.prev_action);
        out.extend_from_slice(&self.params.features());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pose_err: [f64; 2],
    pub velocity: [f64; 2],
}

impl Observation {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.pose_err[0], self.pose_err[1], self.velocity[0], self.velocity[1]]
    }
}

/// Flat window of the last `H` (observation, action) pairs followed by the
/// current observation, oldest first; missing leading entries are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsHistory {
    history_len: usize,
    data: Vec<f64>,
}

impl ObsHistory {
    pub fn new(history_len: usize, current: &Observation) -> Self {
        let mut data = vec![0.0; history_len * (OBS_DIM + ACT_DIM) + OBS_DIM];
        let off = history_len * (OBS_DIM + ACT_DIM);
        data[off..].copy_from_slice(&current.to_vec());
        ObsHistory { history_len, data }
    }

    /// Push the action just taken and the resulting observation: the previous
    /// current observation pairs up with `action` as the newest history slot.
    pub fn advance(&mut self, action: [f64; ACT_DIM], next: &Observation) {
        let pair = OBS_DIM + ACT_DIM;
        let off = self.history_len * pair;
        if self.history_len > 0 {
            self.data.copy_within(pair..off, 0);
            let newest = (self.history_len - 1) * pair;
            let cur_obs: Vec<f64> = self.data[off..].to_vec();
            self.data[newest..newest + OBS_DIM].copy_from_slice(&cur_obs);
            self.data[newest + OBS_DIM..newest + pair].copy_from_slice(&action);
        }
        self.data[off..].copy_from_slice(&next.to_vec());
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The current (most recent) observation stored in the window tail.
    pub fn current(&self) -> Observation {
        let off = self.history_len * (OBS_DIM + ACT_DIM);
        Observation {
            pose_err: [self.data[off], self.data[off + 1]],
            velocity: [self.data[off + 2], self.data[off + 3]],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Regularization penalties; every component is non-positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxRewardVector {
    pub action_rate: f64,
    pub limit_penalty: f64,
    pub velocity_penalty: f64,
}

impl AuxRewardVector {
    pub fn total(&self) -> f64 {
        self.action_rate + self.limit_penalty + self.velocity_penalty
    }
}

fn sample_interval(rng: &mut ChaCha8Rng, (lo, hi): Interval) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Sample per-episode domain-randomization parameters.
pub fn randomize(cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> EpisodeParams {
    EpisodeParams {
        mass_scale: sample_interval(rng, cfg.dr_ranges.mass_scale),
        friction: sample_interval(rng, cfg.dr_ranges.friction),
        gain_scale: sample_interval(rng, cfg.dr_ranges.gain_scale),
        action_offset: [
            sample_interval(rng, cfg.dr_ranges.action_offset),
            sample_interval(rng, cfg.dr_ranges.action_offset),
        ],
    }
}

#[derive(Clone, Copy, Debug)]
pub enum InitSource<'a> {
    Default,
    MotionFrame(&'a Motion, usize),
    Fall,
}

/// Pose range used for fall initialization.
fn fall_pose_range(kind: EnvKind) -> f64 {
    match kind {
        EnvKind::PointMass => 2.0,
        EnvKind::Arm2 => PI,
    }
}

pub fn reset(
    cfg: &EnvConfig,
    init: InitSource,
    rng: &mut ChaCha8Rng,
) -> Result<(PrivilegedState, ObsHistory), EnvError> {
    cfg.validate()?;
    let params = randomize(cfg, rng);
    let (pose, velocity) = match init {
        InitSource::Default => ([0.0, 0.0], [0.0, 0.0]),
        InitSource::MotionFrame(motion, idx) => {
            let frame = motion.frames.get(idx).ok_or_else(|| EnvError::BadInitFrame {
                id: motion.id.clone(),
                index: idx,
                len: motion.frames.len(),
            })?;
            (frame.state.pose, frame.state.velocity)
        }
        InitSource::Fall => {
            let qr = fall_pose_range(cfg.env_kind);
            (
                [rng.random_range(-qr..qr), rng.random_range(-qr..qr)],
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            )
        }
    };
    let state = PrivilegedState { pose, velocity, prev_action: [0.0; ACT_DIM], params, step_index: 0 };
    let obs = observe(&state, cfg, rng);
    let history = ObsHistory::new(cfg.history_len, &obs);
    Ok((state, history))
}

/// Noisy proprioceptive view of a state.
pub fn observe(state: &PrivilegedState, cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> Observation {
    let mut noise = |h: f64| if h > 0.0 { rng.random_range(-h..h) } else { 0.0 };
    let hp = cfg.noise_scales.pose;
    let hv = cfg.noise_scales.velocity;
    Observation {
        pose_err: [state.pose[0] + noise(hp), state.pose[1] + noise(hp)],
        velocity: [state.velocity[0] + noise(hv), state.velocity[1] + noise(hv)],
    }
}

/// Forward kinematics of the planar arm end effector.
pub fn arm2_end_effector(q: &[f64; 2]) -> [f64; 2] {
    [
        ARM_L1 * q[0].cos() + ARM_L2 * (q[0] + q[1]).cos(),
        ARM_L1 * q[0].sin() + ARM_L2 * (q[0] + q[1]).sin(),
    ]
}

/// One semi-implicit Euler step.
pub fn step(
    state: &PrivilegedState,
    action: [f64; ACT_DIM],
    cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PrivilegedState, Observation, AuxRewardVector), EnvError> {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let p = &state.params;
    let a_used = [a[0] + p.action_offset[0], a[1] + p.action_offset[1]];

    let mut velocity = state.velocity;
    match cfg.env_kind {
        EnvKind::PointMass => {
            for j in 0..2 {
                velocity[j] += cfg.dt * (a_used[j] / p.mass_scale - p.friction * state.velocity[j]);
            }
        }
        EnvKind::Arm2 => {
            for j in 0..2 {
                let target = a_used[j] * PI;
                let torque = ARM_KP * p.gain_scale * (target - state.pose[j]) - ARM_KD * state.velocity[j];
                velocity[j] += cfg.dt * torque / p.mass_scale;
            }
        }
    }

    // Random push: an instantaneous velocity impulse in a uniform direction.
    if cfg.push_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.push_prob {
        let angle = rng.random_range(0.0..2.0 * PI);
        let speed = rng.random_range(0.0..cfg.push_speed_max.max(f64::MIN_POSITIVE));
        velocity[0] += speed * angle.cos();
        velocity[1] += speed * angle.sin();
    }

    let mut pose = state.pose;
    for j in 0..2 {
        pose[j] += cfg.dt * velocity[j];
    }
    if cfg.env_kind == EnvKind::Arm2 {
        for j in 0..2 {
            if pose[j] > PI {
                pose[j] = PI;
                velocity[j] = 0.0;
            } else if pose[j] < -PI {
                pose[j] = -PI;
                velocity[j] = 0.0;
            }
        }
    }

    if !pose.iter().chain(velocity.iter()).all(|v| v.is_finite()) {
        return Err(EnvError::NumericalBlowUp { step: state.step_index });
    }

    let next = PrivilegedState {
        pose,
        velocity,
        prev_action: a,
        params: *p,
        step_index: state.step_index + 1,
    };

    let w = &cfg.aux_weights;
    let rate: f64 = a.iter().zip(&state.prev_action).map(|(x, y)| (x - y).powi(2)).sum();
    let limit: f64 = pose.iter().map(|q| (q.abs() - cfg.limit_q_max).max(0.0).powi(2)).sum();
    let vel: f64 = velocity.iter().map(|v| (v.abs() - cfg.limit_v_max).max(0.0).powi(2)).sum();
    let aux = AuxRewardVector {
        action_rate: -w.action_rate * rate,
        limit_penalty: -w.dof_limit * limit,
        velocity_penalty: -w.velocity * vel,
    };

    let obs = observe(&next, cfg, rng);
    Ok((next, obs, aux))
}
