//! Zero-shot prompting of a trained checkpoint.
//!
//! A task is turned into a latent and the frozen policy is conditioned on
//! it: reward functions via a sample-based backward embedding, goals via
//! B of the goal frame, motions via look-ahead sums of B along the motion.
//! Also houses Q-value estimation from the forward map and spherical latent
//! interpolation.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fbcore::{
    ActMode, FbError, LatentVector, Model, NET_F, policy_act, project_sphere,
};
use crate::motions::Motion;
use crate::nets::{NetError, forward_inference};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("empty reward probe")]
    EmptyProbe,
    #[error("uninformative reward: all probe rewards are zero")]
    UninformativeReward,
    #[error("probe rewards must be finite")]
    NonFiniteReward,
    #[error("undefined geodesic: latents are antipodal")]
    Antipodal,
    #[error("latent norm {got:.4} is not sqrt(d) = {want:.4}")]
    OffSphere { got: f64, want: f64 },
    #[error(transparent)]
    Fb(#[from] FbError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// State samples with scalar rewards, the sample-based estimate of z_r.
#[derive(Clone, Debug)]
pub struct RewardProbe {
    pub states: Tensor,
    pub obs: Tensor,
    pub rewards: Vec<f64>,
}

impl RewardProbe {
    pub fn check(&self) -> Result<(), InferError> {
        if self.states.rows() == 0 || self.rewards.is_empty() {
            return Err(InferError::EmptyProbe);
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(InferError::NonFiniteReward);
        }
        if self.rewards.iter().all(|&r| r == 0.0) {
            return Err(InferError::UninformativeReward);
        }
        Ok(())
    }
}

/// Raw reward embedding (1/N) Σ r(s_i) B(s_i, o_i), without projection.
/// This is the calibrated vector used by [`q_estimate`].
pub fn reward_embedding_raw(model: &Model, probe: &RewardProbe) -> Result<Vec<f64>, InferError> {
    probe.check()?;
    let b = model.b_values(&probe.states, &probe.obs)?;
    let n = b.rows();
    let d = model.dims.latent_dim;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        let r = probe.rewards[i];
        for (c, acc) in mean.iter_mut().enumerate() {
            *acc += r * b.get(i, c) / n as f64;
        }
    }
    Ok(mean)
}

/// z_r: sphere projection of the reward-weighted mean of B outputs.
pub fn reward_embedding(model: &Model, probe: &RewardProbe) -> Result<LatentVector, InferError> {
    Ok(project_sphere(&reward_embedding_raw(model, probe)?)?)
}

/// z_g = project_sphere(B(s_g, o_g)) for a single goal frame.
pub fn goal_embedding(model: &Model, state: &Tensor, obs: &Tensor) -> Result<LatentVector, InferError> {
    let b = model.b_values(state, obs)?;
    Ok(project_sphere(b.row_slice(0))?)
}

#[derive(Clone, Debug)]
pub struct TrackingPrompt<'a> {
    pub motion: &'a Motion,
    /// Look-ahead horizon H in frames; the window is clipped at motion end.
    pub lookahead: usize,
}

/// Core of [`tracking_embeddings`] over raw frame matrices: per frame t,
/// z_t = project_sphere(Σ_{t'=t}^{min(t+H, end)} B(s_t', o_t')).
pub fn tracking_embeddings_from(
    model: &Model,
    states: &Tensor,
    obs: &Tensor,
    lookahead: usize,
) -> Result<Vec<LatentVector>, InferError> {
    let b = model.b_values(states, obs)?;
    let n = b.rows();
    let d = model.dims.latent_dim;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let end = (t + lookahead).min(n - 1);
        let mut sum = vec![0.0; d];
        for row in t..=end {
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += b.get(row, c);
            }
        }
        out.push(project_sphere(&sum)?);
    }
    Ok(out)
}

/// Per-frame tracking latents for a motion; the returned sequence has the
/// motion's length.
pub fn tracking_embeddings(model: &Model, prompt: &TrackingPrompt) -> Result<Vec<LatentVector>, InferError> {
    let states = Tensor::from_rows(
        &prompt.motion.frames.iter().map(|f| f.state.features()).collect::<Vec<_>>(),
    );
    let obs =
        Tensor::from_rows(&prompt.motion.frames.iter().map(|f| f.obs.to_vec()).collect::<Vec<_>>());
    tracking_embeddings_from(model, &states, &obs, prompt.lookahead)
}

/// Q ≈ min over F members of F(x, a, z_policy)ᵀ z_r, with the *raw*
/// (unprojected) reward embedding for calibrated scale.
pub fn q_estimate(
    model: &Model,
    obs_hist: &Tensor,
    state: &Tensor,
    action: &Tensor,
    z_policy: &LatentVector,
    z_r_raw: &[f64],
) -> Result<f64, InferError> {
    let input = Tensor::hcat(&[obs_hist, state, action, &z_policy.to_row()]);
    let mut q = f64::INFINITY;
    for member in 0..model.arch_f.ensemble_size {
        let f = forward_inference(&model.store, NET_F, member, &model.arch_f, &input)?;
        let dot: f64 = z_r_raw.iter().enumerate().map(|(c, zr)| f.get(0, c) * zr).sum();
        q = q.min(dot);
    }
    Ok(q)
}

/// Act with the frozen policy. Eval mode is the deterministic tanh(mean).
pub fn act(
    model: &Model,
    obs_hist: &Tensor,
    z: &LatentVector,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, InferError> {
    let want = (model.dims.latent_dim as f64).sqrt();
    if (z.norm() - want).abs() > 1e-5 {
        return Err(InferError::OffSphere { got: z.norm(), want });
    }
    let n = obs_hist.rows();
    let mut z_rows = Vec::with_capacity(n);
    for _ in 0..n {
        z_rows.push(z.as_slice().to_vec());
    }
    Ok(policy_act(model, obs_hist, &Tensor::from_rows(&z_rows), mode, rng)?)
}

/// Spherical linear interpolation on the √d sphere.
pub fn slerp(z0: &LatentVector, z1: &LatentVector, t: f64) -> Result<LatentVector, InferError> {
    assert_eq!(z0.dim(), z1.dim(), "latent dimension mismatch");
    let d = z0.dim() as f64;
    let cos = z0
        .as_slice()
        .iter()
        .zip(z1.as_slice())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / d; // both norms are √d
    let omega = cos.clamp(-1.0, 1.0).acos();
    if omega > std::f64::consts::PI - 1e-3 {
        return Err(InferError::Antipodal);
    }
    let mixed: Vec<f64> = if omega < 1e-6 {
        z0.as_slice().iter().zip(z1.as_slice()).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    } else {
        let s = omega.sin();
        let w0 = ((1.0 - t) * omega).sin() / s;
        let w1 = (t * omega).sin() / s;
        z0.as_slice().iter().zip(z1.as_slice()).map(|(a, b)| w0 * a + w1 * b).collect()
    };
    Ok(project_sphere(&mixed)?)
}
