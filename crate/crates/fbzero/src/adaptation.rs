//! Few-shot test-time adaptation in latent space.
//!
//! Two derivative-free optimizers over policy latents against rollout
//! objectives J(z): cross-entropy method over a single latent, and a
//! dual-loop annealed sampling optimizer over a latent sequence. Networks
//! are never fine-tuned; only the prompt z moves.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{self, EvalError, rollout_batch, task_reward};
use crate::fbcore::{ActMode, FbError, LatentVector, Model, project_sphere};
use crate::motions::Motion;
use crate::toyenv::{EnvConfig, InitSource, PrivilegedState};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("bad adaptation config: {0}")]
    BadConfig(String),
    #[error("latent is off the sphere (norm {0})")]
    OffSphere(f64),
    #[error("all {population} candidates non-finite at iteration {iteration}")]
    AllNonFinite { iteration: usize, population: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fb(#[from] FbError),
}

/// Fixed (de-randomized) episode parameters, e.g. a payload analog via a
/// mass-scale override. Each `Some` collapses the corresponding domain
/// randomization interval to a point.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EnvOverrides {
    pub mass_scale: Option<f64>,
    pub friction: Option<f64>,
    pub gain_scale: Option<f64>,
}

impl EnvOverrides {
    pub fn apply(&self, cfg: &EnvConfig) -> EnvConfig {
        let mut out = cfg.clone();
        if let Some(v) = self.mass_scale {
            out.dr_ranges.mass_scale = (v, v);
        }
        if let Some(v) = self.friction {
            out.dr_ranges.friction = (v, v);
        }
        if let Some(v) = self.gain_scale {
            out.dr_ranges.gain_scale = (v, v);
        }
        out
    }
}

/// Per-step task reward used inside J(z).
pub enum AdaptTask<'a> {
    /// Named reward from the evaluation registry.
    Reward { name: &'a str, params: &'a serde_json::Value },
    /// Pose-tracking kernel exp(−‖q_t − q_t^ref‖²/0.1) against a reference
    /// motion; rollouts start from its first frame.
    TrackMotion(&'a Motion),
    /// Arbitrary per-state reward (library use only).
    Custom(&'a dyn Fn(&PrivilegedState) -> f64),
}

/// J(z) = mean over episodes of Σ_t (r_task(s_t) − α_R · penalties_t),
/// where the regularization penalties are the magnitudes of the auxiliary
/// reward components.
pub struct AdaptObjective<'a> {
    pub task: AdaptTask<'a>,
    pub alpha_r: f64,
    pub rollout_len: usize,
    pub episodes_per_eval: usize,
    pub overrides: EnvOverrides,
}

impl AdaptObjective<'_> {
    fn check(&self, env: &EnvConfig) -> Result<(), AdaptError> {
        if self.episodes_per_eval == 0 {
            return Err(AdaptError::BadConfig("episodes_per_eval must be >= 1".into()));
        }
        if self.rollout_len == 0 || self.rollout_len > env.episode_len {
            return Err(AdaptError::BadConfig(format!(
                "rollout_len {} outside 1..={}",
                self.rollout_len, env.episode_len
            )));
        }
        if let AdaptTask::TrackMotion(m) = &self.task {
            if m.len() <= self.rollout_len {
                return Err(AdaptError::BadConfig(format!(
                    "reference motion has {} frames, need > rollout_len {}",
                    m.len(),
                    self.rollout_len
                )));
            }
        }
        Ok(())
    }

    fn init_source(&self) -> InitSource<'_> {
        match &self.task {
            AdaptTask::TrackMotion(m) => InitSource::MotionFrame(m, 0),
            _ => InitSource::Default,
        }
    }

    fn step_reward(&self, t: usize, state: &PrivilegedState) -> Result<f64, AdaptError> {
        Ok(match &self.task {
            AdaptTask::Reward { name, params } => task_reward(name, params, state)?,
            AdaptTask::TrackMotion(m) => {
                let r = &m.frames[(t + 1).min(m.len() - 1)].state.pose;
                let d2 = (state.pose[0] - r[0]).powi(2) + (state.pose[1] - r[1]).powi(2);
                (-d2 / 0.1).exp()
            }
            AdaptTask::Custom(f) => f(state),
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CemConfig {
    pub iterations: usize,
    pub population: usize,
    pub elite_frac: f64,
    pub init_std: f64,
    pub std_floor: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            iterations: 20,
            population: 64,
            elite_frac: 0.125,
            init_std: 0.3,
            std_floor: 0.02,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        ((self.population as f64 * self.elite_frac).round() as usize).max(1)
    }

    fn check(&self) -> Result<(), AdaptError> {
        if self.population < 4 {
            return Err(AdaptError::BadConfig("population must be >= 4".into()));
        }
        if self.iterations == 0 {
            return Err(AdaptError::BadConfig("iterations must be >= 1".into()));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(AdaptError::BadConfig("elite_frac must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AnnealConfig {
    /// Particle count N.
    pub particles: usize,
    /// Outer (global) annealing factor β₁.
    pub beta1: f64,
    /// Inner (per-chunk) annealing factor β₂.
    pub beta2: f64,
    /// Outer iterations M.
    pub iterations: usize,
    /// Number of latent chunks L covering the horizon.
    pub chunks: usize,
    pub base_std: f64,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            particles: 2048,
            beta1: 0.85,
            beta2: 0.9,
            iterations: 6,
            chunks: 8,
            base_std: 0.2,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    fn check(&self) -> Result<(), AdaptError> {
        if self.particles < 1 {
            return Err(AdaptError::BadConfig("particles must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(AdaptError::BadConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.iterations == 0 || self.chunks == 0 {
            return Err(AdaptError::BadConfig("iterations and chunks must be >= 1".into()));
        }
        Ok(())
    }
}

/// Noise std for outer iteration `i` and chunk `t` of `chunks`:
/// σ_{i,t} = base_std · β₁^i · β₂^(L−1−t). Later chunks get larger noise
/// early in the schedule; both factors anneal geometrically.
pub fn anneal_sigma(cfg: &AnnealConfig, i: usize, t: usize) -> f64 {
    cfg.base_std * cfg.beta1.powi(i as i32) * cfg.beta2.powi((cfg.chunks - 1 - t) as i32)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterStats {
    pub iteration: usize,
    pub best_j: f64,
    pub mean_j: f64,
    pub sigma: f64,
}

pub fn history_csv(history: &[IterStats]) -> String {
    let mut out = String::from("iteration,best_j,mean_j,sigma\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.iteration, h.best_j, h.mean_j, h.sigma));
    }
    out
}

/// Evaluate J for one latent schedule (length 1 = constant z) by averaged
/// rollouts under the objective's env overrides. Deterministic given `rng`.
pub fn eval_objective(
    model: &Model,
    env: &EnvConfig,
    obj: &AdaptObjective,
    zs: &[LatentVector],
    rng: &mut ChaCha8Rng,
) -> Result<f64, AdaptError> {
    let js = eval_population(model, env, obj, std::slice::from_ref(&zs.to_vec()), rng)?;
    Ok(js[0])
}

/// Evaluate J for many latent schedules in one batched rollout wave;
/// each schedule is averaged over `episodes_per_eval` episodes.
fn eval_population(
    model: &Model,
    env: &EnvConfig,
    obj: &AdaptObjective,
    schedules: &[Vec<LatentVector>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, AdaptError> {
    obj.check(env)?;
    let env = obj.overrides.apply(env);
    let eps = obj.episodes_per_eval;
    let mut inits = Vec::with_capacity(schedules.len() * eps);
    let mut all_z = Vec::with_capacity(schedules.len() * eps);
    for zs in schedules {
        // Expand the chunked schedule to one latent per step.
        let l = zs.len();
        let per_step: Vec<LatentVector> = if l == 1 {
            zs.clone()
        } else {
            (0..obj.rollout_len).map(|s| zs[s * l / obj.rollout_len].clone()).collect()
        };
        for _ in 0..eps {
            inits.push(obj.init_source());
            all_z.push(per_step.clone());
        }
    }
    let records =
        rollout_batch(model, &env, &inits, &all_z, obj.rollout_len, ActMode::Mean, rng)?;
    let mut js = Vec::with_capacity(schedules.len());
    for chunk in records.chunks(eps) {
        let mut total = 0.0;
        for rec in chunk {
            for t in 0..obj.rollout_len {
                let r = obj.step_reward(t, &rec.states[t + 1])?;
                // aux.total() is non-positive, so adding α_R·total subtracts
                // the penalty magnitudes as J(z) requires.
                total += r + obj.alpha_r * rec.aux[t].total();
            }
        }
        js.push(total / eps as f64);
    }
    Ok(js)
}

/// Indices of the `k` largest values, best first; non-finite values lose.
fn select_elite_indices(j: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..j.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ja, jb) = (j[a], j[b]);
        jb.partial_cmp(&ja).unwrap_or_else(|| jb.is_finite().cmp(&ja.is_finite()))
    });
    idx.truncate(k);
    idx
}

/// CEM over a single latent against an arbitrary population evaluator.
fn cem_core<F>(
    z_init: &LatentVector,
    cfg: &CemConfig,
    mut evaluate: F,
) -> Result<(LatentVector, Vec<IterStats>), AdaptError>
where
    F: FnMut(&[LatentVector], &mut ChaCha8Rng) -> Result<Vec<f64>, AdaptError>,
{
    cfg.check()?;
    let d = z_init.dim();
    let want = (d as f64).sqrt();
    if (z_init.norm() - want).abs() > 1e-5 {
        return Err(AdaptError::OffSphere(z_init.norm()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mu: Vec<f64> = z_init.as_slice().to_vec();
    // Projection of μ, kept so degenerate (zero-noise) samples stay bitwise
    // equal to the initialization instead of drifting by re-projection ulps.
    let mut mu_z = z_init.clone();
    let mut sigma = vec![cfg.init_std; d];
    // With init_std = 0 the noise stays degenerate by construction; the
    // floor only applies once noise was requested in the first place.
    let floor = cfg.std_floor.min(cfg.init_std);
    let mut best = (z_init.clone(), f64::NEG_INFINITY);
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let pop: Vec<LatentVector> = (0..cfg.population)
            .map(|_| {
                let x: Vec<f64> = (0..d)
                    .map(|i| mu[i] + sigma[i] * standard_normal_scalar(&mut rng))
                    .collect();
                if x == mu { Ok(mu_z.clone()) } else { project_sphere(&x) }
            })
            .collect::<Result<_, _>>()?;
        let js = evaluate(&pop, &mut rng)?;
        let finite: Vec<f64> = js.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(AdaptError::AllNonFinite { iteration: iter, population: cfg.population });
        }
        let elite = select_elite_indices(&js, cfg.elite_count());
        if js[elite[0]] > best.1 {
            best = (pop[elite[0]].clone(), js[elite[0]]);
        }
        let k = elite.len() as f64;
        if elite.iter().all(|&e| pop[e].as_slice() == pop[elite[0]].as_slice()) {
            // Degenerate elite set: collapse exactly (no summation rounding).
            mu_z = pop[elite[0]].clone();
            mu.copy_from_slice(mu_z.as_slice());
            sigma.fill(floor);
        } else {
            for i in 0..d {
                let mean = elite.iter().map(|&e| pop[e].as_slice()[i]).sum::<f64>() / k;
                let var =
                    elite.iter().map(|&e| (pop[e].as_slice()[i] - mean).powi(2)).sum::<f64>() / k;
                mu[i] = mean;
                sigma[i] = var.sqrt().max(floor);
            }
            mu_z = project_sphere(&mu)?;
        }
        history.push(IterStats {
            iteration: iter,
            best_j: best.1,
            mean_j: finite.iter().sum::<f64>() / finite.len() as f64,
            sigma: sigma.iter().sum::<f64>() / d as f64,
        });
    }
    Ok((best.0, history))
}

/// Cross-entropy method over a single latent. Returns the best-ever latent
/// (on the √d sphere) and per-iteration statistics.
pub fn cem_adapt(
    model: &Model,
    env: &EnvConfig,
    z_init: &LatentVector,
    obj: &AdaptObjective,
    cfg: &CemConfig,
) -> Result<(LatentVector, Vec<IterStats>), AdaptError> {
    cem_core(z_init, cfg, |pop, rng| {
        let schedules: Vec<Vec<LatentVector>> = pop.iter().map(|z| vec![z.clone()]).collect();
        eval_population(model, env, obj, &schedules, rng)
    })
}

fn anneal_core<F>(
    z_seq_init: &[LatentVector],
    cfg: &AnnealConfig,
    mut evaluate: F,
) -> Result<(Vec<LatentVector>, Vec<IterStats>), AdaptError>
where
    F: FnMut(&[Vec<LatentVector>], &mut ChaCha8Rng) -> Result<Vec<f64>, AdaptError>,
{
    cfg.check()?;
    if z_seq_init.len() != cfg.chunks {
        return Err(AdaptError::BadConfig(format!(
            "sequence has {} chunks, config says {}",
            z_seq_init.len(),
            cfg.chunks
        )));
    }
    let d = z_seq_init[0].dim();
    let want = (d as f64).sqrt();
    for z in z_seq_init {
        if (z.norm() - want).abs() > 1e-5 {
            return Err(AdaptError::OffSphere(z.norm()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq: Vec<LatentVector> = z_seq_init.to_vec();
    // Seed the best-ever with the warm start so adaptation never worsens it.
    let init_j = evaluate(std::slice::from_ref(&seq), &mut rng)?[0];
    let mut best = (seq.clone(), init_j);
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let particles: Vec<Vec<LatentVector>> = (0..cfg.particles)
            .map(|_| {
                (0..cfg.chunks)
                    .map(|t| {
                        let s = anneal_sigma(cfg, iter, t);
                        let x: Vec<f64> = seq[t]
                            .as_slice()
                            .iter()
                            .map(|&v| v + s * standard_normal_scalar(&mut rng))
                            .collect();
                        if x == seq[t].as_slice() {
                            Ok(seq[t].clone())
                        } else {
                            project_sphere(&x)
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let js = evaluate(&particles, &mut rng)?;
        let finite: Vec<f64> = js.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(AdaptError::AllNonFinite { iteration: iter, population: cfg.particles });
        }
        let j_max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let j_min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let lambda = (0.1 * (j_max - j_min)).max(1e-6);
        let w: Vec<f64> = js
            .iter()
            .map(|&j| if j.is_finite() { ((j - j_max) / lambda).exp() } else { 0.0 })
            .collect();
        let w_sum: f64 = w.iter().sum();
        for t in 0..cfg.chunks {
            let mut avg = vec![0.0; d];
            for (p, &wj) in particles.iter().zip(&w) {
                for (a, &v) in avg.iter_mut().zip(p[t].as_slice()) {
                    *a += wj * v;
                }
            }
            for a in &mut avg {
                *a /= w_sum;
            }
            if avg != seq[t].as_slice() {
                seq[t] = project_sphere(&avg)?;
            }
        }
        let (arg_best, &iter_best) = js
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if iter_best > best.1 {
            best = (particles[arg_best].clone(), iter_best);
        }
        history.push(IterStats {
            iteration: iter,
            best_j: best.1,
            mean_j: finite.iter().sum::<f64>() / finite.len() as f64,
            sigma: anneal_sigma(cfg, iter, cfg.chunks - 1),
        });
    }
    Ok((best.0, history))
}

/// Dual-loop annealed sampling optimization over a latent sequence:
/// the outer loop anneals noise globally (β₁), the inner schedule anneals
/// later chunks less (β₂); chunks are updated by softmax-weighted particle
/// averaging and re-projected to the sphere. Returns the best-ever sequence.
pub fn annealed_traj_opt(
    model: &Model,
    env: &EnvConfig,
    z_seq_init: &[LatentVector],
    obj: &AdaptObjective,
    cfg: &AnnealConfig,
) -> Result<(Vec<LatentVector>, Vec<IterStats>), AdaptError> {
    anneal_core(z_seq_init, cfg, |particles, rng| {
        eval_population(model, env, obj, particles, rng)
    })
}

/// Thin a per-step latent schedule (e.g. tracking embeddings) down to
/// `chunks` latents by sampling chunk-start steps.
pub fn downsample_schedule(zs: &[LatentVector], chunks: usize) -> Vec<LatentVector> {
    assert!(!zs.is_empty() && chunks >= 1);
    (0..chunks).map(|t| zs[t * zs.len() / chunks].clone()).collect()
}

fn standard_normal_scalar(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Convenience: evaluation-side tracking error of a latent schedule, for
/// before/after comparisons around `annealed_traj_opt`.
pub fn tracking_error(
    model: &Model,
    env: &EnvConfig,
    motion: &Motion,
    zs: &[LatentVector],
    rollout_len: usize,
    overrides: &EnvOverrides,
    rng: &mut ChaCha8Rng,
) -> Result<f64, AdaptError> {
    let env = overrides.apply(env);
    let l = zs.len();
    let per_step: Vec<LatentVector> =
        (0..rollout_len).map(|s| zs[s * l / rollout_len].clone()).collect();
    let rec = rollout_batch(
        model,
        &env,
        &[InitSource::MotionFrame(motion, 0)],
        &[per_step],
        rollout_len,
        ActMode::Mean,
        rng,
    )?;
    let ref_poses: Vec<Vec<f64>> =
        motion.frames[..=rollout_len].iter().map(|f| f.state.pose.to_vec()).collect();
    Ok(evaluation::mpjpe(&rec[0].poses(), &evaluation::MpjpeRef::Motion(&ref_poses))?)
}
