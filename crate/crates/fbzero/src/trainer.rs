//! Unsupervised pre-training: latent-conditioned rollouts into a replay
//! buffer, then per-round updates of the discriminator, the FB pair, both
//! critics and the actor, Polyak target tracking, and periodic tracking
//! evaluation that refreshes motion priorities.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::grad;
use crate::checkpoint::{self, CheckpointError};
use crate::evaluation::{self, EvalError, rollout_batch};
use crate::fbcore::{
    ActMode, CriticKind, ExpertBatch, FbError, LatentSamplerConfig, LatentVector, Model,
    ModelConfig, ModelDims, NET_B, NET_D, NET_F, NET_PI, NET_QD, NET_QR, TARGET_PAIRS, TrainBatch,
    actor_loss, critic_loss, disc_reward_batch, disc_values, discriminator_loss, fb_loss,
    policy_act, sample_latents, standard_normal, uniform_sphere,
};
use crate::inference::{InferError, TrackingPrompt, tracking_embeddings};
use crate::metrics::{CsvLog, MetricsError};
use crate::motions::{MotionError, MotionSet, chunk_motions, sample_frame_indices};
use crate::nets::{Adam, AdamState, GraphParams, NetError, polyak_update};
use crate::tensor::Tensor;
use crate::toyenv::{self, EnvConfig, EnvError, InitSource, ObsHistory, PrivilegedState};

/// R1 gradient-penalty coefficient on expert discriminator inputs.
const GP_COEFF: f64 = 10.0;
/// Max buffer frames handed to the latent sampler's backward component.
const SAMPLER_FRAME_CAP: usize = 4096;
/// Stored regularization rewards are clipped below this floor; unbounded
/// soft-limit penalties otherwise blow up the Q_R targets early in training.
const AUX_REWARD_FLOOR: f64 = -10.0;
/// Consecutive non-finite update rounds tolerated before aborting.
const DIVERGENCE_PATIENCE: u32 = 3;

pub const METRIC_COLUMNS: [&str; 9] = [
    "step", "loss_d", "loss_fb", "loss_qd", "loss_qr", "loss_pi", "emd_mean", "mpjpe_mean",
    "wall_clock",
];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("training diverged: loss `{loss}` non-finite for {DIVERGENCE_PATIENCE} consecutive rounds, last at round {round}")]
    Diverged { loss: String, round: u64 },
    #[error("train io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad train state: {0}")]
    BadState(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Fb(#[from] FbError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Parallel environment count.
    pub n_env: usize,
    /// Episode length T.
    pub t: usize,
    /// Observation-history length H.
    pub h: usize,
    pub n_batch: usize,
    /// Update rounds per environment iteration (UTD).
    pub n_ups: usize,
    /// Total gradient rounds for the run.
    pub n_grad_total: u64,
    /// Evaluation/priority-refresh cadence in env steps; 0 = 20 evals total.
    pub n_eval_every: u64,
    pub gamma: f64,
    /// Random-policy buffer-seeding env steps; 0 = 10·n_env iterations.
    pub seeding_steps: u64,
    pub fall_init_prob: f64,
    pub lr_f: f64,
    pub lr_b: f64,
    pub lr_d: f64,
    pub lr_pi: f64,
    pub lr_qd: f64,
    pub lr_qr: f64,
    pub alpha_d: f64,
    pub alpha_r: f64,
    pub ortho_coeff: f64,
    pub t_seq: usize,
    pub tau_polyak: f64,
    /// Buffer capacity = buffer_mult · n_env · t.
    pub buffer_mult: usize,
    /// Motion chunk length for expert sampling and priority refresh.
    pub chunk_len: usize,
    /// Deterministic mode: wall-clock logged as 0 so logs compare bitwise.
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_env: 16,
            t: 200,
            h: 4,
            n_batch: 256,
            n_ups: 2,
            n_grad_total: 2000,
            n_eval_every: 0,
            gamma: 0.98,
            seeding_steps: 0,
            fall_init_prob: 0.3,
            lr_f: 3e-4,
            lr_b: 1e-5,
            lr_d: 1e-5,
            lr_pi: 3e-4,
            lr_qd: 3e-4,
            lr_qr: 3e-4,
            alpha_d: 0.05,
            alpha_r: 0.02,
            ortho_coeff: 100.0,
            t_seq: 8,
            tau_polyak: 0.005,
            buffer_mult: 64,
            chunk_len: 64,
            deterministic: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positives = [
            ("n_env", self.n_env),
            ("t", self.t),
            ("n_batch", self.n_batch),
            ("n_ups", self.n_ups),
            ("t_seq", self.t_seq),
            ("buffer_mult", self.buffer_mult),
            ("chunk_len", self.chunk_len),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.n_grad_total == 0 {
            return Err(TrainError::BadConfig("n_grad_total must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TrainError::BadConfig("gamma must lie in (0, 1)".into()));
        }
        let rates = [
            ("lr_f", self.lr_f),
            ("lr_b", self.lr_b),
            ("lr_d", self.lr_d),
            ("lr_pi", self.lr_pi),
            ("lr_qd", self.lr_qd),
            ("lr_qr", self.lr_qr),
            ("tau_polyak", self.tau_polyak),
            ("ortho_coeff", self.ortho_coeff),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.n_batch < 2 {
            return Err(TrainError::BadConfig("n_batch must be >= 2".into()));
        }
        if self.t_seq > self.chunk_len {
            return Err(TrainError::BadConfig("t_seq must not exceed chunk_len".into()));
        }
        Ok(())
    }

    pub fn buffer_capacity(&self) -> usize {
        self.buffer_mult * self.n_env * self.t
    }

    fn seeding_iterations(&self) -> u64 {
        let steps = if self.seeding_steps == 0 { 10 * self.n_env as u64 } else { self.seeding_steps };
        steps.div_ceil(self.n_env as u64)
    }

    /// Evaluation cadence in environment iterations.
    fn eval_every_iters(&self) -> u64 {
        let total_iters = (self.n_grad_total / self.n_ups as u64).max(1);
        let steps = if self.n_eval_every == 0 {
            (total_iters * self.n_env as u64 / 20).max(1)
        } else {
            self.n_eval_every
        };
        (steps / self.n_env as u64).max(1)
    }

    /// Env config with trainer-owned episode shape applied.
    pub fn resolve_env(&self, base: &EnvConfig) -> EnvConfig {
        let mut env = base.clone();
        env.episode_len = self.t;
        env.history_len = self.h;
        env.fall_init_prob = self.fall_init_prob;
        env
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transition {
    pub obs_hist: Vec<f64>,
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs_hist: Vec<f64>,
    pub next_state: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub z: Vec<f64>,
    pub aux_reward: f64,
}

/// Fixed-capacity ring buffer with FIFO eviction and uniform sampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ReplayBuffer { capacity, data: Vec::new(), next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform i.i.d. sample with replacement; future pairs come from an
    /// independent second uniform pass.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<TrainBatch, TrainError> {
        if self.data.is_empty() {
            return Err(TrainError::EmptyBuffer);
        }
        let pick = |rng: &mut ChaCha8Rng| &self.data[rng.random_range(0..self.data.len())];
        let rows: Vec<&Transition> = (0..n).map(|_| pick(rng)).collect();
        let futures: Vec<&Transition> = (0..n).map(|_| pick(rng)).collect();
        let stack = |f: &dyn Fn(&Transition) -> &[f64], cols: usize, items: &[&Transition]| {
            let mut data = Vec::with_capacity(n * cols);
            for t in items {
                data.extend_from_slice(f(t));
            }
            Tensor::new(n, cols, data)
        };
        let proto = &self.data[0];
        Ok(TrainBatch {
            obs_hist: stack(&|t| &t.obs_hist, proto.obs_hist.len(), &rows),
            state: stack(&|t| &t.state, proto.state.len(), &rows),
            obs: stack(&|t| &t.obs, proto.obs.len(), &rows),
            action: stack(&|t| &t.action, proto.action.len(), &rows),
            next_obs_hist: stack(&|t| &t.next_obs_hist, proto.next_obs_hist.len(), &rows),
            next_state: stack(&|t| &t.next_state, proto.next_state.len(), &rows),
            next_obs: stack(&|t| &t.next_obs, proto.next_obs.len(), &rows),
            z: stack(&|t| &t.z, proto.z.len(), &rows),
            aux_reward: Tensor::new(n, 1, rows.iter().map(|t| t.aux_reward).collect()),
            future_state: stack(&|t| &t.state, proto.state.len(), &futures),
            future_obs: stack(&|t| &t.obs, proto.obs.len(), &futures),
        })
    }

    /// Random subset of stored (state, obs) frames for the latent sampler.
    pub fn sampler_frames(&self, cap: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let k = self.data.len().min(cap);
        let mut s = Vec::with_capacity(k * self.data[0].state.len());
        let mut o = Vec::with_capacity(k * self.data[0].obs.len());
        for _ in 0..k {
            let t = &self.data[rng.random_range(0..self.data.len())];
            s.extend_from_slice(&t.state);
            o.extend_from_slice(&t.obs);
        }
        (
            Tensor::new(k, self.data[0].state.len(), s),
            Tensor::new(k, self.data[0].obs.len(), o),
        )
    }
}

/// App-B exponential prioritization: p(m) ∝ 2^{clamp(EMD, 0.5, 2)·4},
/// normalized to sum 1.
pub fn update_motion_priorities(tracking_emds: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> =
        tracking_emds.iter().map(|&e| 2f64.powf(e.clamp(0.5, 2.0) * 4.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|&w| w / total).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnvSlot {
    state: PrivilegedState,
    hist: ObsHistory,
    t: usize,
    z: LatentVector,
}

/// Serializable full optimizer state for bitwise resume.
#[derive(Serialize, Deserialize)]
pub struct TrainState {
    pub schema: u32,
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub env_cfg: EnvConfig,
    pub sampler: LatentSamplerConfig,
    pub config_hash: String,
    params: Vec<(String, usize, usize, Vec<f64>)>,
    adam: Vec<(String, usize, usize, Vec<f64>, Vec<f64>, u64)>,
    buffer: ReplayBuffer,
    envs: Vec<EnvSlot>,
    rng: ChaCha8Rng,
    priorities: Vec<f64>,
    metrics_csv: String,
    env_steps: u64,
    rounds_done: u64,
    iters_done: u64,
    nonfinite_streak: u32,
    seeded: bool,
}

pub struct Trainer {
    pub model: Model,
    adam: Adam,
    buffer: ReplayBuffer,
    envs: Vec<EnvSlot>,
    rng: ChaCha8Rng,
    /// Chunked motion dataset with live priorities.
    pub motions: MotionSet,
    pub env_cfg: EnvConfig,
    pub cfg: TrainConfig,
    model_cfg: ModelConfig,
    base_env_cfg: EnvConfig,
    sampler: LatentSamplerConfig,
    pub config_hash: String,
    pub metrics: CsvLog,
    pub env_steps: u64,
    pub rounds_done: u64,
    iters_done: u64,
    nonfinite_streak: u32,
    seeded: bool,
    started: Instant,
}

/// Gradients of `loss` w.r.t. every touched leaf under `prefixes`, as plain
/// tensors so the parameter borrow can end before the optimizer steps.
fn collect_grads(
    gp: &GraphParams,
    loss: &crate::autodiff::Var,
    prefixes: &[&str],
) -> Vec<(String, Tensor)> {
    let leaves = gp.named_leaves(prefixes);
    let vars: Vec<&crate::autodiff::Var> = leaves.iter().map(|(_, v)| v).collect();
    let gs = grad(loss, &vars);
    leaves.iter().zip(gs).map(|((n, _), g)| (n.clone(), g.value().clone())).collect()
}

fn reset_slot(
    env_cfg: &EnvConfig,
    motions: &MotionSet,
    rng: &mut ChaCha8Rng,
) -> Result<(PrivilegedState, ObsHistory), TrainError> {
    let fall: f64 = rng.random_range(0.0..1.0);
    if fall < env_cfg.fall_init_prob {
        Ok(toyenv::reset(env_cfg, InitSource::Fall, rng)?)
    } else {
        let (mi, fi) = sample_frame_indices(motions, rng)?;
        let m = &motions.motions()[mi];
        Ok(toyenv::reset(env_cfg, InitSource::MotionFrame(m, fi), rng)?)
    }
}

impl Trainer {
    pub fn new(
        base_env_cfg: &EnvConfig,
        motions: &MotionSet,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        sampler: &LatentSamplerConfig,
        config_hash: &str,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        sampler.validate()?;
        if motions.is_empty() {
            return Err(TrainError::BadConfig("motion dataset is empty".into()));
        }
        let env_cfg = cfg.resolve_env(base_env_cfg);
        env_cfg.validate()?;
        let chunked = chunk_motions(motions, cfg.chunk_len)?;
        if chunked.motions().iter().all(|m| m.len() < cfg.t_seq) {
            return Err(TrainError::BadConfig(format!(
                "no motion chunk is at least t_seq = {} frames long",
                cfg.t_seq
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dims = ModelDims {
            obs_dim: toyenv::OBS_DIM,
            act_dim: toyenv::ACT_DIM,
            s_dim: toyenv::PRIV_DIM,
            hist_dim: env_cfg.history_dim(),
            latent_dim: model_cfg.latent_dim,
        };
        let model = Model::new(dims, model_cfg, &mut rng);
        let mut envs = Vec::with_capacity(cfg.n_env);
        for _ in 0..cfg.n_env {
            let (state, hist) = reset_slot(&env_cfg, &chunked, &mut rng)?;
            let z = uniform_sphere(dims.latent_dim, &mut rng);
            envs.push(EnvSlot { state, hist, t: 0, z });
        }
        Ok(Trainer {
            model,
            adam: Adam::new(),
            buffer: ReplayBuffer::new(cfg.buffer_capacity()),
            envs,
            rng,
            motions: chunked,
            env_cfg,
            cfg: *cfg,
            model_cfg: *model_cfg,
            base_env_cfg: base_env_cfg.clone(),
            sampler: *sampler,
            config_hash: config_hash.to_string(),
            metrics: CsvLog::new(&METRIC_COLUMNS),
            env_steps: 0,
            rounds_done: 0,
            iters_done: 0,
            nonfinite_streak: 0,
            seeded: false,
            started: Instant::now(),
        })
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    fn wall_clock(&self) -> f64 {
        if self.cfg.deterministic { 0.0 } else { self.started.elapsed().as_secs_f64() }
    }

    /// Step every env once; `random_policy` takes uniform actions (seeding).
    fn step_envs(&mut self, random_policy: bool) -> Result<(), TrainError> {
        let n = self.envs.len();
        let actions: Tensor = if random_policy {
            Tensor::new(
                n,
                toyenv::ACT_DIM,
                (0..n * toyenv::ACT_DIM).map(|_| self.rng.random_range(-1.0..1.0)).collect(),
            )
        } else {
            let hist = Tensor::from_rows(
                &self.envs.iter().map(|e| e.hist.as_slice().to_vec()).collect::<Vec<_>>(),
            );
            let z = Tensor::from_rows(
                &self.envs.iter().map(|e| e.z.as_slice().to_vec()).collect::<Vec<_>>(),
            );
            policy_act(&self.model, &hist, &z, ActMode::Sample, &mut self.rng)?
        };
        let mut resets = Vec::new();
        for i in 0..n {
            let a = [actions.get(i, 0), actions.get(i, 1)];
            let slot = &mut self.envs[i];
            let obs_hist = slot.hist.as_slice().to_vec();
            let state = slot.state.features();
            let obs = slot.hist.current().to_vec();
            let (next_state, next_obs, aux) =
                toyenv::step(&slot.state, a, &self.env_cfg, &mut self.rng)?;
            slot.hist.advance(a, &next_obs);
            self.buffer.push(Transition {
                obs_hist,
                state,
                obs,
                action: a.to_vec(),
                next_obs_hist: slot.hist.as_slice().to_vec(),
                next_state: next_state.features(),
                next_obs: next_obs.to_vec(),
                z: slot.z.as_slice().to_vec(),
                aux_reward: aux.total().max(AUX_REWARD_FLOOR),
            });
            slot.state = next_state;
            slot.t += 1;
            if slot.t >= self.cfg.t {
                resets.push(i);
            }
        }
        if !resets.is_empty() {
            // Fresh episode: new DR draw, new init, new latent from ν.
            let frames = self.buffer.sampler_frames(SAMPLER_FRAME_CAP, &mut self.rng);
            let zs = sample_latents(
                &self.model,
                &self.sampler,
                Some((&frames.0, &frames.1)),
                Some(&self.motions),
                self.cfg.t_seq,
                resets.len(),
                &mut self.rng,
            )?;
            for (&i, z) in resets.iter().zip(zs) {
                let (state, hist) = reset_slot(&self.env_cfg, &self.motions, &mut self.rng)?;
                self.envs[i] = EnvSlot { state, hist, t: 0, z };
            }
        }
        self.env_steps += n as u64;
        Ok(())
    }

    fn lr_for(&self, name: &str) -> f64 {
        let prefix = name.split('.').next().unwrap_or("");
        match prefix {
            "f" => self.cfg.lr_f,
            "b" => self.cfg.lr_b,
            "d" => self.cfg.lr_d,
            "pi" => self.cfg.lr_pi,
            "qd" => self.cfg.lr_qd,
            "qr" => self.cfg.lr_qr,
            other => panic!("no learning rate for prefix `{other}`"),
        }
    }

    fn apply_grads(&mut self, grads: Vec<(String, Tensor)>) -> Result<(), TrainError> {
        for (name, g) in grads {
            let lr = self.lr_for(&name);
            self.adam.step(&mut self.model.store, &name, &g, lr)?;
        }
        Ok(())
    }

    fn sample_expert_batch(&mut self) -> Result<ExpertBatch, TrainError> {
        let t_seq = self.cfg.t_seq;
        let n_seqs = (self.cfg.n_batch / t_seq).max(1);
        let mut s = Vec::new();
        let mut o = Vec::new();
        let mut got = 0;
        let mut attempts = 0;
        while got < n_seqs {
            let (mi, fi) = sample_frame_indices(&self.motions, &mut self.rng)?;
            let m = &self.motions.motions()[mi];
            attempts += 1;
            if m.len() < t_seq {
                if attempts > 100 * n_seqs {
                    return Err(TrainError::BadConfig(
                        "could not draw expert windows of length t_seq".into(),
                    ));
                }
                continue;
            }
            let start = fi.min(m.len() - t_seq);
            for f in &m.frames[start..start + t_seq] {
                s.push(f.state.features());
                o.push(f.obs.to_vec());
            }
            got += 1;
        }
        Ok(ExpertBatch {
            state: Tensor::from_rows(&s),
            obs: Tensor::from_rows(&o),
            t_seq,
        })
    }

    /// One gradient round: D → FB → Q_D → Q_R → π, then Polyak targets.
    fn update_round(&mut self) -> Result<(), TrainError> {
        let batch = self.buffer.sample(self.cfg.n_batch, &mut self.rng)?;
        let expert = self.sample_expert_batch()?;
        let mut losses: Vec<(&'static str, f64)> = Vec::with_capacity(5);

        // Discriminator.
        let grads = {
            let gp = GraphParams::new(&self.model.store);
            let (loss, parts) = discriminator_loss(&self.model, &gp, &expert, &batch, GP_COEFF)?;
            losses.push(("loss_d", parts.total));
            collect_grads(&gp, &loss, &[NET_D])
        };
        self.apply_grads(grads)?;

        // One next action from the current policy, shared by the TD losses.
        let next_action =
            policy_act(&self.model, &batch.next_obs_hist, &batch.z, ActMode::Sample, &mut self.rng)?;

        // Forward-backward pair.
        let grads = {
            let gp = GraphParams::new(&self.model.store);
            let (loss, parts) =
                fb_loss(&self.model, &gp, &batch, &next_action, self.cfg.gamma, self.cfg.ortho_coeff)?;
            losses.push(("loss_fb", parts.total));
            collect_grads(&gp, &loss, &[NET_F, NET_B])
        };
        self.apply_grads(grads)?;

        // Style critic on discriminator rewards at the arrived-at state.
        let grads = {
            let d = disc_values(&self.model, &batch.next_state, &batch.next_obs, &batch.z)?;
            let reward = disc_reward_batch(&d);
            let gp = GraphParams::new(&self.model.store);
            let loss =
                critic_loss(&self.model, &gp, CriticKind::Style, &batch, &reward, &next_action, self.cfg.gamma)?;
            losses.push(("loss_qd", loss.value().item()));
            collect_grads(&gp, &loss, &[NET_QD])
        };
        self.apply_grads(grads)?;

        // Regularization critic on stored auxiliary rewards.
        let grads = {
            let gp = GraphParams::new(&self.model.store);
            let loss = critic_loss(
                &self.model,
                &gp,
                CriticKind::Regularization,
                &batch,
                &batch.aux_reward,
                &next_action,
                self.cfg.gamma,
            )?;
            losses.push(("loss_qr", loss.value().item()));
            collect_grads(&gp, &loss, &[NET_QR])
        };
        self.apply_grads(grads)?;

        // Actor.
        let eps = standard_normal(&mut self.rng, batch.n(), self.model.dims.act_dim);
        let grads = {
            let gp = GraphParams::new(&self.model.store);
            let loss =
                actor_loss(&self.model, &gp, &batch, &eps, self.cfg.alpha_d, self.cfg.alpha_r)?;
            losses.push(("loss_pi", loss.value().item()));
            collect_grads(&gp, &loss, &[NET_PI])
        };
        self.apply_grads(grads)?;

        for (target, online) in TARGET_PAIRS {
            polyak_update(&mut self.model.store, target, online, self.cfg.tau_polyak);
        }

        self.rounds_done += 1;
        if let Some((name, _)) = losses.iter().find(|(_, v)| !v.is_finite()) {
            self.nonfinite_streak += 1;
            if self.nonfinite_streak >= DIVERGENCE_PATIENCE {
                return Err(TrainError::Diverged {
                    loss: name.to_string(),
                    round: self.rounds_done,
                });
            }
        } else {
            self.nonfinite_streak = 0;
        }
        let row = vec![
            self.env_steps as f64,
            losses[0].1,
            losses[1].1,
            losses[2].1,
            losses[3].1,
            losses[4].1,
            f64::NAN,
            f64::NAN,
            self.wall_clock(),
        ];
        self.metrics.push(row)?;
        Ok(())
    }

    /// Zero-shot tracking over every motion chunk on nominal dynamics:
    /// returns (per-chunk EMDs, per-chunk E_mpjpe) and refreshes priorities.
    pub fn evaluate_tracking(&mut self) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let nominal = self.env_cfg.nominal();
        let mut emds = Vec::with_capacity(self.motions.len());
        let mut mpjpes = Vec::with_capacity(self.motions.len());
        for mi in 0..self.motions.len() {
            let motion = &self.motions.motions()[mi];
            let steps = motion.len() - 1;
            let zs = tracking_embeddings(
                &self.model,
                &TrackingPrompt { motion, lookahead: self.cfg.t_seq },
            )?;
            let recs = rollout_batch(
                &self.model,
                &nominal,
                &[InitSource::MotionFrame(motion, 0)],
                &[zs],
                steps,
                ActMode::Mean,
                &mut self.rng,
            )?;
            let rollout_points = recs[0].pose_velocity_points();
            let motion_points: Vec<Vec<f64>> = motion
                .frames
                .iter()
                .map(|f| {
                    vec![f.state.pose[0], f.state.pose[1], f.state.velocity[0], f.state.velocity[1]]
                })
                .collect();
            emds.push(evaluation::emd(&rollout_points, &motion_points, &mut self.rng)?);
            let ref_poses: Vec<Vec<f64>> =
                motion.frames.iter().map(|f| f.state.pose.to_vec()).collect();
            mpjpes.push(evaluation::mpjpe(
                &recs[0].poses(),
                &evaluation::MpjpeRef::Motion(&ref_poses),
            )?);
        }
        self.motions.set_priorities(update_motion_priorities(&emds))?;
        Ok((emds, mpjpes))
    }

    fn eval_and_log(&mut self) -> Result<(), TrainError> {
        let (emds, mpjpes) = self.evaluate_tracking()?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let row = vec![
            self.env_steps as f64,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            mean(&emds),
            mean(&mpjpes),
            self.wall_clock(),
        ];
        self.metrics.push(row)?;
        Ok(())
    }

    fn write_artifacts(&self, out_dir: &Path, label: &str) -> Result<(), TrainError> {
        std::fs::create_dir_all(out_dir)?;
        self.metrics.write(&out_dir.join("metrics.csv"))?;
        checkpoint::save(
            &out_dir.join(format!("{label}.fbz")),
            &self.model.store,
            &self.config_hash,
            self.env_steps,
        )?;
        Ok(())
    }

    /// Run until `self.rounds_done == target_rounds` (capped at the config's
    /// total), with seeding, eval cadence and checkpointing handled inline.
    pub fn advance(&mut self, target_rounds: u64, out_dir: Option<&Path>) -> Result<(), TrainError> {
        let target = target_rounds.min(self.cfg.n_grad_total);
        if !self.seeded {
            for _ in 0..self.cfg.seeding_iterations() {
                self.step_envs(true)?;
            }
            self.seeded = true;
        }
        let eval_every = self.cfg.eval_every_iters();
        while self.rounds_done < target {
            self.step_envs(false)?;
            self.iters_done += 1;
            for _ in 0..self.cfg.n_ups {
                if self.rounds_done >= self.cfg.n_grad_total {
                    break;
                }
                self.update_round()?;
            }
            if self.iters_done % eval_every == 0 {
                self.eval_and_log()?;
                if let Some(dir) = out_dir {
                    self.write_artifacts(dir, &format!("ckpt_{:08}", self.env_steps))?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<(), TrainError> {
        self.advance(self.cfg.n_grad_total, out_dir)?;
        if let Some(dir) = out_dir {
            self.write_artifacts(dir, "final")?;
        }
        Ok(())
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            schema: 1,
            cfg: self.cfg,
            model_cfg: self.model_cfg,
            env_cfg: self.base_env_cfg.clone(),
            sampler: self.sampler,
            config_hash: self.config_hash.clone(),
            params: self
                .model
                .store
                .iter()
                .map(|(n, t)| (n.clone(), t.rows(), t.cols(), t.data().to_vec()))
                .collect(),
            adam: self
                .adam
                .states()
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        s.m.rows(),
                        s.m.cols(),
                        s.m.data().to_vec(),
                        s.v.data().to_vec(),
                        s.t,
                    )
                })
                .collect(),
            buffer: self.buffer.clone(),
            envs: self.envs.clone(),
            rng: self.rng.clone(),
            priorities: self.motions.priorities().to_vec(),
            metrics_csv: self.metrics.to_csv(),
            env_steps: self.env_steps,
            rounds_done: self.rounds_done,
            iters_done: self.iters_done,
            nonfinite_streak: self.nonfinite_streak,
            seeded: self.seeded,
        }
    }

    /// Rebuild a trainer mid-run; `motions` must be the same dataset the
    /// original run was given.
    pub fn from_state(state: TrainState, motions: &MotionSet) -> Result<Self, TrainError> {
        let mut t = Trainer::new(
            &state.env_cfg,
            motions,
            &state.model_cfg,
            &state.cfg,
            &state.sampler,
            &state.config_hash,
        )?;
        if state.schema != 1 {
            return Err(TrainError::BadState(format!("unknown state schema {}", state.schema)));
        }
        for (name, rows, cols, data) in state.params {
            t.model
                .store
                .set(&name, Tensor::new(rows, cols, data))
                .map_err(|e| TrainError::BadState(e.to_string()))?;
        }
        let mut adam = Adam::new();
        for (name, rows, cols, m, v, steps) in state.adam {
            adam.restore_state(
                &name,
                AdamState { m: Tensor::new(rows, cols, m), v: Tensor::new(rows, cols, v), t: steps },
            );
        }
        t.adam = adam;
        t.buffer = state.buffer;
        t.envs = state.envs;
        t.rng = state.rng;
        t.motions
            .set_priorities(state.priorities)
            .map_err(|e| TrainError::BadState(e.to_string()))?;
        t.metrics = CsvLog::parse(&state.metrics_csv)?;
        t.env_steps = state.env_steps;
        t.rounds_done = state.rounds_done;
        t.iters_done = state.iters_done;
        t.nonfinite_streak = state.nonfinite_streak;
        t.seeded = state.seeded;
        Ok(t)
    }
}

/// Algorithm-1 pre-training end to end; returns the trainer in its final
/// state (model, metrics log, refreshed priorities).
pub fn run_pretraining(
    env_cfg: &EnvConfig,
    motions: &MotionSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sampler: &LatentSamplerConfig,
    config_hash: &str,
    out_dir: Option<&Path>,
) -> Result<Trainer, TrainError> {
    let mut trainer = Trainer::new(env_cfg, motions, model_cfg, cfg, sampler, config_hash)?;
    trainer.run(out_dir)?;
    Ok(trainer)
}
