//! Forward-backward core: loss functions and latent-space primitives.
//!
//! Houses the FB temporal-difference loss with orthonormality and z-alignment
//! terms, the latent-conditioned discriminator loss with gradient penalty,
//! the style and regularization critic losses, the actor loss, trajectory
//! encoding, and the latent sampling mixture ν.
//!
//! Everything operates on a [`Model`]: a named parameter store plus the
//! architecture of each network. Input conventions, used consistently
//! everywhere:
//! - `x = (o_H, s)`: observation-action history window concatenated with the
//!   privileged state;
//! - F and the critics see `(x, a, z)`; the policy sees `(o_H, z)`;
//! - B and the discriminator see the current frame `(s, o)` (plus `z` for
//!   the discriminator), never the history.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Var, grad};
use crate::motions::MotionSet;
use crate::nets::{ArchSpec, GraphParams, NetError, ParamStore, forward_ensemble, forward_member, forward_inference, init_network};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FbError {
    #[error("uninformative latent: norm {norm:.3e} below 1e-8")]
    UninformativeLatent { norm: f64 },
    #[error("batch too small: n = {n}, the FB loss needs n >= 2")]
    BatchTooSmall { n: usize },
    #[error("latent sampler weights must be nonnegative and sum to 1")]
    BadMixWeights,
    #[error("empty frame sequence")]
    EmptySequence,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// A task/behavior latent on the √d-sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    z: Vec<f64>,
}

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn to_row(&self) -> Tensor {
        Tensor::row(&self.z)
    }

    pub fn norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Rescale a raw vector onto the √d-sphere, preserving direction.
pub fn project_sphere(z_raw: &[f64]) -> Result<LatentVector, FbError> {
    let d = z_raw.len();
    let norm = z_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-8) {
        return Err(FbError::UninformativeLatent { norm });
    }
    let scale = (d as f64).sqrt() / norm;
    Ok(LatentVector { z: z_raw.iter().map(|v| v * scale).collect() })
}

/// Stack latents into an `[n, d]` tensor.
pub fn latents_to_tensor(latents: &[LatentVector]) -> Tensor {
    Tensor::from_rows(&latents.iter().map(|l| l.z.clone()).collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub s_dim: usize,
    pub hist_dim: usize,
    pub latent_dim: usize,
}

impl ModelDims {
    pub fn f_input(&self) -> usize {
        self.hist_dim + self.s_dim + self.act_dim + self.latent_dim
    }

    pub fn b_input(&self) -> usize {
        self.s_dim + self.obs_dim
    }

    pub fn pi_input(&self) -> usize {
        self.hist_dim + self.latent_dim
    }

    pub fn d_input(&self) -> usize {
        self.s_dim + self.obs_dim + self.latent_dim
    }
}

/// Width/depth knobs for the network family.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Residual-trunk width for F, the policy and the critics.
    pub hidden: usize,
    /// Width of the single-hidden-layer B MLP.
    pub b_hidden: usize,
    /// Width of the two-hidden-layer discriminator MLP.
    pub disc_hidden: usize,
    /// F and critic ensemble size.
    pub ensemble: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { latent_dim: 32, hidden: 128, b_hidden: 256, disc_hidden: 256, ensemble: 2 }
    }
}

/// Online network prefixes and their target twins inside the parameter store.
pub const NET_F: &str = "f";
pub const NET_B: &str = "b";
pub const NET_PI: &str = "pi";
pub const NET_D: &str = "d";
pub const NET_QD: &str = "qd";
pub const NET_QR: &str = "qr";
pub const TARGET_F: &str = "tf";
pub const TARGET_B: &str = "tb";
pub const TARGET_QD: &str = "tqd";
pub const TARGET_QR: &str = "tqr";

/// Pairs of (target, online) prefixes for Polyak updates.
pub const TARGET_PAIRS: [(&str, &str); 4] =
    [(TARGET_F, NET_F), (TARGET_B, NET_B), (TARGET_QD, NET_QD), (TARGET_QR, NET_QR)];

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub dims: ModelDims,
    pub arch_f: ArchSpec,
    pub arch_b: ArchSpec,
    pub arch_pi: ArchSpec,
    pub arch_d: ArchSpec,
    pub arch_q: ArchSpec,
}

impl Model {
    pub fn new(dims: ModelDims, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let arch_f = ArchSpec::residual(dims.f_input(), dims.latent_dim, cfg.hidden, cfg.ensemble);
        let arch_b = ArchSpec {
            sphere_head: true,
            ..ArchSpec::mlp(dims.b_input(), dims.latent_dim, cfg.b_hidden, 1)
        };
        let arch_pi = ArchSpec::residual(dims.pi_input(), 2 * dims.act_dim, cfg.hidden, 1);
        let arch_d = ArchSpec::mlp(dims.d_input(), 1, cfg.disc_hidden, 2);
        let arch_q = ArchSpec::residual(dims.f_input(), 1, cfg.hidden, cfg.ensemble);
        Model::with_arches(dims, arch_f, arch_b, arch_pi, arch_d, arch_q, rng)
    }

    /// Custom architectures; also used by tests to build degenerate networks.
    pub fn with_arches(
        dims: ModelDims,
        arch_f: ArchSpec,
        arch_b: ArchSpec,
        arch_pi: ArchSpec,
        arch_d: ArchSpec,
        arch_q: ArchSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        init_network(&mut store, NET_F, &arch_f, rng);
        init_network(&mut store, NET_B, &arch_b, rng);
        init_network(&mut store, NET_PI, &arch_pi, rng);
        init_network(&mut store, NET_D, &arch_d, rng);
        init_network(&mut store, NET_QD, &arch_q, rng);
        init_network(&mut store, NET_QR, &arch_q, rng);
        init_network(&mut store, TARGET_F, &arch_f, rng);
        init_network(&mut store, TARGET_B, &arch_b, rng);
        init_network(&mut store, TARGET_QD, &arch_q, rng);
        init_network(&mut store, TARGET_QR, &arch_q, rng);
        for (target, online) in TARGET_PAIRS {
            store.copy_prefix(online, target);
        }
        Model { store, dims, arch_f, arch_b, arch_pi, arch_d, arch_q }
    }

    pub fn arch_for(&self, prefix: &str) -> &ArchSpec {
        match prefix {
            NET_F | TARGET_F => &self.arch_f,
            NET_B | TARGET_B => &self.arch_b,
            NET_PI => &self.arch_pi,
            NET_D => &self.arch_d,
            NET_QD | NET_QR | TARGET_QD | TARGET_QR => &self.arch_q,
            other => panic!("unknown network prefix `{other}`"),
        }
    }

    /// B(s, o) for a batch of current frames, outside any loss graph.
    pub fn b_values(&self, state: &Tensor, obs: &Tensor) -> Result<Tensor, NetError> {
        forward_inference(&self.store, NET_B, 0, &self.arch_b, &Tensor::hcat(&[state, obs]))
    }
}

/// `[rows, cols]` of independent standard normal draws.
pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

/// Reparameterized tanh-squashed policy sample inside a loss graph. With
/// `detach_params` the action stays differentiable w.r.t. the inputs only.
pub fn policy_rsample(
    model: &Model,
    gp: &GraphParams,
    obs_hist: &Var,
    z: &Var,
    eps: &Tensor,
    detach_params: bool,
) -> Result<Var, NetError> {
    let input = Var::concat_cols(&[obs_hist.clone(), z.clone()]);
    let out = forward_member(gp, NET_PI, 0, &model.arch_pi, &input, detach_params)?;
    let a = model.dims.act_dim;
    let mean = out.slice_cols(0, a);
    let std = out.slice_cols(a, a).clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
    Ok(mean.add(&std.mul(&Var::constant(eps.clone()))).tanh())
}

/// Policy forward for rollouts and evaluation (no graph).
pub fn policy_act(
    model: &Model,
    obs_hist: &Tensor,
    z: &Tensor,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, NetError> {
    let out = forward_inference(&model.store, NET_PI, 0, &model.arch_pi, &Tensor::hcat(&[obs_hist, z]))?;
    let (n, a) = (out.rows(), model.dims.act_dim);
    let eps = match mode {
        ActMode::Sample => standard_normal(rng, n, a),
        ActMode::Mean => Tensor::zeros(n, a),
    };
    let mut act = Tensor::zeros(n, a);
    {
        let data = act.data_mut();
        for r in 0..n {
            for c in 0..a {
                let mean = out.get(r, c);
                let std = out.get(r, a + c).clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
                data[r * a + c] = (mean + std * eps.get(r, c)).tanh();
            }
        }
    }
    Ok(act)
}

/// One training batch of transitions plus independent "future" frames used
/// to estimate Σ_B̄.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub obs_hist: Tensor,
    pub state: Tensor,
    pub obs: Tensor,
    pub action: Tensor,
    pub next_obs_hist: Tensor,
    pub next_state: Tensor,
    pub next_obs: Tensor,
    pub z: Tensor,
    /// Σ_k r_aux_k at the next state, `[n, 1]`.
    pub aux_reward: Tensor,
    pub future_state: Tensor,
    pub future_obs: Tensor,
}

impl TrainBatch {
    pub fn n(&self) -> usize {
        self.state.rows()
    }

    pub fn check(&self) -> Result<(), FbError> {
        if self.n() < 2 {
            return Err(FbError::BatchTooSmall { n: self.n() });
        }
        Ok(())
    }
}

fn offdiag_mask(n: usize) -> Tensor {
    let mut m = Tensor::ones(n, n);
    {
        let d = m.data_mut();
        for i in 0..n {
            d[i * n + i] = 0.0;
        }
    }
    m
}

/// Row-wise selection of the target-F member with the smaller F̄ᵀz (the
/// pessimistic forward embedding). Gradient-free: all inputs are targets.
fn select_target_f(members: &[Var], z: &Var) -> Var {
    if members.len() == 1 {
        return members[0].detach();
    }
    let q0 = members[0].row_dot(z).value().clone();
    let q1 = members[1].row_dot(z).value().clone();
    let n = q0.rows();
    let mut mask = Tensor::zeros(n, 1);
    {
        let d = mask.data_mut();
        for i in 0..n {
            d[i] = if q0.get(i, 0) <= q1.get(i, 0) { 1.0 } else { 0.0 };
        }
    }
    let m = Var::constant(mask);
    let one_minus = m.neg().add_scalar(1.0);
    members[0].mul(&m).add(&members[1].mul(&one_minus)).detach()
}

/// Per-term values of the FB loss, for logging and tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct FbLossParts {
    pub total: f64,
    pub td_offdiag: f64,
    pub td_attract: f64,
    pub ortho_pair: f64,
    pub ortho_trace: f64,
    pub z_align: f64,
}

/// FB temporal-difference loss with orthonormality and z-alignment terms.
///
/// `next_action` must be sampled from the current policy at `(o'_H, z)`.
/// The orthonormality pair and trace terms are multiplied by `ortho_coeff`;
/// every overlined quantity uses the target networks with stop-gradient.
pub fn fb_loss(
    model: &Model,
    gp: &GraphParams,
    batch: &TrainBatch,
    next_action: &Tensor,
    gamma: f64,
    ortho_coeff: f64,
) -> Result<(Var, FbLossParts), FbError> {
    batch.check()?;
    let n = batch.n();
    let nf = n as f64;
    let pair_norm = 1.0 / (2.0 * nf * (nf - 1.0));

    let f_in = Var::constant(Tensor::hcat(&[&batch.obs_hist, &batch.state, &batch.action, &batch.z]));
    let f_next_in =
        Var::constant(Tensor::hcat(&[&batch.next_obs_hist, &batch.next_state, next_action, &batch.z]));
    let b_next_in = Var::constant(Tensor::hcat(&[&batch.next_state, &batch.next_obs]));
    let b_future_in = Var::constant(Tensor::hcat(&[&batch.future_state, &batch.future_obs]));
    let z = Var::constant(batch.z.clone());

    let b_next = forward_member(gp, NET_B, 0, &model.arch_b, &b_next_in, false)?;
    let tb_next = forward_member(gp, TARGET_B, 0, &model.arch_b, &b_next_in, true)?.detach();
    let tb_future = forward_member(gp, TARGET_B, 0, &model.arch_b, &b_future_in, true)?.detach();

    // Σ_B̄ = (1/n) Σ B̄(s⁺,o⁺) B̄(s⁺,o⁺)ᵀ, stop-gradient by construction.
    let sigma = tb_future.value().transpose().matmul(tb_future.value()).map(|v| v / nf);
    let z_sigma = Var::constant(batch.z.matmul(&sigma)); // Σ symmetric

    let f_members = forward_ensemble(gp, NET_F, &model.arch_f, &f_in, false)?;
    let tf_members = forward_ensemble(gp, TARGET_F, &model.arch_f, &f_next_in, true)?;
    let tf_sel = select_target_f(&tf_members, &z);

    let mask = Var::constant(offdiag_mask(n));
    let m_target = tf_sel.matmul(&tb_next.transpose()).detach();
    let align_target = tb_next.row_dot(&z_sigma).add(&tf_sel.row_dot(&z).scale(gamma)).detach();

    let mut td_offdiag = Var::scalar(0.0);
    let mut td_attract = Var::scalar(0.0);
    let mut z_align = Var::scalar(0.0);
    for f in &f_members {
        let m_online = f.matmul(&b_next.transpose());
        let diff = m_online.sub(&m_target.scale(gamma));
        td_offdiag = td_offdiag.add(&diff.square().mul(&mask).sum_all().scale(pair_norm));
        td_attract = td_attract.sub(&f.row_dot(&b_next).mean_all());
        z_align = z_align.add(&f.row_dot(&z).sub(&align_target).square().mean_all());
    }
    let k = f_members.len() as f64;
    td_offdiag = td_offdiag.scale(1.0 / k);
    td_attract = td_attract.scale(1.0 / k);
    z_align = z_align.scale(1.0 / k);

    let gram = b_next.matmul(&b_next.transpose());
    let ortho_pair = gram.square().mul(&mask).sum_all().scale(pair_norm);
    let ortho_trace = b_next.row_dot(&b_next).mean_all().neg();

    let total = td_offdiag
        .add(&td_attract)
        .add(&ortho_pair.add(&ortho_trace).scale(ortho_coeff))
        .add(&z_align);
    let parts = FbLossParts {
        total: total.value().item(),
        td_offdiag: td_offdiag.value().item(),
        td_attract: td_attract.value().item(),
        ortho_pair: ortho_pair.value().item(),
        ortho_trace: ortho_trace.value().item(),
        z_align: z_align.value().item(),
    };
    Ok((total, parts))
}

const D_CLAMP: f64 = 1e-6;

/// Expert frames grouped in sequences of `t_seq` consecutive frames each;
/// rows of `state`/`obs` are sequence-major.
#[derive(Clone, Debug)]
pub struct ExpertBatch {
    pub state: Tensor,
    pub obs: Tensor,
    pub t_seq: usize,
}

impl ExpertBatch {
    pub fn n_seqs(&self) -> usize {
        self.state.rows() / self.t_seq
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DiscLossParts {
    pub total: f64,
    pub expert_term: f64,
    pub agent_term: f64,
    pub grad_penalty: f64,
}

/// GAN (Jensen-Shannon) discriminator loss with an R1-style gradient penalty
/// on expert inputs. Expert frames are conditioned on the trajectory encoding
/// of their own sequence (stop-gradient); agent frames on their rollout z.
pub fn discriminator_loss(
    model: &Model,
    gp: &GraphParams,
    expert: &ExpertBatch,
    agent: &TrainBatch,
    gp_coeff: f64,
) -> Result<(Var, DiscLossParts), FbError> {
    let m = expert.n_seqs();
    assert_eq!(expert.state.rows(), m * expert.t_seq, "ragged expert batch");

    // z_τ per sequence from online B, detached, repeated across frames.
    let b_out = model.b_values(&expert.state, &expert.obs)?;
    let d = model.dims.latent_dim;
    let mut z_rows = Vec::with_capacity(m);
    for j in 0..m {
        let mut mean = vec![0.0; d];
        for t in 0..expert.t_seq {
            for (c, acc) in mean.iter_mut().enumerate() {
                *acc += b_out.get(j * expert.t_seq + t, c);
            }
        }
        for v in &mut mean {
            *v /= expert.t_seq as f64;
        }
        z_rows.push(project_sphere(&mean)?.as_slice().to_vec());
    }
    let mut z_tau = Vec::with_capacity(m * expert.t_seq);
    for row in &z_rows {
        for _ in 0..expert.t_seq {
            z_tau.push(row.clone());
        }
    }
    let z_tau = Tensor::from_rows(&z_tau);

    // Expert inputs are a differentiable leaf so ∇_{(s,o)} D exists.
    let x_expert = Var::leaf(Tensor::hcat(&[&expert.state, &expert.obs]));
    let d_in_expert = Var::concat_cols(&[x_expert.clone(), Var::constant(z_tau)]);
    let logit_e = forward_member(gp, NET_D, 0, &model.arch_d, &d_in_expert, false)?;
    let d_e = logit_e.sigmoid();
    let expert_term = d_e.clamp(D_CLAMP, 1.0 - D_CLAMP).ln().mean_all().neg();

    let d_in_agent = Var::constant(Tensor::hcat(&[&agent.state, &agent.obs, &agent.z]));
    let d_a = forward_member(gp, NET_D, 0, &model.arch_d, &d_in_agent, false)?.sigmoid();
    let agent_term = d_a.clamp(D_CLAMP, 1.0 - D_CLAMP).neg().add_scalar(1.0).ln().mean_all().neg();

    // Mean squared norm of the per-sample input gradient of D (graph-valued,
    // so its own gradient reaches the parameters via double backprop).
    let input_grad = grad(&d_e.sum_all(), &[&x_expert]).remove(0);
    let penalty = input_grad.square().sum_all().scale(1.0 / (m * expert.t_seq) as f64);

    let total = expert_term.add(&agent_term).add(&penalty.scale(gp_coeff));
    let parts = DiscLossParts {
        total: total.value().item(),
        expert_term: expert_term.value().item(),
        agent_term: agent_term.value().item(),
        grad_penalty: penalty.value().item(),
    };
    Ok((total, parts))
}

/// Discriminator reward r^D = log D − log(1−D), clipped to [−10, 10].
pub fn disc_reward(d_value: f64) -> f64 {
    let d = d_value.clamp(D_CLAMP, 1.0 - D_CLAMP);
    (d.ln() - (1.0 - d).ln()).clamp(-10.0, 10.0)
}

/// Batched discriminator reward from D values `[n, 1]`.
pub fn disc_reward_batch(d_values: &Tensor) -> Tensor {
    d_values.map(disc_reward)
}

/// Discriminator values for agent transitions, outside any graph.
pub fn disc_values(model: &Model, state: &Tensor, obs: &Tensor, z: &Tensor) -> Result<Tensor, NetError> {
    let logits = forward_inference(&model.store, NET_D, 0, &model.arch_d, &Tensor::hcat(&[state, obs, z]))?;
    Ok(logits.map(|v| sigmoid(v)))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticKind {
    Style,
    Regularization,
}

impl CriticKind {
    fn prefixes(self) -> (&'static str, &'static str) {
        match self {
            CriticKind::Style => (NET_QD, TARGET_QD),
            CriticKind::Regularization => (NET_QR, TARGET_QR),
        }
    }
}

/// Mean squared Bellman residual (Q − r − γ·Q̄')² with ensemble-min targets.
/// `next_action` must come from the current policy at `(o'_H, z)`.
pub fn critic_loss(
    model: &Model,
    gp: &GraphParams,
    kind: CriticKind,
    batch: &TrainBatch,
    reward: &Tensor,
    next_action: &Tensor,
    gamma: f64,
) -> Result<Var, FbError> {
    let (online, target) = kind.prefixes();
    let q_in = Var::constant(Tensor::hcat(&[&batch.obs_hist, &batch.state, &batch.action, &batch.z]));
    let tq_in =
        Var::constant(Tensor::hcat(&[&batch.next_obs_hist, &batch.next_state, next_action, &batch.z]));

    let tq_members = forward_ensemble(gp, target, &model.arch_q, &tq_in, true)?;
    let tq_min = tq_members.iter().skip(1).fold(tq_members[0].clone(), |acc, q| acc.minimum(q));
    let bellman_target = Var::constant(reward.clone()).add(&tq_min.scale(gamma)).detach();

    let q_members = forward_ensemble(gp, online, &model.arch_q, &q_in, false)?;
    let mut loss = Var::scalar(0.0);
    for q in &q_members {
        loss = loss.add(&q.sub(&bellman_target).square().mean_all());
    }
    Ok(loss.scale(1.0 / q_members.len() as f64))
}

/// Actor loss −mean(Fᵀz + α_D·Q_D + α_R·Q_R) with reparameterized actions;
/// gradients reach only the policy parameters.
pub fn actor_loss(
    model: &Model,
    gp: &GraphParams,
    batch: &TrainBatch,
    eps: &Tensor,
    alpha_d: f64,
    alpha_r: f64,
) -> Result<Var, FbError> {
    let obs_hist = Var::constant(batch.obs_hist.clone());
    let z = Var::constant(batch.z.clone());
    let u = policy_rsample(model, gp, &obs_hist, &z, eps, false)?;

    let input = Var::concat_cols(&[
        obs_hist.clone(),
        Var::constant(batch.state.clone()),
        u,
        z.clone(),
    ]);
    let ens_min = |prefix: &str, arch: &ArchSpec| -> Result<Var, NetError> {
        let members = forward_ensemble(gp, prefix, arch, &input, true)?;
        Ok(members.iter().skip(1).fold(members[0].clone(), |acc, m| acc.minimum(m)))
    };

    let f_members = forward_ensemble(gp, NET_F, &model.arch_f, &input, true)?;
    let fz = f_members
        .iter()
        .map(|f| f.row_dot(&z))
        .reduce(|acc, v| acc.minimum(&v))
        .expect("nonempty ensemble");
    let q_d = ens_min(NET_QD, &model.arch_q)?;
    let q_r = ens_min(NET_QR, &model.arch_q)?;

    Ok(fz.add(&q_d.scale(alpha_d)).add(&q_r.scale(alpha_r)).mean_all().neg())
}

/// z_τ: sphere projection of the frame-mean of B over a (s, o) sequence.
pub fn encode_trajectory(model: &Model, states: &Tensor, obs: &Tensor) -> Result<LatentVector, FbError> {
    if states.rows() == 0 {
        return Err(FbError::EmptySequence);
    }
    let b = model.b_values(states, obs)?;
    let d = model.dims.latent_dim;
    let mut mean = vec![0.0; d];
    for r in 0..b.rows() {
        for (c, acc) in mean.iter_mut().enumerate() {
            *acc += b.get(r, c);
        }
    }
    for v in &mut mean {
        *v /= b.rows() as f64;
    }
    project_sphere(&mean)
}

/// The latent sampling distribution ν: a mixture of uniform-sphere draws,
/// backward embeddings of buffer states, and expert trajectory encodings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatentSamplerConfig {
    pub uniform_sphere: f64,
    pub buffer_backward: f64,
    pub expert_encoding: f64,
}

impl Default for LatentSamplerConfig {
    fn default() -> Self {
        LatentSamplerConfig { uniform_sphere: 0.5, buffer_backward: 0.25, expert_encoding: 0.25 }
    }
}

impl LatentSamplerConfig {
    pub fn validate(&self) -> Result<(), FbError> {
        let w = [self.uniform_sphere, self.buffer_backward, self.expert_encoding];
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FbError::BadMixWeights);
        }
        Ok(())
    }
}

/// Uniform draw on the √d-sphere.
pub fn uniform_sphere(d: usize, rng: &mut ChaCha8Rng) -> LatentVector {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(z) = project_sphere(&g) {
            return z;
        }
    }
}

/// Draw `n` latents from ν. Empty buffer or motion components fall back to
/// the uniform-sphere component.
pub fn sample_latents(
    model: &Model,
    cfg: &LatentSamplerConfig,
    buffer_frames: Option<(&Tensor, &Tensor)>,
    motions: Option<&MotionSet>,
    t_seq: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LatentVector>, FbError> {
    cfg.validate()?;
    let d = model.dims.latent_dim;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..1.0);
        let z = if u < cfg.uniform_sphere {
            uniform_sphere(d, rng)
        } else if u < cfg.uniform_sphere + cfg.buffer_backward {
            match buffer_frames {
                Some((states, obs)) if states.rows() > 0 => {
                    let i = rng.random_range(0..states.rows());
                    let s = Tensor::row(states.row_slice(i));
                    let o = Tensor::row(obs.row_slice(i));
                    let b = model.b_values(&s, &o)?;
                    project_sphere(b.row_slice(0)).unwrap_or_else(|_| uniform_sphere(d, rng))
                }
                _ => uniform_sphere(d, rng),
            }
        } else {
            match motions {
                Some(ms) if !ms.is_empty() => {
                    let mi = rng.random_range(0..ms.len());
                    let motion = &ms.motions()[mi];
                    let t = t_seq.clamp(1, motion.len());
                    let start = rng.random_range(0..=motion.len() - t);
                    let rows: Vec<(Vec<f64>, Vec<f64>)> = motion.frames[start..start + t]
                        .iter()
                        .map(|f| (f.state.features(), f.obs.to_vec()))
                        .collect();
                    let states = Tensor::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
                    let obs = Tensor::from_rows(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
                    encode_trajectory(model, &states, &obs).unwrap_or_else(|_| uniform_sphere(d, rng))
                }
                _ => uniform_sphere(d, rng),
            }
        };
        out.push(z);
    }
    Ok(out)
}
