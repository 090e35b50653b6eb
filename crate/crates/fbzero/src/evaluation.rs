//! Metrics and the evaluation task suite.
//!
//! E_mpjpe for goal reaching and motion tracking, exact earth mover's
//! distance between small point sets (used for motion prioritization and
//! diagnostics), the named toy reward families, batched policy rollouts, and
//! checkpoint-level evaluation reports.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbcore::{ActMode, FbError, LatentVector, Model, policy_act, uniform_sphere};
use crate::inference::{InferError, RewardProbe, TrackingPrompt, reward_embedding, tracking_embeddings};
use crate::motions::MotionSet;
use crate::nets::NetError;
use crate::tensor::Tensor;
use crate::toyenv::{
    self, AuxRewardVector, EnvConfig, InitSource, ObsHistory, Observation, PrivilegedState,
    arm2_end_effector,
};

pub const REWARD_REGISTRY: [&str; 5] = ["move-dir", "stand", "reach", "raise", "hold-pose"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pose length mismatch: episode has {episode} steps, reference {reference}")]
    LengthMismatch { episode: usize, reference: usize },
    #[error("pose dimension mismatch")]
    DimMismatch,
    #[error("empty point set")]
    EmptySet,
    #[error("point sets differ in size: {a} vs {b}")]
    SizeMismatch { a: usize, b: usize },
    #[error("unknown reward `{0}`; registry: {reg}", reg = REWARD_REGISTRY.join(", "))]
    UnknownReward(String),
    #[error("reward `{name}` missing parameter `{param}`")]
    MissingParam { name: &'static str, param: &'static str },
    #[error("task `{task}`: {detail}")]
    BadTask { task: String, detail: String },
    #[error("empty task suite")]
    EmptySuite,
    #[error(transparent)]
    Env(#[from] toyenv::EnvError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Fb(#[from] FbError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Mean per-step Euclidean pose error.
pub enum MpjpeRef<'a> {
    /// Constant reference pose (goal variant).
    Goal(&'a [f64]),
    /// Per-step reference poses (tracking variant); lengths must match.
    Motion(&'a [Vec<f64>]),
}

pub fn mpjpe(episode_poses: &[Vec<f64>], reference: &MpjpeRef) -> Result<f64, EvalError> {
    if episode_poses.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let err = |a: &[f64], b: &[f64]| -> Result<f64, EvalError> {
        if a.len() != b.len() {
            return Err(EvalError::DimMismatch);
        }
        Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
    };
    let total = match reference {
        MpjpeRef::Goal(g) => episode_poses.iter().map(|q| err(q, g)).sum::<Result<f64, _>>()?,
        MpjpeRef::Motion(ref_poses) => {
            if ref_poses.len() != episode_poses.len() {
                return Err(EvalError::LengthMismatch {
                    episode: episode_poses.len(),
                    reference: ref_poses.len(),
                });
            }
            episode_poses.iter().zip(*ref_poses).map(|(q, r)| err(q, r)).sum::<Result<f64, _>>()?
        }
    };
    Ok(total / episode_poses.len() as f64)
}

/// Minimum-cost perfect assignment on a square cost matrix (shortest
/// augmenting path with potentials, O(n³)). Returns the optimal total cost.
fn assignment_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

const EMD_MAX_POINTS: usize = 64;

fn subsample<'a>(points: &'a [Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Vec<f64>> {
    // Partial Fisher-Yates over indices.
    let mut idx: Vec<usize> = (0..points.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| &points[i]).collect()
}

/// Exact earth mover's distance between equal-size point sets under the
/// Euclidean ground metric: min over matchings of the mean pairwise distance.
/// Sets larger than 64 points are subsampled uniformly.
pub fn emd(a: &[Vec<f64>], b: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySet);
    }
    if a.len() != b.len() {
        return Err(EvalError::SizeMismatch { a: a.len(), b: b.len() });
    }
    let n = a.len().min(EMD_MAX_POINTS);
    let (sa, sb): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = if a.len() > EMD_MAX_POINTS {
        (subsample(a, n, rng), subsample(b, n, rng))
    } else {
        (a.iter().collect(), b.iter().collect())
    };
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if sa[i].len() != sb[j].len() {
                return Err(EvalError::DimMismatch);
            }
            cost[i][j] =
                sa[i].iter().zip(sb[j].iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    Ok(assignment_min_cost(&cost) / n as f64)
}

fn param(v: &serde_json::Value, name: &'static str, key: &'static str) -> Result<f64, EvalError> {
    v.get(key).and_then(|x| x.as_f64()).ok_or(EvalError::MissingParam { name, param: key })
}

fn param_vec2(v: &serde_json::Value, name: &'static str, key: &'static str) -> Result<[f64; 2], EvalError> {
    let arr = v
        .get(key)
        .and_then(|x| x.as_array())
        .filter(|a| a.len() == 2)
        .ok_or(EvalError::MissingParam { name, param: key })?;
    Ok([
        arr[0].as_f64().ok_or(EvalError::MissingParam { name, param: key })?,
        arr[1].as_f64().ok_or(EvalError::MissingParam { name, param: key })?,
    ])
}

/// Named reward families over post-step states; every value lies in [0, 1].
pub fn task_reward(name: &str, params: &serde_json::Value, state: &PrivilegedState) -> Result<f64, EvalError> {
    let v = state.velocity;
    let q = state.pose;
    let r = match name {
        "move-dir" => {
            let theta = param(params, "move-dir", "theta")?;
            let v_star = param(params, "move-dir", "v_star")?;
            let along = v[0] * theta.cos() + v[1] * theta.sin();
            let across = -v[0] * theta.sin() + v[1] * theta.cos();
            (-(along - v_star).powi(2) / 0.25).exp() * (-across.powi(2) / 0.25).exp()
        }
        "stand" => (-(v[0] * v[0] + v[1] * v[1]) / 0.01).exp(),
        "reach" => {
            let p_star = param_vec2(params, "reach", "p_star")?;
            let tol = param(params, "reach", "tol")?;
            let d = ((q[0] - p_star[0]).powi(2) + (q[1] - p_star[1]).powi(2)).sqrt();
            if d < tol { 1.0 } else { 0.0 }
        }
        "raise" => {
            let h_star = param(params, "raise", "h_star")?;
            let ee = arm2_end_effector(&q);
            (1.0 - (ee[1] - h_star).abs() / 0.3).clamp(0.0, 1.0)
        }
        "hold-pose" => {
            let q_star = param_vec2(params, "hold-pose", "q_star")?;
            (-((q[0] - q_star[0]).powi(2) + (q[1] - q_star[1]).powi(2)) / 0.1).exp()
        }
        other => return Err(EvalError::UnknownReward(other.to_string())),
    };
    Ok(r)
}

/// One completed episode: `states`/`observations` include the initial frame
/// (length steps+1); `actions`/`aux` have one entry per step.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub states: Vec<PrivilegedState>,
    pub observations: Vec<Observation>,
    pub actions: Vec<[f64; 2]>,
    pub aux: Vec<AuxRewardVector>,
}

impl EpisodeRecord {
    pub fn poses(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.pose.to_vec()).collect()
    }

    /// Pose-velocity point set, one point per state.
    pub fn pose_velocity_points(&self) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .map(|s| vec![s.pose[0], s.pose[1], s.velocity[0], s.velocity[1]])
            .collect()
    }
}

/// Roll out `inits.len()` episodes in lockstep, batching the policy forward
/// pass across environments. `z_per_env[e]` is either a single latent (held
/// for the whole episode) or a per-step schedule clipped at its end.
pub fn rollout_batch(
    model: &Model,
    env_cfg: &EnvConfig,
    inits: &[InitSource],
    z_per_env: &[Vec<LatentVector>],
    steps: usize,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    assert_eq!(inits.len(), z_per_env.len(), "one latent schedule per episode");
    let m = inits.len();
    let mut states = Vec::with_capacity(m);
    let mut histories: Vec<ObsHistory> = Vec::with_capacity(m);
    let mut records: Vec<EpisodeRecord> = Vec::with_capacity(m);
    for init in inits {
        let (s, h) = toyenv::reset(env_cfg, *init, rng)?;
        records.push(EpisodeRecord {
            states: vec![s.clone()],
            observations: vec![h.current()],
            actions: Vec::with_capacity(steps),
            aux: Vec::with_capacity(steps),
        });
        states.push(s);
        histories.push(h);
    }
    for t in 0..steps {
        let hist_rows: Vec<Vec<f64>> = histories.iter().map(|h| h.as_slice().to_vec()).collect();
        let z_rows: Vec<Vec<f64>> = z_per_env
            .iter()
            .map(|zs| zs[t.min(zs.len() - 1)].as_slice().to_vec())
            .collect();
        let actions = policy_act(
            model,
            &Tensor::from_rows(&hist_rows),
            &Tensor::from_rows(&z_rows),
            mode,
            rng,
        )?;
        for e in 0..m {
            let a = [actions.get(e, 0), actions.get(e, 1)];
            let (next, obs, aux) = toyenv::step(&states[e], a, env_cfg, rng)?;
            histories[e].advance(a, &obs);
            let rec = &mut records[e];
            rec.states.push(next.clone());
            rec.observations.push(obs);
            rec.actions.push(a);
            rec.aux.push(aux);
            states[e] = next;
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskKind {
    Reward { name: String, params: serde_json::Value },
    Goal { motion_id: String, frame: usize },
    Tracking { motion_id: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub episode_len: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl TaskSpec {
    fn check(&self, env_cfg: &EnvConfig, motions: &MotionSet) -> Result<(), EvalError> {
        let bad = |detail: String| EvalError::BadTask { task: self.id.clone(), detail };
        if self.episodes == 0 {
            return Err(bad("episodes must be >= 1".into()));
        }
        if self.episode_len == 0 {
            return Err(bad("episode_len must be >= 1".into()));
        }
        // Goal and tracking tasks are capped at the env's trained horizon;
        // reward rollouts may run longer since nothing terminates them.
        if !matches!(self.kind, TaskKind::Reward { .. }) && self.episode_len > env_cfg.episode_len
        {
            return Err(bad(format!(
                "episode_len {} outside 1..={}",
                self.episode_len, env_cfg.episode_len
            )));
        }
        let find = |id: &str| motions.motions().iter().find(|m| m.id == id);
        match &self.kind {
            TaskKind::Reward { name, params } => {
                // Validate against the registry with a nominal state.
                let probe_state = PrivilegedState {
                    pose: [0.0, 0.0],
                    velocity: [0.0, 0.0],
                    prev_action: [0.0, 0.0],
                    params: crate::toyenv::EpisodeParams::nominal(),
                    step_index: 0,
                };
                task_reward(name, params, &probe_state)?;
            }
            TaskKind::Goal { motion_id, frame } => {
                let m = find(motion_id)
                    .ok_or_else(|| bad(format!("unknown motion `{motion_id}`")))?;
                if *frame >= m.len() {
                    return Err(bad(format!("frame {frame} out of range (len {})", m.len())));
                }
            }
            TaskKind::Tracking { motion_id } => {
                find(motion_id).ok_or_else(|| bad(format!("unknown motion `{motion_id}`")))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,metric,mean,std,episodes\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.task_id, r.metric, r.mean, r.std, r.episodes
            ));
        }
        out
    }

    pub fn row(&self, task_id: &str, metric: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.task_id == task_id && r.metric == metric)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reward probe over motion-dataset frames: r(s) evaluated per frame.
pub fn motion_probe(
    motions: &MotionSet,
    name: &str,
    params: &serde_json::Value,
    max_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RewardProbe, EvalError> {
    let mut frames: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for m in motions.motions() {
        for f in &m.frames {
            let r = task_reward(name, params, &f.state)?;
            frames.push((f.state.features(), f.obs.to_vec(), r));
        }
    }
    if frames.len() > max_samples {
        for i in 0..max_samples {
            let j = rng.random_range(i..frames.len());
            frames.swap(i, j);
        }
        frames.truncate(max_samples);
    }
    Ok(RewardProbe {
        states: Tensor::from_rows(&frames.iter().map(|f| f.0.clone()).collect::<Vec<_>>()),
        obs: Tensor::from_rows(&frames.iter().map(|f| f.1.clone()).collect::<Vec<_>>()),
        rewards: frames.iter().map(|f| f.2).collect(),
    })
}

/// Tracking look-ahead used during evaluation.
pub const EVAL_TRACKING_LOOKAHEAD: usize = 8;

/// Run the zero-shot procedure for every task and aggregate metrics.
/// Reward and goal tasks also report a uniform-random-latent baseline.
pub fn evaluate_checkpoint(
    model: &Model,
    suite: &[TaskSpec],
    env_cfg: &EnvConfig,
    motions: &MotionSet,
    checkpoint_id: &str,
    config_hash: &str,
) -> Result<EvalReport, EvalError> {
    if suite.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    let mut rows = Vec::new();
    for task in suite {
        task.check(env_cfg, motions)?;
        let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
        let find = |id: &str| motions.motions().iter().find(|m| m.id == id).unwrap();
        match &task.kind {
            TaskKind::Reward { name, params } => {
                let probe = motion_probe(motions, name, params, 20_000, &mut rng)?;
                let z = reward_embedding(model, &probe)?;
                let run = |z: &LatentVector, rng: &mut ChaCha8Rng| -> Result<Vec<f64>, EvalError> {
                    let inits = vec![InitSource::Default; task.episodes];
                    let zs = vec![vec![z.clone()]; task.episodes];
                    let eps =
                        rollout_batch(model, env_cfg, &inits, &zs, task.episode_len, ActMode::Mean, rng)?;
                    eps.iter()
                        .map(|e| {
                            e.states[1..]
                                .iter()
                                .map(|s| task_reward(name, params, s))
                                .sum::<Result<f64, _>>()
                        })
                        .collect()
                };
                let returns = run(&z, &mut rng)?;
                let z_rand = uniform_sphere(model.dims.latent_dim, &mut rng);
                let baseline = run(&z_rand, &mut rng)?;
                let (mean, std) = mean_std(&returns);
                rows.push(EvalRow {
                    task_id: task.id.clone(),
                    metric: "return".into(),
                    mean,
                    std,
                    episodes: task.episodes,
                });
                let (bm, bs) = mean_std(&baseline);
                rows.push(EvalRow {
                    task_id: task.id.clone(),
                    metric: "return_random_z".into(),
                    mean: bm,
                    std: bs,
                    episodes: task.episodes,
                });
            }
            TaskKind::Goal { motion_id, frame } => {
                let motion = find(motion_id);
                let f = &motion.frames[*frame];
                let z = crate::inference::goal_embedding(
                    model,
                    &Tensor::from_rows(&[f.state.features()]),
                    &Tensor::from_rows(&[f.obs.to_vec()]),
                )?;
                let goal_pose = f.state.pose.to_vec();
                let run = |z: &LatentVector, rng: &mut ChaCha8Rng| -> Result<Vec<f64>, EvalError> {
                    let inits = vec![InitSource::Default; task.episodes];
                    let zs = vec![vec![z.clone()]; task.episodes];
                    let eps =
                        rollout_batch(model, env_cfg, &inits, &zs, task.episode_len, ActMode::Mean, rng)?;
                    eps.iter().map(|e| mpjpe(&e.poses(), &MpjpeRef::Goal(&goal_pose))).collect()
                };
                let errors = run(&z, &mut rng)?;
                let z_rand = uniform_sphere(model.dims.latent_dim, &mut rng);
                let baseline = run(&z_rand, &mut rng)?;
                let (mean, std) = mean_std(&errors);
                rows.push(EvalRow {
                    task_id: task.id.clone(),
                    metric: "mpjpe".into(),
                    mean,
                    std,
                    episodes: task.episodes,
                });
                let (bm, bs) = mean_std(&baseline);
                rows.push(EvalRow {
                    task_id: task.id.clone(),
                    metric: "mpjpe_random_z".into(),
                    mean: bm,
                    std: bs,
                    episodes: task.episodes,
                });
            }
            TaskKind::Tracking { motion_id } => {
                let motion = find(motion_id);
                let steps = task.episode_len.min(motion.len() - 1);
                let zs = tracking_embeddings(
                    model,
                    &TrackingPrompt { motion, lookahead: EVAL_TRACKING_LOOKAHEAD },
                )?;
                let ref_poses: Vec<Vec<f64>> =
                    motion.frames[..=steps].iter().map(|f| f.state.pose.to_vec()).collect();
                let inits = vec![InitSource::MotionFrame(motion, 0); task.episodes];
                let schedules = vec![zs; task.episodes];
                let eps = rollout_batch(
                    model,
                    env_cfg,
                    &inits,
                    &schedules,
                    steps,
                    ActMode::Mean,
                    &mut rng,
                )?;
                let errors: Vec<f64> = eps
                    .iter()
                    .map(|e| mpjpe(&e.poses(), &MpjpeRef::Motion(&ref_poses)))
                    .collect::<Result<_, _>>()?;
                let (mean, std) = mean_std(&errors);
                rows.push(EvalRow {
                    task_id: task.id.clone(),
                    metric: "mpjpe".into(),
                    mean,
                    std,
                    episodes: task.episodes,
                });
            }
        }
    }
    Ok(EvalReport {
        rows,
        config_hash: config_hash.to_string(),
        checkpoint_id: checkpoint_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbcore::{ModelConfig, ModelDims};
    use crate::motions::{GeneratorSpec, generate_motion_set};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mpjpe_hand_arithmetic() {
        let poses = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let e = mpjpe(&poses, &MpjpeRef::Goal(&[1.0, 1.0])).unwrap();
        assert!((e - 2.0_f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_zero_on_exact_tracking() {
        let poses = vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![0.0, 0.0]];
        let e = mpjpe(&poses, &MpjpeRef::Motion(&poses.clone())).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn mpjpe_scalar_offset_per_step() {
        // 1-D poses: offset c changes each per-step error |q−g| to |q+c−g|.
        let g = [0.5];
        let qs = [0.0, 0.2, 0.9];
        let c = 0.3;
        for q in qs {
            let base = mpjpe(&[vec![q]], &MpjpeRef::Goal(&g)).unwrap();
            let off = mpjpe(&[vec![q + c]], &MpjpeRef::Goal(&g)).unwrap();
            assert!((base - (q - 0.5).abs()).abs() < 1e-12);
            assert!((off - (q + c - 0.5).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn mpjpe_rejects_length_mismatch() {
        let poses = vec![vec![0.0], vec![1.0]];
        let reference = vec![vec![0.0]];
        assert!(matches!(
            mpjpe(&poses, &MpjpeRef::Motion(&reference)),
            Err(EvalError::LengthMismatch { episode: 2, reference: 1 })
        ));
    }

    #[test]
    fn emd_examples() {
        let mut r = rng(0);
        assert_eq!(emd(&[vec![0.0]], &[vec![1.0]], &mut r).unwrap(), 1.0);
        assert_eq!(
            emd(&[vec![0.0], vec![1.0]], &[vec![1.0], vec![0.0]], &mut r).unwrap(),
            0.0
        );
        assert_eq!(
            emd(&[vec![0.0], vec![2.0]], &[vec![1.0], vec![1.0]], &mut r).unwrap(),
            1.0
        );
        assert!(matches!(emd(&[], &[], &mut r), Err(EvalError::EmptySet)));
        assert!(matches!(
            emd(&[vec![0.0]], &[vec![0.0], vec![1.0]], &mut r),
            Err(EvalError::SizeMismatch { a: 1, b: 2 })
        ));
    }

    fn brute_force_emd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for i in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|&x| if x >= i { x + 1 } else { x }).collect();
                    q.insert(0, i);
                    out.push(q);
                }
            }
            out
        }
        let n = a.len();
        permutations(n)
            .into_iter()
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        a[i].iter().zip(&b[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn random_points(n: usize, dim: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn emd_matches_brute_force() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let n = r.random_range(1..=6);
            let a = random_points(n, 3, &mut r);
            let b = random_points(n, 3, &mut r);
            let fast = emd(&a, &b, &mut r).unwrap();
            let slow = brute_force_emd(&a, &b);
            assert!((fast - slow).abs() < 1e-9, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn emd_is_a_metric_on_random_triples() {
        for seed in 0..15 {
            let mut r = rng(100 + seed);
            let n = r.random_range(1..=6);
            let a = random_points(n, 2, &mut r);
            let b = random_points(n, 2, &mut r);
            let c = random_points(n, 2, &mut r);
            let dab = emd(&a, &b, &mut r).unwrap();
            let dba = emd(&b, &a, &mut r).unwrap();
            let dac = emd(&a, &c, &mut r).unwrap();
            let dbc = emd(&b, &c, &mut r).unwrap();
            let daa = emd(&a, &a, &mut r).unwrap();
            assert!((dab - dba).abs() < 1e-9);
            assert!(daa.abs() < 1e-12);
            assert!(dac <= dab + dbc + 1e-9, "triangle violated");
        }
    }

    #[test]
    fn emd_subsamples_large_sets() {
        let mut r = rng(9);
        let a = random_points(100, 2, &mut r);
        let d = emd(&a, &a.clone(), &mut r).unwrap();
        // Different subsamples of the same set: small but not necessarily 0.
        assert!(d.is_finite() && d >= 0.0);
    }

    fn state(pose: [f64; 2], velocity: [f64; 2]) -> PrivilegedState {
        PrivilegedState {
            pose,
            velocity,
            prev_action: [0.0, 0.0],
            params: crate::toyenv::EpisodeParams::nominal(),
            step_index: 0,
        }
    }

    #[test]
    fn task_reward_examples() {
        let s0 = state([0.0, 0.0], [0.0, 0.0]);
        assert_eq!(task_reward("stand", &serde_json::json!({}), &s0).unwrap(), 1.0);
        let md = serde_json::json!({"theta": 0.0, "v_star": 1.0});
        let moving = state([0.0, 0.0], [1.0, 0.0]);
        assert_eq!(task_reward("move-dir", &md, &moving).unwrap(), 1.0);
        let still = task_reward("move-dir", &md, &s0).unwrap();
        assert!((still - (-4.0_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn unknown_reward_lists_registry() {
        let err = task_reward("fly", &serde_json::json!({}), &state([0.0; 2], [0.0; 2])).unwrap_err();
        let msg = err.to_string();
        for name in REWARD_REGISTRY {
            assert!(msg.contains(name), "registry entry {name} missing from `{msg}`");
        }
    }

    #[test]
    fn raise_and_hold_pose_values() {
        // Arm stretched along +x: ee = (1, 0); raise(h*=0) → 1.
        let s = state([0.0, 0.0], [0.0, 0.0]);
        assert_eq!(task_reward("raise", &serde_json::json!({"h_star": 0.0}), &s).unwrap(), 1.0);
        assert_eq!(task_reward("raise", &serde_json::json!({"h_star": 10.0}), &s).unwrap(), 0.0);
        let hp = serde_json::json!({"q_star": [0.0, 0.0]});
        assert_eq!(task_reward("hold-pose", &hp, &s).unwrap(), 1.0);
        assert!(matches!(
            task_reward("reach", &serde_json::json!({"tol": 0.1}), &s),
            Err(EvalError::MissingParam { param: "p_star", .. })
        ));
    }

    proptest! {
        #[test]
        fn task_rewards_bounded(
            qx in -3.2f64..3.2, qy in -3.2f64..3.2,
            vx in -8.0f64..8.0, vy in -8.0f64..8.0,
            theta in 0.0f64..6.28, v_star in 0.0f64..2.0,
        ) {
            let s = state([qx, qy], [vx, vy]);
            let cases = [
                ("move-dir", serde_json::json!({"theta": theta, "v_star": v_star})),
                ("stand", serde_json::json!({})),
                ("reach", serde_json::json!({"p_star": [0.3, -0.2], "tol": 0.25})),
                ("raise", serde_json::json!({"h_star": 0.5})),
                ("hold-pose", serde_json::json!({"q_star": [0.1, 0.4]})),
            ];
            for (name, params) in cases {
                let r = task_reward(name, &params, &s).unwrap();
                prop_assert!((0.0..=1.0).contains(&r), "{name} -> {r}");
            }
        }
    }

    fn tiny_setup() -> (Model, EnvConfig, MotionSet) {
        let env = EnvConfig::pointmass();
        let ms = generate_motion_set(&env, GeneratorSpec::WaypointLoops, 2, 3).unwrap();
        let dims = ModelDims {
            obs_dim: toyenv::OBS_DIM,
            act_dim: toyenv::ACT_DIM,
            s_dim: toyenv::PRIV_DIM,
            hist_dim: env.history_dim(),
            latent_dim: 4,
        };
        let cfg = ModelConfig { latent_dim: 4, hidden: 8, b_hidden: 8, disc_hidden: 8, ensemble: 2 };
        let model = Model::new(dims, &cfg, &mut rng(0));
        (model, env, ms)
    }

    fn tiny_suite(ms: &MotionSet) -> Vec<TaskSpec> {
        vec![
            TaskSpec {
                id: "stand".into(),
                kind: TaskKind::Reward { name: "stand".into(), params: serde_json::json!({}) },
                episode_len: 10,
                episodes: 2,
                seed: 7,
            },
            TaskSpec {
                id: "goal".into(),
                kind: TaskKind::Goal { motion_id: ms.motions()[0].id.clone(), frame: 5 },
                episode_len: 10,
                episodes: 2,
                seed: 8,
            },
            TaskSpec {
                id: "track".into(),
                kind: TaskKind::Tracking { motion_id: ms.motions()[1].id.clone() },
                episode_len: 10,
                episodes: 1,
                seed: 9,
            },
        ]
    }

    #[test]
    fn evaluate_checkpoint_is_deterministic() {
        let (model, env, ms) = tiny_setup();
        let suite = tiny_suite(&ms);
        let r1 = evaluate_checkpoint(&model, &suite, &env, &ms, "ck", "cfg").unwrap();
        let r2 = evaluate_checkpoint(&model, &suite, &env, &ms, "ck", "cfg").unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        // One row per (task, metric): reward and goal tasks have baselines.
        assert_eq!(r1.rows.len(), 5);
        assert!(r1.row("stand", "return").is_some());
        assert!(r1.row("stand", "return_random_z").is_some());
        assert!(r1.row("goal", "mpjpe").is_some());
        assert!(r1.row("track", "mpjpe").is_some());
    }

    #[test]
    fn evaluate_checkpoint_rejects_bad_tasks() {
        let (model, env, ms) = tiny_setup();
        let mut suite = tiny_suite(&ms);
        suite[0].episodes = 0;
        assert!(matches!(
            evaluate_checkpoint(&model, &suite, &env, &ms, "ck", "cfg"),
            Err(EvalError::BadTask { .. })
        ));
        let mut suite = tiny_suite(&ms);
        suite[1].kind = TaskKind::Goal { motion_id: "nope".into(), frame: 0 };
        assert!(matches!(
            evaluate_checkpoint(&model, &suite, &env, &ms, "ck", "cfg"),
            Err(EvalError::BadTask { .. })
        ));
        assert!(matches!(
            evaluate_checkpoint(&model, &[], &env, &ms, "ck", "cfg"),
            Err(EvalError::EmptySuite)
        ));
    }

    #[test]
    fn rollout_batch_matches_sequential_history_discipline() {
        let (model, env, _) = tiny_setup();
        let mut r = rng(4);
        let z = vec![uniform_sphere(4, &mut r)];
        let eps = rollout_batch(
            &model,
            &env,
            &[InitSource::Default, InitSource::Fall],
            &[z.clone(), z],
            6,
            ActMode::Mean,
            &mut r,
        )
        .unwrap();
        assert_eq!(eps.len(), 2);
        for e in &eps {
            assert_eq!(e.states.len(), 7);
            assert_eq!(e.actions.len(), 6);
            assert!(e.actions.iter().flatten().all(|a| a.abs() < 1.0));
        }
    }
}
