//! Zero-shot prompting: after a short pre-training run, turn a reward
//! function, a goal frame, and a reference motion into latent prompts and
//! roll the frozen policy out on each, comparing against a random latent.
//!
//!     cargo run --example zero_shot

use anyhow::Result;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::evaluation::{MpjpeRef, mpjpe, motion_probe, rollout_batch, task_reward};
use fbzero::fbcore::{ActMode, LatentSamplerConfig, LatentVector, Model, ModelConfig, uniform_sphere};
use fbzero::inference::{TrackingPrompt, goal_embedding, reward_embedding, tracking_embeddings};
use fbzero::motions::{GeneratorSpec, generate_motion_set};
use fbzero::tensor::Tensor;
use fbzero::toyenv::{EnvConfig, InitSource};
use fbzero::trainer::{TrainConfig, run_pretraining};

fn episode_return(
    model: &Model,
    env: &EnvConfig,
    z: LatentVector,
    name: &str,
    params: &serde_json::Value,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = rollout_batch(model, env, &[InitSource::Default], &[vec![z]], 60, ActMode::Mean, &mut rng)?;
    let mut total = 0.0;
    for s in &recs[0].states[1..] {
        total += task_reward(name, params, s)?;
    }
    Ok(total)
}

fn main() -> Result<()> {
    let env = EnvConfig::pointmass();
    let motions = generate_motion_set(&env, GeneratorSpec::WaypointLoops, 4, 7)?;
    let model_cfg =
        ModelConfig { latent_dim: 8, hidden: 32, b_hidden: 32, disc_hidden: 32, ensemble: 2 };
    let train = TrainConfig {
        n_env: 2,
        t: 60,
        n_batch: 32,
        n_ups: 1,
        n_grad_total: 60,
        t_seq: 4,
        buffer_mult: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let trainer = run_pretraining(
        &env,
        &motions,
        &model_cfg,
        &train,
        &LatentSamplerConfig::default(),
        "example",
        None,
    )?;
    let model = &trainer.model;
    let nominal = env.nominal();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // Reward prompting: label dataset states with the reward, encode the
    // reward-weighted occupancy into z_r.
    let params = serde_json::json!({});
    let probe = motion_probe(&motions, "stand", &params, 4096, &mut rng)?;
    let z_r = reward_embedding(model, &probe)?;
    let prompted = episode_return(model, &nominal, z_r, "stand", &params, 5)?;
    let random = episode_return(model, &nominal, uniform_sphere(8, &mut rng), "stand", &params, 5)?;
    println!("stand return: prompted {prompted:.3} vs random z {random:.3}");

    // Goal prompting: B of a single target frame.
    let target = &motions.motions()[0].frames[50];
    let z_g = goal_embedding(
        model,
        &Tensor::from_rows(&[target.state.features()]),
        &Tensor::from_rows(&[target.obs.to_vec()]),
    )?;
    let recs = rollout_batch(model, &nominal, &[InitSource::Default], &[vec![z_g]], 60, ActMode::Mean, &mut rng)?;
    let err = mpjpe(&recs[0].poses(), &MpjpeRef::Goal(&target.state.pose))?;
    println!("goal mpjpe over the episode: {err:.4}");

    // Tracking: one look-ahead latent per frame, replayed open-loop.
    let motion = &motions.motions()[1];
    let zs = tracking_embeddings(model, &TrackingPrompt { motion, lookahead: 8 })?;
    let steps = 59.min(motion.len() - 1);
    let recs = rollout_batch(
        model,
        &nominal,
        &[InitSource::MotionFrame(motion, 0)],
        &[zs[..steps].to_vec()],
        steps,
        ActMode::Mean,
        &mut rng,
    )?;
    let ref_poses: Vec<Vec<f64>> =
        motion.frames[..=steps].iter().map(|f| f.state.pose.to_vec()).collect();
    let err = mpjpe(&recs[0].poses(), &MpjpeRef::Motion(&ref_poses))?;
    println!("tracking mpjpe on `{}`: {err:.4}", motion.id);
    Ok(())
}
