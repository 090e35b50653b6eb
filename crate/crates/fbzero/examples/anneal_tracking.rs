//! Annealed trajectory optimization: refine a per-chunk latent schedule for
//! motion tracking with the dual-loop sampler (outer iterations shrink the
//! noise, later chunks get more noise than earlier, already-committed ones).
//!
//!     cargo run --example anneal_tracking

use anyhow::Result;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::adaptation::{
    AdaptObjective, AdaptTask, AnnealConfig, EnvOverrides, anneal_sigma, annealed_traj_opt,
    downsample_schedule, tracking_error,
};
use fbzero::fbcore::{LatentSamplerConfig, ModelConfig};
use fbzero::inference::{TrackingPrompt, tracking_embeddings};
use fbzero::motions::{GeneratorSpec, generate_motion_set};
use fbzero::toyenv::EnvConfig;
use fbzero::trainer::{TrainConfig, run_pretraining};

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

    let motion = &motions.motions()[0];
    let rollout_len = 59;
    let chunks = 4;

    // Warm start from the zero-shot tracking schedule, downsampled to chunks.
    let zs = tracking_embeddings(model, &TrackingPrompt { motion, lookahead: 8 })?;
    let init = downsample_schedule(&zs[..rollout_len], chunks);

    let overrides = EnvOverrides::default();
    let obj = AdaptObjective {
        task: AdaptTask::TrackMotion(motion),
        alpha_r: 0.02,
        rollout_len,
        episodes_per_eval: 1,
        overrides,
    };
    let cfg = AnnealConfig { particles: 64, iterations: 3, chunks, seed: 5, ..AnnealConfig::default() };

    // Noise schedule: sigma falls with the iteration and rises toward the
    // end of the horizon.
    for i in 0..cfg.iterations {
        let row: Vec<String> =
            (0..chunks).map(|t| format!("{:.4}", anneal_sigma(&cfg, i, t))).collect();
        println!("iter {i} sigma per chunk: [{}]", row.join(", "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let before = tracking_error(model, &env, motion, &init, rollout_len, &overrides, &mut rng)?;
    let (seq, history) = annealed_traj_opt(model, &env, &init, &obj, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let after = tracking_error(model, &env, motion, &seq, rollout_len, &overrides, &mut rng)?;

    println!("tracking mpjpe: warm start {before:.4} -> optimized {after:.4}");
    println!(
        "best objective per iteration: {:?}",
        history.iter().map(|h| (h.best_j * 1e3).round() / 1e3).collect::<Vec<_>>()
    );
    Ok(())
}
