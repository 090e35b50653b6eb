//! Few-shot adaptation with the cross-entropy method: start from the
//! zero-shot reward embedding, then search the latent sphere directly
//! against episode returns under perturbed dynamics (heavier mass).
//!
//!     cargo run --example adapt_cem

use anyhow::Result;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::adaptation::{
    AdaptObjective, AdaptTask, CemConfig, EnvOverrides, cem_adapt, eval_objective, history_csv,
};
use fbzero::evaluation::motion_probe;
use fbzero::fbcore::{LatentSamplerConfig, ModelConfig};
use fbzero::inference::reward_embedding;
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

    let params = serde_json::json!({});
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let probe = motion_probe(&motions, "stand", &params, 4096, &mut rng)?;
    let z_init = reward_embedding(model, &probe)?;

    // The policy was pre-trained on the nominal mass; adapt for 1.5x.
    let obj = AdaptObjective {
        task: AdaptTask::Reward { name: "stand", params: &params },
        alpha_r: 0.02,
        rollout_len: 40,
        episodes_per_eval: 2,
        overrides: EnvOverrides { mass_scale: Some(1.5), ..Default::default() },
    };
    let cfg = CemConfig { iterations: 5, population: 32, seed: 11, ..CemConfig::default() };

    let j0 = eval_objective(model, &env, &obj, &[z_init.clone()], &mut ChaCha8Rng::seed_from_u64(0))?;
    let (z_star, history) = cem_adapt(model, &env, &z_init, &obj, &cfg)?;
    let j1 = eval_objective(model, &env, &obj, &[z_star], &mut ChaCha8Rng::seed_from_u64(0))?;

    println!("objective on 1.5x mass: zero-shot {j0:.3} -> adapted {j1:.3}");
    println!("per-iteration history:\n{}", history_csv(&history));
    Ok(())
}
