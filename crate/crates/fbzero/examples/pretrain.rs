//! Small-scale unsupervised pre-training run on the point-mass environment:
//! latent-conditioned rollouts, discriminator/FB/critic/actor updates, and
//! periodic tracking evaluation that re-weights motion priorities.
//!
//!     cargo run --example pretrain

use anyhow::Result;
use fbzero::fbcore::{LatentSamplerConfig, ModelConfig};
use fbzero::motions::{GeneratorSpec, generate_motion_set};
use fbzero::toyenv::EnvConfig;
use fbzero::trainer::{TrainConfig, run_pretraining};

fn main() -> Result<()> {
    let env = EnvConfig::pointmass();
    let motions = generate_motion_set(&env, GeneratorSpec::WaypointLoops, 4, 7)?;

    let model = ModelConfig { latent_dim: 8, hidden: 32, b_hidden: 32, disc_hidden: 32, ensemble: 2 };
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

    let out = std::env::temp_dir().join("fbzero_example_pretrain");
    std::fs::create_dir_all(&out)?;
    let trainer = run_pretraining(
        &env,
        &motions,
        &model,
        &train,
        &LatentSamplerConfig::default(),
        "example",
        Some(&out),
    )?;

    println!(
        "finished {} rounds over {} env steps, buffer holds {} transitions",
        trainer.rounds_done,
        trainer.env_steps,
        trainer.buffer().len(),
    );
    println!("motion priorities after eval: {:?}", trainer.motions.priorities());
    println!("artifacts (metrics.csv, *.fbz) in {}", out.display());

    // The last few metric rows: losses plus tracking EMD / mpjpe at evals.
    let csv = trainer.metrics.to_csv();
    for line in csv.lines().take(1).chain(csv.lines().rev().take(3).collect::<Vec<_>>().into_iter().rev()) {
        println!("  {line}");
    }
    Ok(())
}
