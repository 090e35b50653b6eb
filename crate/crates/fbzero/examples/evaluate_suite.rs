//! Batch evaluation: run a suite of reward / goal / tracking tasks against
//! a trained model and print the CSV report with random-latent baselines.
//!
//!     cargo run --example evaluate_suite

use anyhow::Result;
use fbzero::evaluation::{TaskKind, TaskSpec, evaluate_checkpoint};
use fbzero::fbcore::{LatentSamplerConfig, ModelConfig};
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

    let suite = vec![
        TaskSpec {
            id: "stand".into(),
            kind: TaskKind::Reward { name: "stand".into(), params: serde_json::json!({}) },
            episode_len: 40,
            episodes: 3,
            seed: 1,
        },
        TaskSpec {
            id: "move_east".into(),
            kind: TaskKind::Reward {
                name: "move-dir".into(),
                params: serde_json::json!({"theta": 0.0, "v_star": 0.5}),
            },
            episode_len: 40,
            episodes: 3,
            seed: 2,
        },
        TaskSpec {
            id: "goal_m0_f50".into(),
            kind: TaskKind::Goal { motion_id: "waypoint_loops_000".into(), frame: 50 },
            episode_len: 40,
            episodes: 3,
            seed: 3,
        },
        TaskSpec {
            id: "track_m1".into(),
            kind: TaskKind::Tracking { motion_id: "waypoint_loops_001".into() },
            episode_len: 40,
            episodes: 1,
            seed: 4,
        },
    ];

    let report =
        evaluate_checkpoint(&trainer.model, &suite, &trainer.env_cfg, &motions, "example", "0")?;
    println!("{}", report.to_csv());
    Ok(())
}
