//! Determinism and resume: the same config and seed reproduce a run
//! bit-for-bit, and a run interrupted halfway and resumed from its saved
//! state continues exactly where the uninterrupted run goes.
//!
//!     cargo run --example resume_determinism

use anyhow::Result;
use fbzero::fbcore::{LatentSamplerConfig, ModelConfig};
use fbzero::motions::{GeneratorSpec, generate_motion_set};
use fbzero::toyenv::EnvConfig;
use fbzero::trainer::{TrainConfig, TrainState, Trainer};

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
        n_grad_total: 20,
        t_seq: 4,
        buffer_mult: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let sampler = LatentSamplerConfig::default();

    // Reference: one uninterrupted run.
    let mut full = Trainer::new(&env, &motions, &model_cfg, &train, &sampler, "example")?;
    full.run(None)?;

    // Same run again: identical metrics, bit for bit.
    let mut again = Trainer::new(&env, &motions, &model_cfg, &train, &sampler, "example")?;
    again.run(None)?;
    assert_eq!(full.metrics.to_csv(), again.metrics.to_csv());
    println!("rerun with the same seed: metrics identical bit-for-bit");

    // Interrupt at round 10, serialize the complete training state, reload
    // it in a fresh process image, and continue.
    let mut half = Trainer::new(&env, &motions, &model_cfg, &train, &sampler, "example")?;
    half.advance(10, None)?;
    let blob = serde_json::to_string(&half.state())?;
    drop(half);

    let state: TrainState = serde_json::from_str(&blob)?;
    let mut resumed = Trainer::from_state(state, &motions)?;
    resumed.run(None)?;
    assert_eq!(full.metrics.to_csv(), resumed.metrics.to_csv());
    println!(
        "interrupt at round 10 + resume: {} rounds total, metrics identical bit-for-bit",
        resumed.rounds_done,
    );

    for (name, t) in full.model.store.iter() {
        let other = resumed.model.store.get(name).unwrap();
        assert_eq!(t.data(), other.data(), "parameter {name} diverged");
    }
    println!("all {} parameter tensors identical", full.model.store.names().count());
    Ok(())
}
