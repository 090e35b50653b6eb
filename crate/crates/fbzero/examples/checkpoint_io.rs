//! Checkpoint container: save model parameters to the binary tensor-directory
//! format, inspect the header, reload into a fresh model, and see the hash
//! guard reject a checkpoint produced under a different config.
//!
//!     cargo run --example checkpoint_io

use anyhow::Result;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::checkpoint::{self, CheckpointError};
use fbzero::fbcore::{Model, ModelConfig, ModelDims};
use fbzero::toyenv::{ACT_DIM, OBS_DIM, PRIV_DIM};

fn main() -> Result<()> {
    let dims = ModelDims {
        obs_dim: OBS_DIM,
        act_dim: ACT_DIM,
        s_dim: PRIV_DIM,
        hist_dim: 4 * (OBS_DIM + ACT_DIM) + OBS_DIM,
        latent_dim: 8,
    };
    let cfg = ModelConfig { latent_dim: 8, hidden: 32, b_hidden: 32, disc_hidden: 32, ensemble: 2 };
    let model = Model::new(dims, &cfg, &mut ChaCha8Rng::seed_from_u64(1));

    let path = std::env::temp_dir().join("fbzero_example.fbz");
    checkpoint::save(&path, &model.store, "cafebabe00000000", 123)?;

    let (header, loaded) = checkpoint::load(&path)?;
    println!(
        "schema {} step {} config_hash {} with {} tensors ({} floats)",
        header.schema,
        header.step,
        header.config_hash,
        header.tensors.len(),
        header.payload_len(),
    );
    for t in header.tensors.iter().take(4) {
        println!("  {} [{}x{}] at byte {}", t.name, t.rows, t.cols, t.offset);
    }

    // Hash guard: refuses to load into a run with a different config.
    match checkpoint::check_hash(&header, "deadbeef00000000") {
        Err(CheckpointError::HashMismatch { .. }) => println!("mismatched config hash rejected"),
        other => panic!("expected a hash mismatch, got {other:?}"),
    }

    // Apply onto a fresh model with the same architecture. Values round-trip
    // through f32 storage, so they match the f32-representable originals.
    let mut fresh = Model::new(dims, &cfg, &mut ChaCha8Rng::seed_from_u64(99));
    checkpoint::apply(&mut fresh.store, &loaded)?;
    for (name, t) in model.store.iter() {
        assert_eq!(t.data(), fresh.store.get(name).unwrap().data());
    }
    println!("reload exact: every tensor identical after apply");
    Ok(())
}
