//! Latent-space geometry: slerp between two goal prompts on the latent
//! sphere, check Q-value estimates, and project backward embeddings of the
//! dataset to 2-D with PCA for an SVG scatter.
//!
//!     cargo run --example latent_space

use anyhow::Result;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::evaluation::motion_probe;
use fbzero::fbcore::{LatentSamplerConfig, ModelConfig};
use fbzero::inference::{goal_embedding, q_estimate, reward_embedding, reward_embedding_raw, slerp};
use fbzero::motions::{GeneratorSpec, generate_motion_set};
use fbzero::plot::{pca_2d, scatter};
use fbzero::tensor::Tensor;
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

    // Slerp between the embeddings of two goal frames; every waypoint stays
    // on the sqrt(d)-sphere.
    let frame = |m: usize, f: usize| {
        let fr = &motions.motions()[m].frames[f];
        (Tensor::from_rows(&[fr.state.features()]), Tensor::from_rows(&[fr.obs.to_vec()]))
    };
    let (sa, oa) = frame(0, 10);
    let (sb, ob) = frame(1, 50);
    let za = goal_embedding(model, &sa, &oa)?;
    let zb = goal_embedding(model, &sb, &ob)?;
    for k in 0..5 {
        let t = k as f64 / 4.0;
        let z = slerp(&za, &zb, t)?;
        let norm: f64 = z.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("slerp t={t:.2}: |z| = {norm:.6} (sqrt(8) = {:.6})", 8f64.sqrt());
    }

    // Q(s, a, z_r) = min_k F_k(s, a, z)ᵀ z_r_raw for the stand prompt at the
    // origin rest state with a zero action.
    let params = serde_json::json!({});
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let probe = motion_probe(&motions, "stand", &params, 4096, &mut rng)?;
    let z_r = reward_embedding(model, &probe)?;
    let z_r_raw = reward_embedding_raw(model, &probe)?;
    let hist_dim = trainer.env_cfg.history_dim();
    let s_dim = motions.motions()[0].frames[0].state.features().len();
    let q = q_estimate(
        model,
        &Tensor::zeros(1, hist_dim),
        &Tensor::zeros(1, s_dim),
        &Tensor::zeros(1, 2),
        &z_r,
        &z_r_raw,
    )?;
    println!("Q(0, 0, z_stand) = {q:.4}");

    // PCA scatter of the dataset's backward embeddings.
    let mut rows = Vec::new();
    for m in motions.motions() {
        for f in m.frames.iter().step_by(5) {
            let b = model.b_values(
                &Tensor::from_rows(&[f.state.features()]),
                &Tensor::from_rows(&[f.obs.to_vec()]),
            )?;
            rows.push(b.row_slice(0).to_vec());
        }
    }
    let proj = pca_2d(&rows)?;
    let svg = scatter("backward embeddings (PCA)", &proj)?;
    let path = std::env::temp_dir().join("fbzero_latents.svg");
    std::fs::write(&path, svg)?;
    println!("{} embeddings projected, scatter at {}", proj.len(), path.display());
    Ok(())
}
