//! Toy environment tour: domain-randomized resets, stacked observation
//! histories, auxiliary reward terms, and the two embodiments (point mass
//! and 2-link arm).
//!
//!     cargo run --example environment_rollout

use anyhow::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::toyenv::{self, EnvConfig, InitSource, arm2_end_effector};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // Each reset draws one episode's physics from the randomization ranges.
    let cfg = EnvConfig::pointmass();
    for _ in 0..3 {
        let (s, _) = toyenv::reset(&cfg, InitSource::Default, &mut rng)?;
        println!(
            "episode params: mass {:.3} friction {:.3} gain {:.3} offset [{:+.3}, {:+.3}]",
            s.params.mass_scale,
            s.params.friction,
            s.params.gain_scale,
            s.params.action_offset[0],
            s.params.action_offset[1],
        );
    }

    // A short rollout with constant thrust; the observation history carries
    // the last H observation/action pairs plus the current observation.
    let (mut s, mut hist) = toyenv::reset(&cfg, InitSource::Default, &mut rng)?;
    println!("obs history dim = {}", cfg.history_dim());
    let mut aux_total = 0.0;
    for _ in 0..50 {
        let action = [0.8, 0.1];
        let (next, obs, aux) = toyenv::step(&s, action, &cfg, &mut rng)?;
        hist.advance(action, &obs);
        aux_total += aux.total();
        s = next;
    }
    println!(
        "after 50 steps: pose [{:+.3}, {:+.3}] vel [{:+.3}, {:+.3}] aux total {:.3}",
        s.pose[0], s.pose[1], s.velocity[0], s.velocity[1], aux_total,
    );

    // Fall initialization puts the agent in a recovery posture.
    let mut fall_cfg = cfg.clone();
    fall_cfg.fall_init_prob = 1.0;
    let (fallen, _) = toyenv::reset(&fall_cfg, InitSource::Fall, &mut rng)?;
    println!(
        "fall init: pose [{:+.3}, {:+.3}] vel [{:+.3}, {:+.3}]",
        fallen.pose[0], fallen.pose[1], fallen.velocity[0], fallen.velocity[1],
    );

    // The arm embodiment interprets pose as joint angles; forward kinematics
    // gives the end effector used by the `raise` reward.
    let arm = EnvConfig::arm2();
    let (mut s, _) = toyenv::reset(&arm, InitSource::Default, &mut rng)?;
    for _ in 0..30 {
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (next, _, _) = toyenv::step(&s, a, &arm, &mut rng)?;
        s = next;
    }
    let ee = arm2_end_effector(&s.pose);
    println!("arm joints [{:+.3}, {:+.3}] -> end effector [{:+.3}, {:+.3}]", s.pose[0], s.pose[1], ee[0], ee[1]);
    Ok(())
}
