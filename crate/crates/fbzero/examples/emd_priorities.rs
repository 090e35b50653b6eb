//! Distribution matching diagnostics: exact earth mover's distance between
//! point clouds (verified against a brute-force oracle on small instances)
//! and the exponential priority weighting it drives during training.
//!
//!     cargo run --example emd_priorities

use anyhow::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::evaluation::emd;
use fbzero::trainer::update_motion_priorities;

/// O(n!) reference: minimum mean cost over all pairings.
fn emd_brute(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..n {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }
    let n = a.len();
    permutations(n)
        .into_iter()
        .map(|perm| {
            (0..n)
                .map(|i| {
                    let d: f64 = a[i]
                        .iter()
                        .zip(&b[perm[i]])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    d.sqrt()
                })
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min)
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // The assignment solver matches the factorial oracle exactly.
    for trial in 0..5 {
        let n = rng.random_range(2..=5);
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let a = cloud(&mut rng);
        let b = cloud(&mut rng);
        let fast = emd(&a, &b, &mut rng)?;
        let slow = emd_brute(&a, &b);
        println!("trial {trial}: n={n} emd {fast:.6} (brute force {slow:.6})");
        assert!((fast - slow).abs() < 1e-12);
    }

    // Tracking errors become sampling priorities: p ~ 2^(4 * clamp(e, 0.5, 2)),
    // so hard motions are sampled much more often than mastered ones.
    let errors = [0.1, 0.5, 1.0, 3.0];
    let priorities = update_motion_priorities(&errors);
    println!("tracking errors {errors:?}");
    println!("priorities      {priorities:?} (sum = {})", priorities.iter().sum::<f64>());
    Ok(())
}
