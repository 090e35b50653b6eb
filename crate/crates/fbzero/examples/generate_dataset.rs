//! Generate synthetic motion datasets for both toy environments and persist
//! them through the single-file motion format.
//!
//!     cargo run --example generate_dataset

use anyhow::Result;
use fbzero::motions::{GeneratorSpec, generate_motion_set, load_motion_set, save_motion_set};
use fbzero::toyenv::EnvConfig;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("fbzero_example_datasets");
    std::fs::create_dir_all(&dir)?;

    let specs = [
        (EnvConfig::pointmass(), GeneratorSpec::WaypointLoops, "pointmass_waypoints"),
        (EnvConfig::arm2(), GeneratorSpec::SinusoidJoints, "arm2_sinusoids"),
        (EnvConfig::arm2(), GeneratorSpec::FigureEight, "arm2_figure_eight"),
    ];

    for (env, gen, name) in specs {
        let ms = generate_motion_set(&env, gen, 6, 42)?;
        let path = dir.join(format!("{name}.txt"));
        save_motion_set(&ms, &path)?;
        let back = load_motion_set(&path)?;
        assert_eq!(back.total_frames(), ms.total_frames());

        let first = &ms.motions()[0];
        println!(
            "{name}: {} motions x {} frames, first id `{}`, pose[0] of frame 0 = {:.4}",
            ms.len(),
            first.len(),
            first.id,
            first.frames[0].state.pose[0],
        );
        println!("  written to {}", path.display());
    }
    Ok(())
}
