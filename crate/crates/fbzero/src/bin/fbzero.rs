//! Thin operational shell over the library: dataset generation, training,
//! evaluation, zero-shot prompting, test-time adaptation, and plotting.
//! Each subcommand validates its config, runs one library operation, and
//! writes outputs under the chosen directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use fbzero::adaptation::{
    AdaptObjective, AdaptTask, AnnealConfig, CemConfig, EnvOverrides, annealed_traj_opt,
    cem_adapt, downsample_schedule, history_csv, tracking_error,
};
use fbzero::checkpoint;
use fbzero::config::RunConfig;
use fbzero::evaluation::{
    EpisodeRecord, TaskSpec, evaluate_checkpoint, motion_probe, rollout_batch,
};
use fbzero::fbcore::{ActMode, LatentVector, Model, ModelDims};
use fbzero::inference::{
    TrackingPrompt, goal_embedding, reward_embedding, slerp, tracking_embeddings,
};
use fbzero::metrics::CsvLog;
use fbzero::motions::{
    GeneratorSpec, MotionSet, generate_motion_set, load_motion_set, save_motion_set,
};
use fbzero::plot::{Series, bar_chart, line_chart, pca_2d, scatter};
use fbzero::tensor::Tensor;
use fbzero::toyenv::{self, EnvConfig, EnvKind, InitSource};
use fbzero::trainer::Trainer;

#[derive(Parser)]
#[command(name = "fbzero", about = "Behavioral foundation model on toy environments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Pointmass,
    Arm2,
}

impl From<EnvArg> for EnvKind {
    fn from(v: EnvArg) -> EnvKind {
        match v {
            EnvArg::Pointmass => EnvKind::PointMass,
            EnvArg::Arm2 => EnvKind::Arm2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Waypoints,
    Sinusoids,
    FigureEight,
}

impl From<GeneratorArg> for GeneratorSpec {
    fn from(v: GeneratorArg) -> GeneratorSpec {
        match v {
            GeneratorArg::Waypoints => GeneratorSpec::WaypointLoops,
            GeneratorArg::Sinusoids => GeneratorSpec::SinusoidJoints,
            GeneratorArg::FigureEight => GeneratorSpec::FigureEight,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motion dataset file.
    GenMotions {
        #[arg(long, value_enum)]
        env: EnvArg,
        #[arg(long, value_enum)]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run unsupervised pre-training from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed (same as FBZERO_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a task-suite JSON file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot reward prompting: embed a named reward and roll it out.
    InferReward {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        /// JSON object with the reward parameters.
        #[arg(long, default_value = "{}")]
        params: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot goal prompting from a frame file {"state": [...], "obs": [...]}.
    InferGoal {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a motion with look-ahead embeddings.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Motion dataset file; tracks the motion with this id.
        #[arg(long)]
        motions: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 8)]
        lookahead: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-entropy latent adaptation on a named reward.
    AdaptCem {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "{}")]
        params: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed mass-scale override (payload analog).
        #[arg(long)]
        mass_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dual-loop annealed trajectory optimization against a motion.
    AdaptTraj {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        motions: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 8)]
        chunks: usize,
        #[arg(long, default_value_t = 6)]
        iterations: usize,
        #[arg(long, default_value_t = 256)]
        particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mass_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out slerp midpoints between two goal-frame prompts.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        frame_a: PathBuf,
        #[arg(long)]
        frame_b: PathBuf,
        #[arg(long, default_value_t = 5)]
        waypoints: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// 2-D PCA scatter of backward embeddings of a motion dataset.
    ProjectLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        motions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG charts from a metrics CSV or an eval-report CSV.
    Plot {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[derive(serde::Deserialize)]
struct FrameFile {
    state: Vec<f64>,
    obs: Vec<f64>,
}

fn load_frame(path: &Path) -> Result<(Tensor, Tensor)> {
    let f: FrameFile = serde_json::from_str(&fs::read_to_string(path)?)
        .with_context(|| format!("parsing frame file {}", path.display()))?;
    Ok((Tensor::from_rows(&[f.state]), Tensor::from_rows(&[f.obs])))
}

/// Rebuild the model described by the run config and load the checkpoint
/// into it, refusing config-hash mismatches.
fn load_model(config_path: &Path, ckpt_path: &Path) -> Result<(RunConfig, EnvConfig, Model)> {
    let cfg = RunConfig::load(config_path)?;
    let env = cfg.train.resolve_env(&cfg.env);
    let dims = ModelDims {
        obs_dim: toyenv::OBS_DIM,
        act_dim: toyenv::ACT_DIM,
        s_dim: toyenv::PRIV_DIM,
        hist_dim: env.history_dim(),
        latent_dim: cfg.model.latent_dim,
    };
    let mut model = Model::new(dims, &cfg.model, &mut ChaCha8Rng::seed_from_u64(0));
    let (header, loaded) = checkpoint::load(ckpt_path)?;
    checkpoint::check_hash(&header, &cfg.hash())?;
    checkpoint::apply(&mut model.store, &loaded)?;
    Ok((cfg, env, model))
}

fn load_dataset(cfg: &RunConfig) -> Result<MotionSet> {
    let path = cfg
        .dataset
        .as_ref()
        .context("config has no `dataset` path; run gen-motions first")?;
    Ok(load_motion_set(path)?)
}

fn trajectory_csv(rec: &EpisodeRecord) -> CsvLog {
    let mut log = CsvLog::new(&["step", "pose_0", "pose_1", "vel_0", "vel_1", "act_0", "act_1"]);
    for (t, s) in rec.states.iter().enumerate() {
        let a = if t == 0 { [f64::NAN, f64::NAN] } else { rec.actions[t - 1] };
        log.push(vec![t as f64, s.pose[0], s.pose[1], s.velocity[0], s.velocity[1], a[0], a[1]])
            .expect("fixed width");
    }
    log
}

fn rollout_one(
    model: &Model,
    env: &EnvConfig,
    init: InitSource,
    zs: Vec<LatentVector>,
    steps: usize,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recs =
        rollout_batch(model, env, &[init], &[zs], steps, ActMode::Mean, &mut rng)?;
    Ok(recs.remove(0))
}

fn print_latent(label: &str, z: &LatentVector) {
    let body: Vec<String> = z.as_slice().iter().map(|v| format!("{v:.6}")).collect();
    println!("{label} = [{}]", body.join(", "));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMotions { env, generator, count, seed, out } => {
            let env_cfg = EnvConfig::for_kind(env.into());
            let ms = generate_motion_set(&env_cfg, generator.into(), count, seed)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            save_motion_set(&ms, &out)?;
            println!(
                "wrote {} motions ({} frames) to {}",
                ms.len(),
                ms.total_frames(),
                out.display()
            );
        }
        Command::Train { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let motions = load_dataset(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            cfg.save(&cfg.out_dir.join("config.json"))?;
            let mut trainer = Trainer::new(
                &cfg.env,
                &motions,
                &cfg.model,
                &cfg.train,
                &cfg.sampler,
                &cfg.hash(),
            )?;
            trainer.run(Some(&cfg.out_dir))?;
            println!(
                "trained {} rounds over {} env steps; outputs in {}",
                trainer.rounds_done,
                trainer.env_steps,
                cfg.out_dir.display()
            );
        }
        Command::Eval { checkpoint, config, suite, out } => {
            let (cfg, env, model) = load_model(&config, &checkpoint)?;
            let motions = load_dataset(&cfg)?;
            let suite: Vec<TaskSpec> = serde_json::from_str(&fs::read_to_string(&suite)?)
                .with_context(|| format!("parsing suite {}", suite.display()))?;
            let ckpt_id = checkpoint.file_stem().unwrap_or_default().to_string_lossy();
            let report =
                evaluate_checkpoint(&model, &suite, &env, &motions, &ckpt_id, &cfg.hash())?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, report.to_csv())?;
            let labels: Vec<String> =
                report.rows.iter().map(|r| format!("{}:{}", r.task_id, r.metric)).collect();
            let values: Vec<f64> = report.rows.iter().map(|r| r.mean).collect();
            let svg = bar_chart("evaluation", &labels, &values)?;
            fs::write(out.with_extension("svg"), svg)?;
            println!("{}", report.to_csv());
        }
        Command::InferReward { checkpoint, config, task, params, steps, seed, out } => {
            let (cfg, env, model) = load_model(&config, &checkpoint)?;
            let motions = load_dataset(&cfg)?;
            let params: serde_json::Value = serde_json::from_str(&params)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = motion_probe(&motions, &task, &params, 20_000, &mut rng)?;
            let z = reward_embedding(&model, &probe)?;
            print_latent("z_r", &z);
            let rec = rollout_one(&model, &env, InitSource::Default, vec![z], steps, seed)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            trajectory_csv(&rec).write(&out)?;
            println!("trajectory written to {}", out.display());
        }
        Command::InferGoal { checkpoint, config, frame, steps, seed, out } => {
            let (_cfg, env, model) = load_model(&config, &checkpoint)?;
            let (state, obs) = load_frame(&frame)?;
            let z = goal_embedding(&model, &state, &obs)?;
            print_latent("z_g", &z);
            let rec = rollout_one(&model, &env, InitSource::Default, vec![z], steps, seed)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            trajectory_csv(&rec).write(&out)?;
            println!("trajectory written to {}", out.display());
        }
        Command::Track { checkpoint, config, motions, id, lookahead, seed, out } => {
            let (_cfg, env, model) = load_model(&config, &checkpoint)?;
            let ms = load_motion_set(&motions)?;
            let motion = ms
                .motions()
                .iter()
                .find(|m| m.id == id)
                .with_context(|| format!("motion `{id}` not in {}", motions.display()))?;
            let zs = tracking_embeddings(&model, &TrackingPrompt { motion, lookahead })?;
            let steps = motion.len() - 1;
            let rec = rollout_one(
                &model,
                &env.nominal(),
                InitSource::MotionFrame(motion, 0),
                zs,
                steps,
                seed,
            )?;
            let ref_poses: Vec<Vec<f64>> =
                motion.frames.iter().map(|f| f.state.pose.to_vec()).collect();
            let err = fbzero::evaluation::mpjpe(
                &rec.poses(),
                &fbzero::evaluation::MpjpeRef::Motion(&ref_poses),
            )?;
            println!("tracking E_mpjpe = {err:.6}");
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            trajectory_csv(&rec).write(&out)?;
        }
        Command::AdaptCem {
            checkpoint,
            config,
            task,
            params,
            steps,
            iterations,
            seed,
            mass_scale,
            out,
        } => {
            let (cfg, env, model) = load_model(&config, &checkpoint)?;
            let motions = load_dataset(&cfg)?;
            let params: serde_json::Value = serde_json::from_str(&params)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = motion_probe(&motions, &task, &params, 20_000, &mut rng)?;
            let z_init = reward_embedding(&model, &probe)?;
            let obj = AdaptObjective {
                task: AdaptTask::Reward { name: &task, params: &params },
                alpha_r: cfg.train.alpha_r,
                rollout_len: steps.min(env.episode_len),
                episodes_per_eval: 2,
                overrides: EnvOverrides { mass_scale, ..Default::default() },
            };
            let cem = CemConfig { iterations, seed, ..CemConfig::default() };
            let (z_star, history) = cem_adapt(&model, &env, &z_init, &obj, &cem)?;
            print_latent("z_star", &z_star);
            fs::create_dir_all(&out)?;
            fs::write(out.join("cem_history.csv"), history_csv(&history))?;
            fs::write(
                out.join("z_star.json"),
                serde_json::to_string_pretty(&z_star)?,
            )?;
            println!("history written to {}", out.join("cem_history.csv").display());
        }
        Command::AdaptTraj {
            checkpoint,
            config,
            motions,
            id,
            chunks,
            iterations,
            particles,
            seed,
            mass_scale,
            out,
        } => {
            let (cfg, env, model) = load_model(&config, &checkpoint)?;
            let ms = load_motion_set(&motions)?;
            let motion = ms
                .motions()
                .iter()
                .find(|m| m.id == id)
                .with_context(|| format!("motion `{id}` not in {}", motions.display()))?;
            let zs = tracking_embeddings(&model, &TrackingPrompt { motion, lookahead: 8 })?;
            let init = downsample_schedule(&zs, chunks);
            let overrides = EnvOverrides { mass_scale, ..Default::default() };
            // Track at most one env episode's worth of the motion.
            let rollout_len = (motion.len() - 1).min(env.episode_len);
            let obj = AdaptObjective {
                task: AdaptTask::TrackMotion(motion),
                alpha_r: cfg.train.alpha_r,
                rollout_len,
                episodes_per_eval: 1,
                overrides,
            };
            let anneal = AnnealConfig { chunks, iterations, particles, seed, ..AnnealConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let before =
                tracking_error(&model, &env, motion, &init, rollout_len, &overrides, &mut rng)?;
            let (seq, history) = annealed_traj_opt(&model, &env, &init, &obj, &anneal)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let after =
                tracking_error(&model, &env, motion, &seq, rollout_len, &overrides, &mut rng)?;
            println!("tracking E_mpjpe before = {before:.6}, after = {after:.6}");
            fs::create_dir_all(&out)?;
            fs::write(out.join("anneal_history.csv"), history_csv(&history))?;
            fs::write(out.join("z_seq.json"), serde_json::to_string_pretty(&seq)?)?;
        }
        Command::Interpolate {
            checkpoint,
            config,
            frame_a,
            frame_b,
            waypoints,
            steps,
            seed,
            out,
        } => {
            if waypoints < 2 {
                bail!("need at least 2 interpolation waypoints");
            }
            let (_cfg, env, model) = load_model(&config, &checkpoint)?;
            let (sa, oa) = load_frame(&frame_a)?;
            let (sb, ob) = load_frame(&frame_b)?;
            let za = goal_embedding(&model, &sa, &oa)?;
            let zb = goal_embedding(&model, &sb, &ob)?;
            fs::create_dir_all(&out)?;
            for k in 0..waypoints {
                let t = k as f64 / (waypoints - 1) as f64;
                let z = slerp(&za, &zb, t)?;
                let rec =
                    rollout_one(&model, &env, InitSource::Default, vec![z], steps, seed)?;
                trajectory_csv(&rec).write(&out.join(format!("interp_{k:02}.csv")))?;
            }
            println!("{waypoints} interpolated rollouts in {}", out.display());
        }
        Command::ProjectLatents { checkpoint, config, motions, out } => {
            let (_cfg, _env, model) = load_model(&config, &checkpoint)?;
            let ms = load_motion_set(&motions)?;
            let mut rows = Vec::new();
            for m in ms.motions() {
                for f in &m.frames {
                    let b = model.b_values(
                        &Tensor::from_rows(&[f.state.features()]),
                        &Tensor::from_rows(&[f.obs.to_vec()]),
                    )?;
                    rows.push(b.row_slice(0).to_vec());
                }
            }
            let proj = pca_2d(&rows)?;
            let svg = scatter("backward embeddings (PCA)", &proj)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, svg)?;
            println!("scatter written to {}", out.display());
        }
        Command::Plot { metrics, report, out_dir } => {
            fs::create_dir_all(&out_dir)?;
            let mut wrote = 0;
            if let Some(path) = metrics {
                let log = CsvLog::read(&path)?;
                if log.is_empty() {
                    eprintln!("warning: {} has no rows, nothing to plot", path.display());
                } else {
                    let steps = log.column("step").context("metrics CSV needs a `step` column")?;
                    let mut loss_series = Vec::new();
                    for name in ["loss_d", "loss_fb", "loss_qd", "loss_qr", "loss_pi"] {
                        if let Some(vals) = log.column(name) {
                            let pts: Vec<(f64, f64)> = steps
                                .iter()
                                .zip(&vals)
                                .filter(|(_, v)| v.is_finite())
                                .map(|(&s, &v)| (s, v))
                                .collect();
                            if !pts.is_empty() {
                                loss_series.push(Series { label: name.into(), points: pts });
                            }
                        }
                    }
                    if !loss_series.is_empty() {
                        fs::write(out_dir.join("losses.svg"), line_chart("losses", &loss_series)?)?;
                        wrote += 1;
                    }
                    let mut eval_series = Vec::new();
                    for name in ["emd_mean", "mpjpe_mean"] {
                        if let Some(vals) = log.column(name) {
                            let pts: Vec<(f64, f64)> = steps
                                .iter()
                                .zip(&vals)
                                .filter(|(_, v)| v.is_finite())
                                .map(|(&s, &v)| (s, v))
                                .collect();
                            if !pts.is_empty() {
                                eval_series.push(Series { label: name.into(), points: pts });
                            }
                        }
                    }
                    if !eval_series.is_empty() {
                        fs::write(
                            out_dir.join("tracking.svg"),
                            line_chart("tracking eval", &eval_series)?,
                        )?;
                        wrote += 1;
                    }
                }
            }
            if let Some(path) = report {
                let text = fs::read_to_string(&path)?;
                let mut labels = Vec::new();
                let mut values = Vec::new();
                for line in text.lines().skip(1) {
                    let cells: Vec<&str> = line.split(',').collect();
                    if cells.len() >= 3 {
                        labels.push(format!("{}:{}", cells[0], cells[1]));
                        values.push(cells[2].parse::<f64>().unwrap_or(f64::NAN));
                    }
                }
                if values.is_empty() {
                    eprintln!("warning: {} has no rows, nothing to plot", path.display());
                } else {
                    fs::write(out_dir.join("report.svg"), bar_chart("evaluation", &labels, &values)?)?;
                    wrote += 1;
                }
            }
            println!("wrote {wrote} charts to {}", out_dir.display());
        }
    }
    Ok(())
}
