//! Synthetic expert motion dataset: generation by scripted controllers,
//! chunking, prioritized frame sampling, and persistence.
//!
//! Motions are action-free sequences of (observation, privileged state)
//! frames produced by rolling out a scripted controller under noiseless,
//! nominal dynamics. Frame values are rounded to f32 on recording so the
//! text format roundtrips bit-for-bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::toyenv::{
    self, ACT_DIM, EnvConfig, EnvKind, EpisodeParams, InitSource, OBS_DIM, Observation,
    PRIV_DIM, PrivilegedState,
};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("empty dataset: n_motions must be >= 1")]
    EmptyDataset,
    #[error("no data: cannot sample from an empty motion set")]
    NoData,
    #[error("priorities must be strictly positive and match the motion count")]
    BadPriorities,
    #[error("motion `{id}` too short: {len} frames (need >= 2)")]
    TooShort { id: String, len: usize },
    #[error("generator `{generator}` failed to converge for motion `{id}`: {detail}")]
    GeneratorDiverged { generator: String, id: String, detail: String },
    #[error("chunk_len must be >= 2, got {0}")]
    BadChunkLen(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Env(#[from] toyenv::EnvError),
}

/// Controller family used to script a motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Point mass chasing a closed loop of waypoints with a proportional
    /// controller.
    WaypointLoops,
    /// Arm joints tracking independent sinusoids through the PD interface.
    SinusoidJoints,
    /// Arm end effector tracking a Lissajous figure eight via 2-link IK.
    FigureEight,
}

impl GeneratorSpec {
    fn tag(self) -> &'static str {
        match self {
            GeneratorSpec::WaypointLoops => "waypoint_loops",
            GeneratorSpec::SinusoidJoints => "sinusoid_joints",
            GeneratorSpec::FigureEight => "figure_eight",
        }
    }
}

/// Generator parameters a motion was produced from, kept for provenance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub generator: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub obs: Observation,
    pub state: PrivilegedState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub id: String,
    pub frames: Vec<Frame>,
    pub source_params: SourceParams,
}

impl Motion {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSet {
    motions: Vec<Motion>,
    priorities: Vec<f64>,
    pub env_kind: EnvKind,
}

impl MotionSet {
    /// Build a set with uniform priorities, enforcing per-motion invariants.
    pub fn new(motions: Vec<Motion>, env_kind: EnvKind) -> Result<Self, MotionError> {
        if motions.is_empty() {
            return Err(MotionError::EmptyDataset);
        }
        for m in &motions {
            if m.frames.len() < 2 {
                return Err(MotionError::TooShort { id: m.id.clone(), len: m.frames.len() });
            }
        }
        let n = motions.len();
        Ok(MotionSet { motions, priorities: vec![1.0; n], env_kind })
    }

    pub fn motions(&self) -> &[Motion] {
        &self.motions
    }

    pub fn priorities(&self) -> &[f64] {
        &self.priorities
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.motions.iter().map(|m| m.frames.len()).sum()
    }

    /// Replace all priorities at once (single-writer, phase-separated).
    pub fn set_priorities(&mut self, priorities: Vec<f64>) -> Result<(), MotionError> {
        if priorities.len() != self.motions.len()
            || priorities.iter().any(|&p| !(p > 0.0) || !p.is_finite())
        {
            return Err(MotionError::BadPriorities);
        }
        self.priorities = priorities;
        Ok(())
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn record_frame(state: &PrivilegedState, obs: &Observation) -> Frame {
    let mut s = state.clone();
    s.pose = s.pose.map(round32);
    s.velocity = s.velocity.map(round32);
    s.prev_action = s.prev_action.map(round32);
    s.params.mass_scale = round32(s.params.mass_scale);
    s.params.friction = round32(s.params.friction);
    s.params.gain_scale = round32(s.params.gain_scale);
    s.params.action_offset = s.params.action_offset.map(round32);
    let o = Observation {
        pose_err: obs.pose_err.map(round32),
        velocity: obs.velocity.map(round32),
    };
    Frame { obs: o, state: s }
}

/// A scripted open- or closed-loop action policy over nominal dynamics.
trait Script {
    fn act(&mut self, state: &PrivilegedState, t: usize, dt: f64) -> [f64; ACT_DIM];
    /// Post-rollout convergence check; `Ok(())` by default.
    fn verify(&self, final_state: &PrivilegedState) -> Result<(), String> {
        let _ = final_state;
        Ok(())
    }
}

struct WaypointScript {
    waypoints: Vec<[f64; 2]>,
    current: usize,
    n_steps: usize,
    /// Steps before the end at which the script gives up on intermediate
    /// waypoints and homes in on the last one, guaranteeing convergence.
    reserve: usize,
}

impl Script for WaypointScript {
    fn act(&mut self, state: &PrivilegedState, t: usize, _dt: f64) -> [f64; ACT_DIM] {
        if self.n_steps - t <= self.reserve {
            self.current = self.waypoints.len() - 1;
        }
        let wp = self.waypoints[self.current];
        let d = ((wp[0] - state.pose[0]).powi(2) + (wp[1] - state.pose[1]).powi(2)).sqrt();
        if d < 0.05 && self.current + 1 < self.waypoints.len() {
            self.current += 1;
        }
        let wp = self.waypoints[self.current];
        // Near-critically damped proportional controller under the clamp.
        [
            (4.0 * (wp[0] - state.pose[0]) - 3.5 * state.velocity[0]).clamp(-1.0, 1.0),
            (4.0 * (wp[1] - state.pose[1]) - 3.5 * state.velocity[1]).clamp(-1.0, 1.0),
        ]
    }

    fn verify(&self, final_state: &PrivilegedState) -> Result<(), String> {
        let wp = *self.waypoints.last().unwrap();
        let d = ((wp[0] - final_state.pose[0]).powi(2) + (wp[1] - final_state.pose[1]).powi(2)).sqrt();
        if d <= 0.1 {
            Ok(())
        } else {
            Err(format!("final position {d:.3} from last waypoint (limit 0.1)"))
        }
    }
}

struct SinusoidScript {
    amp: [f64; 2],
    omega: [f64; 2],
    phase: [f64; 2],
}

impl Script for SinusoidScript {
    fn act(&mut self, _state: &PrivilegedState, t: usize, dt: f64) -> [f64; ACT_DIM] {
        let time = t as f64 * dt;
        let q = |j: usize| self.amp[j] * (self.omega[j] * time + self.phase[j]).sin();
        [q(0) / PI, q(1) / PI]
    }
}

struct FigureEightScript {
    center: [f64; 2],
    amp: [f64; 2],
    omega: f64,
    elbow: f64,
}

impl FigureEightScript {
    fn target_joints(&self, time: f64) -> [f64; 2] {
        let mut x = self.center[0] + self.amp[0] * (self.omega * time).sin();
        let mut y = self.center[1] + self.amp[1] * (2.0 * self.omega * time).sin();
        // Keep the target inside the dexterous annulus of the 2-link arm.
        let r = (x * x + y * y).sqrt();
        let r_clamped = r.clamp(0.15, 0.95);
        if r > 0.0 && r != r_clamped {
            x *= r_clamped / r;
            y *= r_clamped / r;
        }
        let r2 = r_clamped * r_clamped;
        let cos_q2 = (2.0 * r2 - 1.0).clamp(-1.0, 1.0);
        let q2 = self.elbow * cos_q2.acos();
        let q1 = y.atan2(x) - (toyenv::ARM_L2 * q2.sin()).atan2(toyenv::ARM_L1 + toyenv::ARM_L2 * q2.cos());
        let wrap = |a: f64| {
            let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
            if a == -PI {
                a = PI;
            }
            a
        };
        [wrap(q1), q2]
    }
}

impl Script for FigureEightScript {
    fn act(&mut self, _state: &PrivilegedState, t: usize, dt: f64) -> [f64; ACT_DIM] {
        let q = self.target_joints(t as f64 * dt);
        [(q[0] / PI).clamp(-1.0, 1.0), (q[1] / PI).clamp(-1.0, 1.0)]
    }
}

fn rollout_script(
    cfg: &EnvConfig,
    script: &mut dyn Script,
    n_frames: usize,
) -> Result<Vec<Frame>, (String, Option<toyenv::EnvError>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // nominal config draws nothing
    let (mut state, _) = reset_nominal(cfg, &mut rng).map_err(|e| (e.to_string(), Some(e)))?;
    let mut frames = Vec::with_capacity(n_frames);
    let mut obs = toyenv::observe(&state, cfg, &mut rng);
    frames.push(record_frame(&state, &obs));
    for t in 0..n_frames - 1 {
        let a = script.act(&state, t, cfg.dt);
        let (next, o, _) = toyenv::step(&state, a, cfg, &mut rng).map_err(|e| (e.to_string(), Some(e)))?;
        state = next;
        obs = o;
        frames.push(record_frame(&state, &obs));
    }
    script.verify(&state).map_err(|d| (d, None))?;
    Ok(frames)
}

fn reset_nominal(
    cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PrivilegedState, Observation), toyenv::EnvError> {
    let (state, _) = toyenv::reset(cfg, InitSource::Default, rng)?;
    let obs = toyenv::observe(&state, cfg, rng);
    Ok((state, obs))
}

/// Generate `n_motions` scripted motions of `env_cfg.episode_len` frames each
/// under noiseless, nominal dynamics. Deterministic given `seed`.
pub fn generate_motion_set(
    env_cfg: &EnvConfig,
    generator_spec: GeneratorSpec,
    n_motions: usize,
    seed: u64,
) -> Result<MotionSet, MotionError> {
    if n_motions == 0 {
        return Err(MotionError::EmptyDataset);
    }
    env_cfg.validate()?;
    let cfg = env_cfg.nominal();
    let n_frames = cfg.episode_len.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut motions = Vec::with_capacity(n_motions);
    for i in 0..n_motions {
        let id = format!("{}_{:03}", generator_spec.tag(), i);
        let (mut script, params): (Box<dyn Script>, serde_json::Value) = match generator_spec {
            GeneratorSpec::WaypointLoops => {
                let mut waypoints: Vec<[f64; 2]> = (0..3)
                    .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
                    .collect();
                // Close the loop: the final target is the first waypoint.
                waypoints.push(waypoints[0]);
                let params = serde_json::json!({ "waypoints": waypoints });
                let script = WaypointScript {
                    waypoints,
                    current: 0,
                    n_steps: n_frames - 1,
                    reserve: ((n_frames - 1) / 2).min(80),
                };
                (Box::new(script), params)
            }
            GeneratorSpec::SinusoidJoints => {
                let amp = [rng.random_range(0.3..1.2), rng.random_range(0.3..1.2)];
                let omega = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
                let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
                let params = serde_json::json!({ "amp": amp, "omega": omega, "phase": phase });
                (Box::new(SinusoidScript { amp, omega, phase }), params)
            }
            GeneratorSpec::FigureEight => {
                let angle = rng.random_range(0.0..2.0 * PI);
                let center = [0.3 * angle.cos(), 0.3 * angle.sin()];
                let amp = [rng.random_range(0.35..0.55), rng.random_range(0.2..0.35)];
                let omega = rng.random_range(0.5..1.2);
                let elbow = if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
                let params =
                    serde_json::json!({ "center": center, "amp": amp, "omega": omega, "elbow": elbow });
                (Box::new(FigureEightScript { center, amp, omega, elbow }), params)
            }
        };
        let frames = rollout_script(&cfg, script.as_mut(), n_frames).map_err(|(detail, _)| {
            MotionError::GeneratorDiverged {
                generator: generator_spec.tag().to_string(),
                id: id.clone(),
                detail,
            }
        })?;
        motions.push(Motion {
            id,
            frames,
            source_params: SourceParams { generator: generator_spec.tag().to_string(), params },
        });
    }
    MotionSet::new(motions, env_cfg.env_kind)
}

/// Split every motion into consecutive chunks of `chunk_len`; a final
/// remainder shorter than `chunk_len / 2` is merged into the previous chunk.
/// Priorities reset to uniform.
pub fn chunk_motions(ms: &MotionSet, chunk_len: usize) -> Result<MotionSet, MotionError> {
    if chunk_len < 2 {
        return Err(MotionError::BadChunkLen(chunk_len));
    }
    let mut out = Vec::new();
    for m in ms.motions() {
        let n = m.frames.len();
        let mut bounds: Vec<usize> = (0..n / chunk_len).map(|k| (k + 1) * chunk_len).collect();
        let rem = n % chunk_len;
        if rem > 0 {
            // The two-frame minimum of the Motion invariant takes precedence
            // over the remainder rule.
            if (2 * rem >= chunk_len && rem >= 2) || bounds.is_empty() {
                bounds.push(n);
            } else {
                *bounds.last_mut().unwrap() = n;
            }
        }
        let mut start = 0;
        for (k, &end) in bounds.iter().enumerate() {
            out.push(Motion {
                id: format!("{}.{}", m.id, k),
                frames: m.frames[start..end].to_vec(),
                source_params: m.source_params.clone(),
            });
            start = end;
        }
    }
    MotionSet::new(out, ms.env_kind)
}

/// Sample a motion proportionally to its priority, then a frame uniformly
/// within it. Returns indices; see [`sample_frame`] for the id-keyed variant.
pub fn sample_frame_indices(ms: &MotionSet, rng: &mut ChaCha8Rng) -> Result<(usize, usize), MotionError> {
    if ms.is_empty() {
        return Err(MotionError::NoData);
    }
    let total: f64 = ms.priorities.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut idx = ms.len() - 1;
    for (i, &p) in ms.priorities.iter().enumerate() {
        if u < p {
            idx = i;
            break;
        }
        u -= p;
    }
    let frame = rng.random_range(0..ms.motions[idx].frames.len());
    Ok((idx, frame))
}

pub fn sample_frame(ms: &MotionSet, rng: &mut ChaCha8Rng) -> Result<(String, usize), MotionError> {
    let (i, f) = sample_frame_indices(ms, rng)?;
    Ok((ms.motions[i].id.clone(), f))
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    env: EnvKind,
    id: String,
    frames_dim_o: usize,
    frames_dim_s: usize,
    n_frames: usize,
    priority: f64,
    source: SourceParams,
}

fn fmt_f32_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{}", *v as f32);
    }
    out.push(']');
}

fn frame_line(frame: &Frame) -> String {
    let mut line = String::with_capacity(160);
    line.push_str("o:");
    fmt_f32_array(&mut line, &frame.obs.to_vec());
    line.push_str(" s:");
    fmt_f32_array(&mut line, &frame.state.features());
    line
}

/// Save a motion set in the line-delimited text format: per motion, a JSON
/// header line followed by one `o:[...] s:[...]` line per frame.
pub fn save_motion_set(ms: &MotionSet, path: &Path) -> Result<(), MotionError> {
    let io_err = |source| MotionError::Io { path: path.display().to_string(), source };
    let mut text = String::new();
    for (m, &priority) in ms.motions().iter().zip(ms.priorities()) {
        let header = Header {
            schema: 1,
            env: ms.env_kind,
            id: m.id.clone(),
            frames_dim_o: OBS_DIM,
            frames_dim_s: PRIV_DIM,
            n_frames: m.frames.len(),
            priority,
            source: m.source_params.clone(),
        };
        text.push_str(&serde_json::to_string(&header).expect("header serializes"));
        text.push('\n');
        for f in &m.frames {
            text.push_str(&frame_line(f));
            text.push('\n');
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

fn parse_f32_array(body: &str, line: usize, key: &str, want: usize) -> Result<Vec<f64>, MotionError> {
    let inner = body
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| MotionError::Parse { line, detail: format!("field `{key}` is not an array") })?;
    let mut out = Vec::with_capacity(want);
    if !inner.is_empty() {
        for tok in inner.split(',') {
            let v: f32 = tok.trim().parse().map_err(|_| MotionError::Parse {
                line,
                detail: format!("field `{key}`: bad float `{tok}`"),
            })?;
            out.push(v as f64);
        }
    }
    if out.len() != want {
        return Err(MotionError::Parse {
            line,
            detail: format!("field `{key}`: expected {want} values, got {}", out.len()),
        });
    }
    Ok(out)
}

fn parse_frame(line_no: usize, line: &str, step_index: usize) -> Result<Frame, MotionError> {
    let mut o: Option<Vec<f64>> = None;
    let mut s: Option<Vec<f64>> = None;
    for tok in line.split_whitespace() {
        let (key, body) = tok.split_once(':').ok_or_else(|| MotionError::Parse {
            line: line_no,
            detail: format!("malformed token `{tok}`"),
        })?;
        match key {
            "o" => o = Some(parse_f32_array(body, line_no, "o", OBS_DIM)?),
            "s" => s = Some(parse_f32_array(body, line_no, "s", PRIV_DIM)?),
            _ => {} // unknown fields ignored for forward compatibility
        }
    }
    let o = o.ok_or_else(|| MotionError::Parse { line: line_no, detail: "missing field `o`".into() })?;
    let s = s.ok_or_else(|| MotionError::Parse { line: line_no, detail: "missing field `s`".into() })?;
    Ok(Frame {
        obs: Observation { pose_err: [o[0], o[1]], velocity: [o[2], o[3]] },
        state: PrivilegedState {
            pose: [s[0], s[1]],
            velocity: [s[2], s[3]],
            prev_action: [s[4], s[5]],
            params: EpisodeParams {
                mass_scale: s[6],
                friction: s[7],
                gain_scale: s[8],
                action_offset: [s[9], s[10]],
            },
            step_index,
        },
    })
}

pub fn load_motion_set(path: &Path) -> Result<MotionSet, MotionError> {
    let io_err = |source| MotionError::Io { path: path.display().to_string(), source };
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut motions = Vec::new();
    let mut priorities = Vec::new();
    let mut env_kind: Option<EnvKind> = None;
    let mut current: Option<(Header, Vec<Frame>, usize)> = None;

    let mut finish = |cur: Option<(Header, Vec<Frame>, usize)>| -> Result<(), MotionError> {
        if let Some((h, frames, hdr_line)) = cur {
            if frames.len() != h.n_frames {
                return Err(MotionError::Parse {
                    line: hdr_line,
                    detail: format!(
                        "motion `{}` truncated: header declares {} frames, found {}",
                        h.id,
                        h.n_frames,
                        frames.len()
                    ),
                });
            }
            priorities.push(h.priority);
            motions.push(Motion { id: h.id, frames, source_params: h.source });
        }
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let header: Header = serde_json::from_str(line).map_err(|e| MotionError::Parse {
                line: line_no,
                detail: format!("bad header: {e}"),
            })?;
            if header.schema != 1 {
                return Err(MotionError::Parse {
                    line: line_no,
                    detail: format!("unsupported schema version {}", header.schema),
                });
            }
            if header.frames_dim_o != OBS_DIM || header.frames_dim_s != PRIV_DIM {
                return Err(MotionError::Parse {
                    line: line_no,
                    detail: format!(
                        "frame dims ({}, {}) do not match ({OBS_DIM}, {PRIV_DIM})",
                        header.frames_dim_o, header.frames_dim_s
                    ),
                });
            }
            match env_kind {
                None => env_kind = Some(header.env),
                Some(k) if k != header.env => {
                    return Err(MotionError::Parse {
                        line: line_no,
                        detail: "mixed env kinds in one file".into(),
                    });
                }
                _ => {}
            }
            finish(current.take())?;
            current = Some((header, Vec::new(), line_no));
        } else {
            let Some((_, frames, _)) = current.as_mut() else {
                return Err(MotionError::Parse {
                    line: line_no,
                    detail: "frame line before any header".into(),
                });
            };
            let step_index = frames.len();
            let frame = parse_frame(line_no, line, step_index)?;
            frames.push(frame);
        }
    }
    finish(current.take())?;

    let env_kind = env_kind.ok_or(MotionError::Parse { line: 0, detail: "empty file".into() })?;
    let mut ms = MotionSet::new(motions, env_kind)?;
    ms.set_priorities(priorities)?;
    Ok(ms)
}

/// Save then reload, returning the reloaded set. The result compares equal
/// to the input bit-for-bit.
pub fn persist_roundtrip(ms: &MotionSet, path: &Path) -> Result<MotionSet, MotionError> {
    save_motion_set(ms, path)?;
    load_motion_set(path)
}
