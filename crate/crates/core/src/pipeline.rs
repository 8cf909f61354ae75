//! Command orchestration: settings resolution, the `affordance`, `validate`,
//! `sweep` and `synth` commands, and their output sets.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use crate::affordance::compute_affordance_field;
use crate::error::{Error, Result};
use crate::evaluation::{
    generate_anisotropic_sheet, generate_tool_interaction_scene, iteration_sweep, summarize, validation_samples,
    SheetParams, SweepRow, SyntheticScene, ToolSceneParams,
};
use crate::io::{self, Outputs, RunSummary};
use crate::kinematics::ToolTrajectory;
use crate::mechanics::{run_mechanics, MechanicsRun, RgpStatus};
use crate::model::{fmt_f64, RigidPose, RunConfig, TrackedScene, Vec3, CONFIG_KEYS};

pub const AFFORDANCE_CSV: &str = "affordance.csv";
pub const STIFFNESS_CSV: &str = "stiffness.csv";
pub const DIAGNOSTICS_CSV: &str = "solver_diagnostics.csv";
pub const RGPS_CSV: &str = "rgps.csv";
pub const DERIVED_POSES_CSV: &str = "derived_poses.csv";
pub const SAMPLES_CSV: &str = "validation_samples.csv";
pub const VALIDATION_CSV: &str = "validation_summary.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const TRACKS_CSV: &str = "tracks.csv";
pub const POSES_CSV: &str = "poses.csv";
pub const GROUND_TRUTH_CSV: &str = "ground_truth.csv";
pub const SUMMARY_TXT: &str = "run_summary.txt";
pub const DEFAULT_SWEEP: &[usize] = &[1, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Sheet,
    Tool,
}

/// Generator parameters read from `synth_*` config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub kind: SynthKind,
    pub sheet: SheetParams,
    pub tool: ToolSceneParams,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sheet,
            sheet: SheetParams::default(),
            tool: ToolSceneParams::default(),
        }
    }
}

pub const SYNTH_KEYS: &[&str] = &[
    "synth_kind",
    "synth_n",
    "synth_spacing",
    "synth_noise",
    "synth_frames",
    "synth_axis",
    "synth_amplitude",
    "synth_period",
    "synth_approach_frames",
    "synth_hold_frames",
    "synth_rotate_frames",
    "synth_pull_frames",
    "synth_contact_radius",
    "synth_approach_speed",
    "synth_rotate_rate",
    "synth_pull_speed",
    "synth_pull_direction",
    "synth_physio_amplitude",
    "synth_physio_period",
];

fn parse_vec3(key: &str, value: &str) -> std::result::Result<Vec3, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let nums: Option<Vec<f64>> = parts.iter().map(|p| p.parse().ok()).collect();
    match nums.as_deref() {
        Some([x, y, z]) => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("{key}: expected 'x,y,z', got '{value}'")),
    }
}

fn fmt_vec3(v: &Vec3) -> String {
    format!("{},{},{}", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z))
}

impl SynthSettings {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))
        }
        let (s, t) = (&mut self.sheet, &mut self.tool);
        match key {
            "synth_kind" => {
                self.kind = match value {
                    "sheet" => SynthKind::Sheet,
                    "tool" => SynthKind::Tool,
                    _ => return Err(format!("synth_kind: expected sheet|tool, got '{value}'")),
                }
            }
            "synth_n" => (s.n, t.n) = (num(key, value)?, num(key, value)?),
            "synth_spacing" => (s.spacing, t.spacing) = (num(key, value)?, num(key, value)?),
            "synth_noise" => (s.noise, t.noise) = (num(key, value)?, num(key, value)?),
            "synth_frames" => s.frames = num(key, value)?,
            "synth_axis" => s.axis = parse_vec3(key, value)?,
            "synth_amplitude" => s.amplitude = num(key, value)?,
            "synth_period" => s.period = num(key, value)?,
            "synth_approach_frames" => t.approach_frames = num(key, value)?,
            "synth_hold_frames" => t.hold_frames = num(key, value)?,
            "synth_rotate_frames" => t.rotate_frames = num(key, value)?,
            "synth_pull_frames" => t.pull_frames = num(key, value)?,
            "synth_contact_radius" => t.contact_radius = num(key, value)?,
            "synth_approach_speed" => t.approach_speed = num(key, value)?,
            "synth_rotate_rate" => t.rotate_rate = num(key, value)?,
            "synth_pull_speed" => t.pull_speed = num(key, value)?,
            "synth_pull_direction" => t.pull_direction = parse_vec3(key, value)?,
            "synth_physio_amplitude" => t.physio_amplitude = num(key, value)?,
            "synth_physio_period" => t.physio_period = num(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Echo of the parameters of the selected generator.
    pub fn echo(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        match self.kind {
            SynthKind::Sheet => {
                let s = &self.sheet;
                vec![
                    kv("synth_kind", "sheet".into()),
                    kv("synth_n", s.n.to_string()),
                    kv("synth_spacing", fmt_f64(s.spacing)),
                    kv("synth_noise", fmt_f64(s.noise)),
                    kv("synth_frames", s.frames.to_string()),
                    kv("synth_axis", fmt_vec3(&s.axis)),
                    kv("synth_amplitude", fmt_f64(s.amplitude)),
                    kv("synth_period", fmt_f64(s.period)),
                ]
            }
            SynthKind::Tool => {
                let t = &self.tool;
                vec![
                    kv("synth_kind", "tool".into()),
                    kv("synth_n", t.n.to_string()),
                    kv("synth_spacing", fmt_f64(t.spacing)),
                    kv("synth_noise", fmt_f64(t.noise)),
                    kv("synth_approach_frames", t.approach_frames.to_string()),
                    kv("synth_hold_frames", t.hold_frames.to_string()),
                    kv("synth_rotate_frames", t.rotate_frames.to_string()),
                    kv("synth_pull_frames", t.pull_frames.to_string()),
                    kv("synth_contact_radius", fmt_f64(t.contact_radius)),
                    kv("synth_approach_speed", fmt_f64(t.approach_speed)),
                    kv("synth_rotate_rate", fmt_f64(t.rotate_rate)),
                    kv("synth_pull_speed", fmt_f64(t.pull_speed)),
                    kv("synth_pull_direction", fmt_vec3(&t.pull_direction)),
                    kv("synth_physio_amplitude", fmt_f64(t.physio_amplitude)),
                    kv("synth_physio_period", fmt_f64(t.physio_period)),
                ]
            }
        }
    }
}

/// Inputs and options of one command invocation.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub tracks: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub iterations: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub run: RunConfig,
    pub synth: SynthSettings,
}

impl Settings {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if key.starts_with("synth_") {
            self.synth.set(key, value)
        } else {
            self.run.set(key, value)
        }
    }
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override '{s}' is not key=value")]))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Defaults, then the config file, then overrides, then `--seed`; every
/// problem is reported at once.
pub fn load_settings(m: &Manifest) -> Result<Settings> {
    let mut settings = Settings::default();
    let mut errs = Vec::new();
    if let Some(path) = &m.config {
        for (line, k, v) in io::read_key_values(path)? {
            if let Err(e) = settings.set(&k, &v) {
                errs.push(format!("{}:{line}: {e}", path.display()));
            }
        }
    }
    for (k, v) in &m.overrides {
        if let Err(e) = settings.set(k, v) {
            errs.push(format!("override: {e}"));
        }
    }
    if let Some(seed) = m.seed {
        settings.run.seed = seed;
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    settings.run = settings.run.validate()?;
    Ok(settings)
}

/// Files written and the summary of a finished command.
#[derive(Debug)]
pub struct CommandReport {
    pub outputs: Vec<PathBuf>,
    pub summary: RunSummary,
}

/// Runs `body` against a fresh output set, removing everything it wrote if
/// it fails.
fn with_outputs(out: &Path, body: impl FnOnce(&mut Outputs) -> Result<RunSummary>) -> Result<CommandReport> {
    let mut outputs = Outputs::new(out)?;
    match body(&mut outputs) {
        Ok(summary) => Ok(CommandReport {
            outputs: outputs.written().to_vec(),
            summary,
        }),
        Err(e) => {
            outputs.remove_all();
            Err(e)
        }
    }
}

fn require_tracks(m: &Manifest) -> Result<TrackedScene> {
    let path = m
        .tracks
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["--tracks is required".into()]))?;
    io::read_tracks(path)
}

/// Tool trajectory from exactly one of `--poses` or `--keypoints`, matched to
/// the scene's frame count.
fn load_tool(m: &Manifest, frames: usize, warnings: &mut Vec<String>) -> Result<ToolTrajectory> {
    let mut poses = match (&m.poses, &m.keypoints) {
        (None, None) => return Err(Error::NoToolPoseSource),
        (Some(_), Some(_)) => {
            return Err(Error::Config(vec!["exactly one of --poses and --keypoints may be given".into()]))
        }
        (Some(p), None) => io::read_poses(p)?,
        (None, Some(k)) => {
            let tool = ToolTrajectory::from_keypoints(&io::read_keypoints(k)?)?;
            for (t, p) in tool.poses.iter().enumerate() {
                if p.is_none() {
                    warnings.push(format!("frame {t}: no tool pose from keypoints"));
                }
            }
            tool.poses
        }
    };
    if poses.len() != frames {
        warnings.push(format!("tool poses cover {} frames, scene has {frames}", poses.len()));
        poses.resize(frames, None);
    }
    ToolTrajectory::from_poses(poses)
}

fn config_echo(cfg: &RunConfig) -> Vec<(String, String)> {
    CONFIG_KEYS
        .iter()
        .map(|k| (k.to_string(), cfg.get(k).unwrap_or_default()))
        .collect()
}

fn status_counts(mech: &MechanicsRun) -> Vec<(String, String)> {
    let statuses = [
        RgpStatus::Active,
        RgpStatus::AnchorAbsent,
        RgpStatus::InsufficientNeighbors,
        RgpStatus::SolverNonFinite,
    ];
    statuses
        .iter()
        .map(|s| {
            let n = mech.frames.iter().flatten().filter(|x| x.status == *s).count();
            (format!("states_{}", s.code()), n.to_string())
        })
        .collect()
}

fn log_warnings(warnings: &[String]) {
    for w in warnings {
        warn!("{w}");
    }
}

pub fn cmd_affordance(m: &Manifest) -> Result<CommandReport> {
    if m.poses.is_none() && m.keypoints.is_none() {
        return Err(Error::NoToolPoseSource);
    }
    let settings = load_settings(m)?;
    with_outputs(&m.out, |out| {
        let start = Instant::now();
        let scene = require_tracks(m)?;
        let mut warnings = Vec::new();
        let tool = load_tool(m, scene.frame_count(), &mut warnings)?;
        let cfg = settings.run.resolved_for(&scene);
        let loaded = start.elapsed().as_secs_f64();

        let t = Instant::now();
        let mech = run_mechanics(&scene, &cfg)?;
        warnings.extend(mech.warnings.iter().cloned());
        let mechanics_time = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let field = compute_affordance_field(&scene, &mech, &tool, &cfg);
        let affordance_time = t.elapsed().as_secs_f64();
        let nonfinite = field
            .rows
            .iter()
            .flat_map(|r| [r.pace, r.pacs_smooth, r.pae])
            .flatten()
            .any(|v| !v.is_finite());
        if nonfinite {
            return Err(Error::Numerical("non-finite affordance score".into()));
        }
        let failed = mech
            .frames
            .iter()
            .flatten()
            .filter(|s| s.status == RgpStatus::SolverNonFinite)
            .count();
        if failed > 0 {
            warnings.push(format!("{failed} RGP states hit a non-finite solve"));
        }

        let t = Instant::now();
        io::write_affordance(&out.path(AFFORDANCE_CSV)?, &field, cfg.normalized_column)?;
        io::write_stiffness(&out.path(STIFFNESS_CSV)?, &mech)?;
        io::write_diagnostics(&out.path(DIAGNOSTICS_CSV)?, &mech, cfg.jacobian_at)?;
        io::write_rgps(&out.path(RGPS_CSV)?, &scene, &mech.rgps)?;
        if m.keypoints.is_some() {
            io::write_poses(&out.path(DERIVED_POSES_CSV)?, &tool.poses)?;
        }
        for frame in 0..field.frame_count {
            let points: Vec<(Vec3, f64)> = field
                .frame(frame)
                .iter()
                .filter_map(|r| Some((r.position?, r.pacs?)))
                .collect();
            io::write_ply(&out.path(&format!("ply/frame_{frame:05}.ply"))?, &points)?;
        }
        let write_time = t.elapsed().as_secs_f64();

        log_warnings(&warnings);
        let valid = field.rows.iter().filter(|r| r.valid).count();
        let mut counts = vec![
            ("frames".to_string(), scene.frame_count().to_string()),
            ("points".to_string(), scene.point_count().to_string()),
            ("rgps".to_string(), mech.rgp_count().to_string()),
            ("rows".to_string(), field.rows.len().to_string()),
            ("valid_rows".to_string(), valid.to_string()),
        ];
        counts.extend(status_counts(&mech));
        let summary = RunSummary {
            command: "affordance".into(),
            counts,
            config: config_echo(&cfg),
            timings: vec![
                ("load".into(), loaded),
                ("mechanics".into(), mechanics_time),
                ("affordance".into(), affordance_time),
                ("write".into(), write_time),
                ("total".into(), start.elapsed().as_secs_f64()),
            ],
            warnings,
        };
        summary.write(&out.path(SUMMARY_TXT)?)?;
        info!("affordance: {} rows written to {}", field.rows.len(), out.dir().display());
        Ok(summary)
    })
}

fn sweep_row_for(iterations: usize, samples: &[crate::evaluation::ValidationSample]) -> Result<SweepRow> {
    Ok(SweepRow {
        iterations,
        summary: summarize(samples)?,
    })
}

fn validation_counts(row: &SweepRow) -> Vec<(String, String)> {
    vec![
        ("n_samples".into(), row.summary.n_samples.to_string()),
        ("n_baseline".into(), row.summary.n_baseline.to_string()),
        ("median_cos_compliant".into(), fmt_f64(row.summary.median_cos_compliant)),
        (
            "median_cos_baseline".into(),
            row.summary.median_cos_baseline.map(fmt_f64).unwrap_or_default(),
        ),
    ]
}

pub fn cmd_validate(m: &Manifest) -> Result<CommandReport> {
    let settings = load_settings(m)?;
    with_outputs(&m.out, |out| {
        let start = Instant::now();
        let scene = require_tracks(m)?;
        let cfg = settings.run.resolved_for(&scene);
        let mech = run_mechanics(&scene, &cfg)?;
        let samples = validation_samples(&scene, &mech);
        let row = sweep_row_for(cfg.solver_iterations, &samples)?;
        io::write_samples(&out.path(SAMPLES_CSV)?, &samples)?;
        io::write_sweep(&out.path(VALIDATION_CSV)?, &[row])?;
        log_warnings(&mech.warnings);
        let mut counts = vec![
            ("frames".to_string(), scene.frame_count().to_string()),
            ("points".to_string(), scene.point_count().to_string()),
            ("rgps".to_string(), mech.rgp_count().to_string()),
        ];
        counts.extend(validation_counts(&row));
        let summary = RunSummary {
            command: "validate".into(),
            counts,
            config: config_echo(&cfg),
            timings: vec![("total".into(), start.elapsed().as_secs_f64())],
            warnings: mech.warnings.clone(),
        };
        summary.write(&out.path(SUMMARY_TXT)?)?;
        Ok(summary)
    })
}

pub fn cmd_sweep(m: &Manifest) -> Result<CommandReport> {
    let settings = load_settings(m)?;
    let iterations = m.iterations.clone().unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
    with_outputs(&m.out, |out| {
        let start = Instant::now();
        let scene = require_tracks(m)?;
        let cfg = settings.run.resolved_for(&scene);
        let rows = iteration_sweep(&scene, &iterations, &cfg)?;
        io::write_sweep(&out.path(SWEEP_CSV)?, &rows)?;
        let mut counts = vec![
            ("frames".to_string(), scene.frame_count().to_string()),
            ("points".to_string(), scene.point_count().to_string()),
        ];
        for r in &rows {
            counts.push((
                format!("median_cos_compliant_{}", r.iterations),
                fmt_f64(r.summary.median_cos_compliant),
            ));
        }
        let summary = RunSummary {
            command: "sweep".into(),
            counts,
            config: config_echo(&cfg),
            timings: vec![("total".into(), start.elapsed().as_secs_f64())],
            warnings: Vec::new(),
        };
        summary.write(&out.path(SUMMARY_TXT)?)?;
        Ok(summary)
    })
}

/// Tool poses for a sheet scene: a fixed orientation gliding along the
/// stretch axis above the sheet.
fn sheet_tool_poses(params: &SheetParams) -> Vec<Option<RigidPose>> {
    let a = params.axis.try_normalize(0.0).unwrap_or_else(Vec3::x);
    let height = Vec3::z() * (params.n as f64 * params.spacing);
    (0..params.frames)
        .map(|t| Some(RigidPose::identity_at(height + a * (t as f64 * params.spacing))))
        .collect()
}

/// Generates the configured synthetic scene.
pub fn synthesize(settings: &Settings) -> Result<(SyntheticScene, Vec<Option<RigidPose>>)> {
    let seed = settings.run.seed;
    match settings.synth.kind {
        SynthKind::Sheet => {
            let s = generate_anisotropic_sheet(&settings.synth.sheet, seed)?;
            Ok((s, sheet_tool_poses(&settings.synth.sheet)))
        }
        SynthKind::Tool => {
            let (s, tool) = generate_tool_interaction_scene(&settings.synth.tool, seed)?;
            Ok((s, tool.poses))
        }
    }
}

pub fn cmd_synth(m: &Manifest) -> Result<CommandReport> {
    let settings = load_settings(m)?;
    with_outputs(&m.out, |out| {
        let start = Instant::now();
        let (synth, poses) = synthesize(&settings)?;
        io::write_tracks(&out.path(TRACKS_CSV)?, &synth.scene)?;
        io::write_poses(&out.path(POSES_CSV)?, &poses)?;
        io::write_ground_truth(&out.path(GROUND_TRUTH_CSV)?, &synth.ground_truth)?;
        let mut config = settings.synth.echo();
        config.push(("seed".into(), synth.seed.to_string()));
        let summary = RunSummary {
            command: "synth".into(),
            counts: vec![
                ("frames".into(), synth.scene.frame_count().to_string()),
                ("points".into(), synth.scene.point_count().to_string()),
            ],
            config,
            timings: vec![("total".into(), start.elapsed().as_secs_f64())],
            warnings: Vec::new(),
        };
        summary.write(&out.path(SUMMARY_TXT)?)?;
        Ok(summary)
    })
}
