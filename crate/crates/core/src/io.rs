//! File formats: tracks, poses, keypoints and config inputs; CSV, PLY and
//! summary outputs. Every float is written with [`fmt_f64`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, Writer};

use crate::affordance::AffordanceField;
use crate::error::{Error, Result};
use crate::evaluation::{SweepRow, ValidationSample};
use crate::geometry::RgpSet;
use crate::mechanics::MechanicsRun;
use crate::model::{fmt_f64, JacobianAt, PointId, PointSample, RigidPose, TrackedScene, Vec3};
use crate::solver::{deviatoric_constraint, hydrostatic_constraint};

pub const DEFAULT_FPS: f64 = 30.0;

pub const TRACKS_HEADER: &[&str] = &["frame", "point_id", "x", "y", "z", "label"];
pub const POSES_HEADER: &[&str] = &["frame", "tx", "ty", "tz", "qw", "qx", "qy", "qz"];
pub const KEYPOINTS_HEADER: &[&str] = &["frame", "kp_id", "x", "y", "z"];
pub const AFFORDANCE_HEADER: &[&str] = &[
    "frame", "rgp_id", "x", "y", "z", "pace", "pacs", "pacs_smooth", "pae", "pas", "eig_min", "eig_max", "evx", "evy",
    "evz", "valid", "reason",
];
pub const STIFFNESS_HEADER: &[&str] =
    &["frame", "rgp_id", "eig1", "eig2", "eig3", "ev1x", "ev1y", "ev1z", "degenerate_flag"];
pub const DIAGNOSTICS_HEADER: &[&str] =
    &["frame", "rgp_id", "det_F", "tr_FtF", "c_hydro", "c_devia", "condition", "flag"];
pub const SWEEP_HEADER: &[&str] = &["iterations", "median_cos_compliant", "median_cos_baseline", "n_samples"];
pub const SAMPLES_HEADER: &[&str] = &["frame", "rgp_id", "cos_compliant", "cos_baseline", "excluded", "reason"];
pub const GROUND_TRUTH_HEADER: &[&str] = &["point_id", "gt_dir_x", "gt_dir_y", "gt_dir_z"];
pub const RGP_HEADER: &[&str] = &["rgp_id", "anchor_point_id", "x0", "y0", "z0", "label"];

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found = rdr.headers().map_err(|e| csv_error(path, e))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header '{}', found '{}'", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(rdr)
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Typed access to the fields of one record, reporting the file line on error.
struct Fields<'a> {
    path: &'a Path,
    line: usize,
    record: &'a StringRecord,
    header: &'a [&'a str],
}

impl Fields<'_> {
    fn raw(&self, i: usize) -> &str {
        self.record.get(i).unwrap_or("")
    }

    fn get<T: std::str::FromStr>(&self, i: usize) -> Result<T> {
        let s = self.raw(i);
        s.parse()
            .map_err(|_| Error::parse(self.path, self.line, format!("{}: cannot parse '{s}'", self.header[i])))
    }

    fn finite(&self, i: usize) -> Result<f64> {
        let v: f64 = self.get(i)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::parse(self.path, self.line, format!("{}: non-finite value", self.header[i])))
        }
    }

    fn vec3(&self, i: usize) -> Result<Vec3> {
        Ok(Vec3::new(self.finite(i)?, self.finite(i + 1)?, self.finite(i + 2)?))
    }
}

fn for_each_record(path: &Path, header: &[&str], mut f: impl FnMut(&Fields) -> Result<()>) -> Result<()> {
    let mut rdr = reader(path, header)?;
    let mut record = StringRecord::new();
    while rdr.read_record(&mut record).map_err(|e| csv_error(path, e))? {
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        f(&Fields {
            path,
            line,
            record: &record,
            header,
        })?;
    }
    Ok(())
}

/// Reads a tracks file. The frame count is one past the largest frame index.
pub fn read_tracks(path: &Path) -> Result<TrackedScene> {
    let mut obs = Vec::new();
    for_each_record(path, TRACKS_HEADER, |r| {
        let label = match r.raw(5) {
            "" => None,
            _ => Some(r.get(5)?),
        };
        obs.push((
            r.get::<usize>(0)?,
            PointId(r.get(1)?),
            PointSample {
                position: r.vec3(2)?,
                label,
            },
        ));
        Ok(())
    })?;
    let frames = obs.iter().map(|o| o.0 + 1).max().ok_or_else(|| Error::Scene(format!("{}: no rows", path.display())))?;
    TrackedScene::from_observations(frames, DEFAULT_FPS, obs)
}

/// Reads a poses file into one slot per frame; frames without a row are `None`.
pub fn read_poses(path: &Path) -> Result<Vec<Option<RigidPose>>> {
    let mut poses: Vec<Option<RigidPose>> = Vec::new();
    for_each_record(path, POSES_HEADER, |r| {
        let frame: usize = r.get(0)?;
        let t = r.vec3(1)?;
        let (qw, qx, qy, qz) = (r.finite(4)?, r.finite(5)?, r.finite(6)?, r.finite(7)?);
        let pose = RigidPose::from_quaternion(t, qw, qx, qy, qz)
            .map_err(|e| Error::parse(r.path, r.line, e.to_string()))?;
        if poses.len() <= frame {
            poses.resize(frame + 1, None);
        }
        if poses[frame].replace(pose).is_some() {
            return Err(Error::parse(r.path, r.line, format!("duplicate pose for frame {frame}")));
        }
        Ok(())
    })?;
    Ok(poses)
}

/// Reads a keypoints file; each frame's keypoints are ordered by `kp_id`.
pub fn read_keypoints(path: &Path) -> Result<Vec<Vec<Vec3>>> {
    let mut rows: Vec<Vec<(u32, Vec3)>> = Vec::new();
    for_each_record(path, KEYPOINTS_HEADER, |r| {
        let frame: usize = r.get(0)?;
        let kp: u32 = r.get(1)?;
        let p = r.vec3(2)?;
        if rows.len() <= frame {
            rows.resize(frame + 1, Vec::new());
        }
        if rows[frame].iter().any(|(k, _)| *k == kp) {
            return Err(Error::parse(r.path, r.line, format!("duplicate keypoint {kp} at frame {frame}")));
        }
        rows[frame].push((kp, p));
        Ok(())
    })?;
    Ok(rows
        .into_iter()
        .map(|mut f| {
            f.sort_by_key(|(k, _)| *k);
            f.into_iter().map(|(_, p)| p).collect()
        })
        .collect())
}

/// `(line, key, value)` entries of a `key = value` file. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_key_values(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(path, &text)
}

pub fn parse_key_values(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, format!("expected 'key = value', found '{line}'")))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Collects the paths written by a command so they can be removed on failure.
#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Registers `name` under the output directory, creating parents.
    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn remove_all(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn writer(path: &Path, header: &[&str]) -> Result<Writer<File>> {
    let mut w = Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    Ok(w)
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path, header)?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub fn write_tracks(path: &Path, scene: &TrackedScene) -> Result<()> {
    let rows = (0..scene.frame_count()).flat_map(|t| {
        scene.present(t).map(move |(slot, s)| {
            vec![
                t.to_string(),
                scene.id(slot).to_string(),
                fmt_f64(s.position.x),
                fmt_f64(s.position.y),
                fmt_f64(s.position.z),
                s.label.map(|l| l.to_string()).unwrap_or_default(),
            ]
        })
    });
    write_rows(path, TRACKS_HEADER, rows)
}

pub fn write_poses(path: &Path, poses: &[Option<RigidPose>]) -> Result<()> {
    let rows = poses.iter().enumerate().filter_map(|(t, p)| {
        let p = p.as_ref()?;
        let o = p.origin();
        let q = p.quaternion();
        Some(
            [t.to_string()]
                .into_iter()
                .chain([o.x, o.y, o.z, q[0], q[1], q[2], q[3]].map(fmt_f64))
                .collect(),
        )
    });
    write_rows(path, POSES_HEADER, rows)
}

pub fn write_ground_truth(path: &Path, gt: &[(PointId, Vec3)]) -> Result<()> {
    let rows = gt
        .iter()
        .map(|(id, d)| vec![id.to_string(), fmt_f64(d.x), fmt_f64(d.y), fmt_f64(d.z)]);
    write_rows(path, GROUND_TRUTH_HEADER, rows)
}

pub fn write_rgps(path: &Path, scene: &TrackedScene, rgps: &RgpSet) -> Result<()> {
    let rows = rgps.iter().map(|r| {
        let p = scene.position(0, r.anchor_slot).unwrap_or_default();
        vec![
            r.id.to_string(),
            r.anchor.to_string(),
            fmt_f64(p.x),
            fmt_f64(p.y),
            fmt_f64(p.z),
            r.label_at_selection.map(|l| l.to_string()).unwrap_or_default(),
        ]
    });
    write_rows(path, RGP_HEADER, rows)
}

/// Affordance rows, frame-major. With `normalized` a trailing `pacs_norm`
/// column is added.
pub fn write_affordance(path: &Path, field: &AffordanceField, normalized: bool) -> Result<()> {
    let mut header = AFFORDANCE_HEADER.to_vec();
    if normalized {
        header.push("pacs_norm");
    }
    let rows = field.rows.iter().map(|r| {
        let p = r.position;
        let e = r.compliant;
        let mut row = vec![
            r.frame.to_string(),
            r.rgp.to_string(),
            opt(p.map(|p| p.x)),
            opt(p.map(|p| p.y)),
            opt(p.map(|p| p.z)),
            opt(r.pace),
            opt(r.pacs),
            opt(r.pacs_smooth),
            opt(r.pae),
            opt(r.pas),
            opt(r.eig_min),
            opt(r.eig_max),
            opt(e.map(|e| e.x)),
            opt(e.map(|e| e.y)),
            opt(e.map(|e| e.z)),
            flag(r.valid),
            r.reason.code().to_string(),
        ];
        if normalized {
            row.push(opt(r.pacs_norm));
        }
        row
    });
    write_rows(path, &header, rows)
}

/// Stiffness eigen-decomposition of every active (frame, RGP).
pub fn write_stiffness(path: &Path, mech: &MechanicsRun) -> Result<()> {
    let rows = mech.frames.iter().flatten().filter_map(|s| {
        let m = s.mechanics.as_ref()?;
        let ev = m.stiffness.eigenvalues;
        let e = m.compliant.direction;
        Some(vec![
            s.frame.to_string(),
            s.rgp.to_string(),
            fmt_f64(ev[0]),
            fmt_f64(ev[1]),
            fmt_f64(ev[2]),
            fmt_f64(e.x),
            fmt_f64(e.y),
            fmt_f64(e.z),
            flag(m.compliant.degenerate),
        ])
    });
    write_rows(path, STIFFNESS_HEADER, rows)
}

/// Constraint state at the deformation gradient the stiffness metric used.
/// `flag` is the RGP status code, or `regularized` for a Tikhonov-regularized
/// moment matrix.
pub fn write_diagnostics(path: &Path, mech: &MechanicsRun, at: JacobianAt) -> Result<()> {
    let rows = mech.frames.iter().flatten().map(|s| {
        let mut row = vec![s.frame.to_string(), s.rgp.to_string()];
        match &s.mechanics {
            None => {
                row.extend(std::iter::repeat_n(String::new(), 5));
                row.push(s.status.code().to_string());
            }
            Some(m) => {
                let f = m.f_used(at);
                row.extend([
                    fmt_f64(f.determinant()),
                    fmt_f64((f.transpose() * f).trace()),
                    fmt_f64(hydrostatic_constraint(f)),
                    fmt_f64(deviatoric_constraint(f)),
                    fmt_f64(m.moment.condition),
                ]);
                row.push(if m.moment.regularized { "regularized" } else { s.status.code() }.to_string());
            }
        }
        row
    });
    write_rows(path, DIAGNOSTICS_HEADER, rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let rows = rows.iter().map(|r| {
        vec![
            r.iterations.to_string(),
            fmt_f64(r.summary.median_cos_compliant),
            opt(r.summary.median_cos_baseline),
            r.summary.n_samples.to_string(),
        ]
    });
    write_rows(path, SWEEP_HEADER, rows)
}

pub fn write_samples(path: &Path, samples: &[ValidationSample]) -> Result<()> {
    let rows = samples.iter().map(|s| {
        vec![
            s.frame.to_string(),
            s.rgp.to_string(),
            opt(s.cos_compliant),
            opt(s.cos_baseline),
            flag(s.excluded.is_some()),
            s.excluded.map(|e| e.code()).unwrap_or("ok").to_string(),
        ]
    });
    write_rows(path, SAMPLES_HEADER, rows)
}

/// Blue (low) to red (high) ramp over `[0, 1]`.
pub fn score_color(s: f64) -> [u8; 3] {
    let s = if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 };
    [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8]
}

/// ASCII PLY of one frame's scored RGP positions, colored by per-frame
/// min-max normalized score; a constant frame is colored as 0.
pub fn write_ply(path: &Path, points: &[(Vec3, f64)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, s)| (lo.min(*s), hi.max(*s)));
    let mut body = String::new();
    body.push_str("ply\nformat ascii 1.0\n");
    body.push_str(&format!("element vertex {}\n", points.len()));
    for p in ["x", "y", "z", "score"] {
        body.push_str(&format!("property double {p}\n"));
    }
    for c in ["red", "green", "blue"] {
        body.push_str(&format!("property uchar {c}\n"));
    }
    body.push_str("end_header\n");
    for (p, s) in points {
        let norm = if hi > lo { (s - lo) / (hi - lo) } else { 0.0 };
        let [r, g, b] = score_color(norm);
        body.push_str(&format!(
            "{} {} {} {} {r} {g} {b}\n",
            fmt_f64(p.x),
            fmt_f64(p.y),
            fmt_f64(p.z),
            fmt_f64(*s)
        ));
    }
    w.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text run summary: `key = value` sections for the command, counts,
/// configuration echo and timings, then one warning per line.
#[derive(Debug, Default, Clone)]
pub struct RunSummary {
    pub command: String,
    pub counts: Vec<(String, String)>,
    pub config: Vec<(String, String)>,
    pub timings: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn render(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        s.push_str("\n[counts]\n");
        for (k, v) in &self.counts {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("\n[config]\n");
        for (k, v) in &self.config {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("\n[timings]\n");
        for (k, v) in &self.timings {
            s.push_str(&format!("{k}_seconds = {v:.6}\n"));
        }
        s.push_str("\n[warnings]\n");
        for w in &self.warnings {
            s.push_str(&format!("{w}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
