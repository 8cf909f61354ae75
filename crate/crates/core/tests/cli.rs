mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pacs::evaluation::{generate_anisotropic_sheet, SheetParams};
use pacs::io::{read_tracks, write_poses, write_tracks};
use pacs::model::Vec3;

fn pacs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacs")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count() - 1
}

fn summary_value(dir: &Path, key: &str) -> Option<String> {
    let text = std::fs::read_to_string(dir.join("run_summary.txt")).unwrap();
    text.lines()
        .find_map(|l| l.split_once(" = ").filter(|(k, _)| *k == key).map(|(_, v)| v.to_string()))
}

fn summary_warnings(dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("run_summary.txt")).unwrap();
    text.split("[warnings]\n").nth(1).unwrap().lines().map(str::to_string).collect()
}

fn synth_tool(dir: &Path) -> (PathBuf, PathBuf) {
    let out = dir.join("synth");
    let o = pacs(&["synth", "--out", s(&out), "--override", "synth_kind=tool", "--override", "synth_n=30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    (out.join("tracks.csv"), out.join("poses.csv"))
}

#[test]
fn affordance_writes_every_product() {
    let dir = tempfile::tempdir().unwrap();
    let (tracks, poses) = synth_tool(dir.path());
    let out = dir.path().join("aff");
    let o = pacs(&[
        "affordance",
        "--tracks",
        s(&tracks),
        "--poses",
        s(&poses),
        "--out",
        s(&out),
        "--override",
        "lambda_ema=0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["affordance.csv", "stiffness.csv", "solver_diagnostics.csv", "rgps.csv", "run_summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let frames: usize = summary_value(&out, "frames").unwrap().parse().unwrap();
    let rgps: usize = summary_value(&out, "rgps").unwrap().parse().unwrap();
    assert!(rgps > 0);
    assert_eq!(data_rows(&out.join("affordance.csv")), frames * rgps);
    assert_eq!(data_rows(&out.join("solver_diagnostics.csv")), frames * rgps);
    assert_eq!(data_rows(&out.join("rgps.csv")), rgps);
    assert_eq!(std::fs::read_dir(out.join("ply")).unwrap().count(), frames);
    let echoed: f64 = summary_value(&out, "lambda_ema").unwrap().parse().unwrap();
    assert_eq!(echoed, 0.5);
    let header = std::fs::read_to_string(out.join("affordance.csv")).unwrap();
    assert!(header.starts_with(
        "frame,rgp_id,x,y,z,pace,pacs,pacs_smooth,pae,pas,eig_min,eig_max,evx,evy,evz,valid,reason\n"
    ));
}

#[test]
fn synthetic_round_trip_has_no_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    let o = pacs(&["synth", "--out", s(&synth), "--override", "synth_noise=1e-5", "--override", "synth_frames=30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (tracks, poses) = (synth.join("tracks.csv"), synth.join("poses.csv"));
    let (a, v) = (dir.path().join("a"), dir.path().join("v"));
    let o = pacs(&["affordance", "--tracks", s(&tracks), "--poses", s(&poses), "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pacs(&["validate", "--tracks", s(&tracks), "--out", s(&v)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(summary_warnings(&a), Vec::<String>::new());
    assert_eq!(summary_warnings(&v), Vec::<String>::new());
    assert!(data_rows(&v.join("validation_samples.csv")) > 0);
    assert_eq!(data_rows(&v.join("validation_summary.csv")), 1);
}

#[test]
fn missing_pose_source_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let (tracks, _) = synth_tool(dir.path());
    let o = pacs(&["affordance", "--tracks", s(&tracks), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("no tool pose source"), "{err}");
}

#[test]
fn both_pose_sources_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (tracks, poses) = synth_tool(dir.path());
    let o = pacs(&[
        "affordance",
        "--tracks",
        s(&tracks),
        "--poses",
        s(&poses),
        "--keypoints",
        s(&poses),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn keypoints_drive_the_tool() {
    let dir = tempfile::tempdir().unwrap();
    let (tracks, _) = synth_tool(dir.path());
    let frames = read_tracks(&tracks).unwrap().frame_count();
    let kp = dir.path().join("kp.csv");
    let mut text = String::from("frame,kp_id,x,y,z\n");
    for t in 0..frames {
        let tip = Vec3::new(0.0, 0.0, 0.01 - 0.0002 * t as f64);
        for (k, d) in [0.0, 0.01, 0.02, 0.03].iter().enumerate() {
            let p = tip + Vec3::new(0.2 * d, 0.0, *d);
            text.push_str(&format!("{t},{k},{},{},{}\n", p.x, p.y, p.z));
        }
    }
    std::fs::write(&kp, text).unwrap();
    let out = dir.path().join("a");
    let o = pacs(&["affordance", "--tracks", s(&tracks), "--keypoints", s(&kp), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("derived_poses.csv")), frames);
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (tracks, _) = synth_tool(dir.path());
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "lamda_ema = 0.5\n").unwrap();
    let o = pacs(&["validate", "--tracks", s(&tracks), "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key 'lamda_ema'"));
}

#[test]
fn synth_rejects_small_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = pacs(&["synth", "--out", s(&out), "--override", "synth_n=2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid too small"));
    assert!(!out.join("tracks.csv").exists());
}

#[test]
fn synth_sheet_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = pacs(&["synth", "--out", s(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let expected = generate_anisotropic_sheet(&SheetParams::default(), 3).unwrap();
    assert_eq!(read_tracks(&out.join("tracks.csv")).unwrap(), expected.scene);
    assert_eq!(data_rows(&out.join("ground_truth.csv")), expected.scene.point_count());
    assert_eq!(data_rows(&out.join("poses.csv")), expected.scene.frame_count());
}

#[test]
fn synth_seed_changes_noise_not_topology() {
    let dir = tempfile::tempdir().unwrap();
    let scenes: Vec<_> = ["1", "2"]
        .iter()
        .map(|seed| {
            let out = dir.path().join(seed);
            let o = pacs(&["synth", "--out", s(&out), "--seed", seed, "--override", "synth_noise=1e-5"]);
            assert!(o.status.success(), "{}", stderr(&o));
            read_tracks(&out.join("tracks.csv")).unwrap()
        })
        .collect();
    assert_ne!(scenes[0], scenes[1]);
    assert_eq!(scenes[0].ids(), scenes[1].ids());
    assert_eq!(scenes[0].frame_count(), scenes[1].frame_count());
}

#[test]
fn sweep_writes_one_row_per_iteration_count() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    let o = pacs(&["synth", "--out", s(&synth), "--override", "synth_noise=1e-5", "--override", "synth_frames=30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("sweep");
    let o = pacs(&["sweep", "--tracks", s(&synth.join("tracks.csv")), "--iterations", "1,5,10,20", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iterations,median_cos_compliant,median_cos_baseline,n_samples");
    let its: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(its, ["1", "5", "10", "20"]);
}

#[test]
fn frozen_scene_has_no_samples_and_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let frozen = common::blob(300, 1, 0.01, 4);
    let frames: Vec<Vec<Vec3>> = (0..5)
        .map(|_| (0..frozen.point_count()).map(|k| frozen.position(0, k).unwrap()).collect())
        .collect();
    let scene = pacs::model::TrackedScene::from_dense(30.0, &frames, None).unwrap();
    let tracks = dir.path().join("t.csv");
    write_tracks(&tracks, &scene).unwrap();
    let out = dir.path().join("v");
    let o = pacs(&["validate", "--tracks", s(&tracks), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no valid validation samples"));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn pose_frame_mismatch_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let (tracks, _) = synth_tool(dir.path());
    let frames = read_tracks(&tracks).unwrap().frame_count();
    let tool = common::tool_path(frames - 3, Vec3::zeros(), 0.01);
    let poses = dir.path().join("short.csv");
    write_poses(&poses, &tool.poses).unwrap();
    let out = dir.path().join("a");
    let o = pacs(&["affordance", "--tracks", s(&tracks), "--poses", s(&poses), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let w = summary_warnings(&out);
    assert!(w.iter().any(|l| l.contains("tool poses cover")), "{w:?}");
}
