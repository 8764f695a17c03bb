//! The `spreg` binary end to end on tiny inputs.

use std::path::Path;
use std::process::{Command, Output};

use spreg::cloud::io::{read_kitti_poses, read_ply_vertices};
use spreg::harness::read_manifest;

fn spreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spreg")).args(args).output().expect("spawning spreg")
}

fn ok(args: &[&str]) -> String {
    let out = spreg(args);
    assert!(out.status.success(), "spreg {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_register_and_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, "preset = toy  # small model\nseed = 3\n").unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n-pairs", "3", "--seed", "1", "--out", s(&data), "--config", s(&cfg)]);
    let pairs = read_manifest(data.join("manifest.tsv")).unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs.iter().filter(|p| p.split.to_string() == "test").count(), 0);

    let ckpt = dir.path().join("model.spwt");
    let log = ok(&["train", "--data", s(&data), "--epochs", "1", "--config", s(&cfg), "--out", s(&ckpt)]);
    assert!(log.contains("epoch   1"));

    // The pose line round-trips through the KITTI pose reader.
    let gt_file = dir.path().join("gt.txt");
    std::fs::write(&gt_file, spreg::cloud::io::format_pose_line(&pairs[0].gt) + "\n").unwrap();
    let dump = dir.path().join("corr.csv");
    let pose = ok(&[
        "register",
        "--src",
        s(&pairs[0].source),
        "--tgt",
        s(&pairs[0].target),
        "--ckpt",
        s(&ckpt),
        "--dump-corr",
        s(&dump),
        "--gt",
        s(&gt_file),
    ]);
    let pose_file = dir.path().join("pose.txt");
    std::fs::write(&pose_file, &pose).unwrap();
    let est = read_kitti_poses(&pose_file).unwrap();
    assert_eq!(est.len(), 1);
    assert!(est[0].is_valid(1e-6));
    let csv = std::fs::read_to_string(&dump).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "kind,src_x,src_y,src_z,tgt_x,tgt_y,tgt_z,score,is_inlier_under_gt");
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9);
        assert!(["superpoint", "skeletal", "dense"].contains(&fields[0]), "{line}");
        assert!(fields[8] == "0" || fields[8] == "1");
    }

    let ply = dir.path().join("skeleton.ply");
    ok(&["skeleton", "--src", s(&pairs[0].source), "--ckpt", s(&ckpt), "--out", s(&ply)]);
    let v = read_ply_vertices(&ply).unwrap();
    let radii = v.column("radius").unwrap();
    assert_eq!(radii.len(), 16);
    assert!(radii.iter().all(|&r| r >= 0.0));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "# comment\nd_model = 8\nno_such_key = 1\n").unwrap();
    let out = spreg(&["synth", "--n-pairs", "1", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn small_base_clouds_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.bin");
    let bytes: Vec<u8> = (0..100u32).flat_map(|i| [i as f32, 0.5 * i as f32, 0.0, 0.0]).flat_map(f32::to_le_bytes).collect();
    std::fs::write(&base, bytes).unwrap();
    let out = spreg(&["synth", "--base", s(&base), "--n-pairs", "1", "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
}

#[test]
fn empty_manifest_gives_header_only_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, "preset = toy\n").unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n-pairs", "1", "--test", "0", "--out", s(&data), "--config", s(&cfg)]);
    let ckpt = dir.path().join("untrained.spwt");
    ok(&["train", "--data", s(&data), "--epochs", "0", "--config", s(&cfg), "--out", s(&ckpt)]);

    let manifest = dir.path().join("empty.tsv");
    std::fs::write(&manifest, "").unwrap();
    let out = dir.path().join("report");
    ok(&["eval", "--pairs", s(&manifest), "--ckpt", s(&ckpt), "--out", s(&out)]);
    for name in ["pairs.csv", "recall_sweep.csv", "overlap_bins.csv"] {
        assert_eq!(std::fs::read_to_string(out.join(name)).unwrap().lines().count(), 1, "{name}");
    }
    // Filtering to an absent split is the same as an empty manifest.
    let out = dir.path().join("report_test");
    ok(&["eval", "--pairs", s(&data.join("manifest.tsv")), "--ckpt", s(&ckpt), "--out", s(&out), "--split", "test"]);
    assert_eq!(std::fs::read_to_string(out.join("pairs.csv")).unwrap().lines().count(), 1);
}
