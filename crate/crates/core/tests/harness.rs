//! Metrics, overlap, synthetic pairs, manifests and benchmark reports.

mod common;

use std::path::{Path, PathBuf};

use common::{random_points, random_transform};
use nalgebra::{Point3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use spreg::cloud::{apply_transform, icp_refine, IcpOptions, PointCloud, RigidTransform};
use spreg::config::Config;
use spreg::harness::{
    compute_metrics, overlap_ratio, parse_manifest, procedural_scene, read_manifest, rotation_error_deg, run_benchmark,
    sweep_rte, synth_cross_source, write_manifest, write_reports, MetricReport, PairMetrics, PairRecord, PairSpec,
    Split, OVERLAP_CSV, PAIRS_CSV, SWEEP_CSV, SWEEP_RRE_DEG,
};
use spreg::pipeline::init_model;

#[test]
fn metric_examples() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let gt = random_transform(&mut rng, 5.0);
    let m = compute_metrics(&gt, &gt, &[], 1e-6, 1e-6, 0.6);
    assert_eq!((m.rre_deg, m.rte, m.success), (0.0, 0.0, true));

    let id = RigidTransform::identity();
    let ten = RigidTransform::from_axis_angle(&Vector3::z(), 10f64.to_radians(), Vector3::zeros());
    assert!((rotation_error_deg(&ten, &id) - 10.0).abs() < 1e-12);
    let tr = ten.rotation.trace();
    let by_trace = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
    assert!((rotation_error_deg(&ten, &id) - by_trace).abs() < 1e-9);

    let four = RigidTransform::from_axis_angle(&Vector3::x(), 4f64.to_radians(), Vector3::new(1.0, 0.0, 0.0));
    let m = compute_metrics(&four, &id, &[], 5.0, 2.0, 0.6);
    assert!(m.success && (m.rre_deg - 4.0).abs() < 1e-12 && m.rte == 1.0);
    // Thresholds are strict.
    assert!(!compute_metrics(&four, &id, &[], 4.0, 2.0, 0.6).success);

    let pairs = [
        (Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, 0.0, 0.0)),
        (Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)),
    ];
    assert_eq!(compute_metrics(&id, &id, &pairs, 5.0, 2.0, 0.6).inlier_ratio, 0.5);
}

#[test]
fn overlap_examples() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let cloud = PointCloud::new(random_points(&mut rng, 4000, 10.0)).unwrap();
    let id = RigidTransform::identity();
    assert_eq!(overlap_ratio(&cloud, &cloud, &id, 0.1), 1.0);
    let far = apply_transform(&cloud, &RigidTransform::from_axis_angle(&Vector3::z(), 0.0, Vector3::new(100.0, 0.0, 0.0)));
    assert_eq!(overlap_ratio(&cloud, &far, &id, 0.5), 0.0);

    // Half-overlapping crops at the median plane of x.
    let mut xs: Vec<f64> = cloud.points().iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    let (q1, q2, q3) = (xs[1000], xs[2000], xs[3000]);
    let pick = |lo: f64, hi: f64| {
        PointCloud::new(cloud.points().iter().filter(|p| p.x >= lo && p.x < hi).copied().collect()).unwrap()
    };
    let a = pick(f64::NEG_INFINITY, q2);
    let b = pick(q1, q3);
    assert!((overlap_ratio(&a, &b, &id, 1e-9) - 0.5).abs() <= 0.05);

    // Joint rigid motion of both clouds and the ground truth.
    let gt = random_transform(&mut rng, 3.0);
    let moved_b = apply_transform(&b, &gt);
    let base = overlap_ratio(&a, &moved_b, &gt, 0.3);
    let t = random_transform(&mut rng, 10.0);
    let a2 = apply_transform(&a, &t);
    let b2 = apply_transform(&moved_b, &t);
    let gt2 = t.compose(&gt).compose(&t.inverse());
    assert!((overlap_ratio(&a2, &b2, &gt2, 0.3) - base).abs() < 1e-9);
}

#[test]
fn synthetic_pairs_are_deterministic() {
    let cfg = Config::toy();
    let scene = procedural_scene(9, 24.0);
    assert_eq!(scene, procedural_scene(9, 24.0));
    let a = synth_cross_source(&scene, 42, &cfg).unwrap();
    let b = synth_cross_source(&scene, 42, &cfg).unwrap();
    assert_eq!(a, b);
    let s = &a.sample;
    assert!(s.gt.is_valid(1e-9));
    assert!((0.98..=1.02).contains(&a.scale));
    assert!(s.overlap >= cfg.synth_min_overlap);
    assert!(s.gt.translation.norm() <= cfg.synth_translation);
    let tilt = cfg.synth_tilt_deg.to_radians();
    // Roll and pitch stay small: the z axis barely moves.
    let z = s.gt.rotation * Vector3::z();
    assert!(z.z >= (2.0 * tilt).cos() - 1e-12);
    assert!(synth_cross_source(&PointCloud::new(random_points(&mut Xoshiro256PlusPlus::seed_from_u64(0), 100, 5.0)).unwrap(), 1, &cfg).is_err());
}

#[test]
fn clean_synthetic_pair_is_recovered_by_icp() {
    let cfg = Config {
        synth_noise_src: 0.0,
        synth_noise_tgt: 0.0,
        synth_crop_src: 1.0,
        synth_crop_tgt: 1.0,
        synth_voxel_tgt: 0.3,
        synth_scale_jitter: false,
        ..Config::toy()
    };
    let scene = procedural_scene(10, 24.0);
    let pair = synth_cross_source(&scene, 7, &cfg).unwrap();
    let s = &pair.sample;
    assert_eq!(pair.scale, 1.0);
    assert!(s.overlap > 0.99);
    let res = icp_refine(&s.source, &s.target, &s.gt, &IcpOptions::default()).unwrap();
    assert!(rotation_error_deg(&res.transform, &s.gt) < 1e-3);
    assert!((res.transform.translation - s.gt.translation).norm() < 1e-3);
}

fn spec(i: usize, rng: &mut Xoshiro256PlusPlus) -> PairSpec {
    PairSpec {
        source: PathBuf::from(format!("clouds/{i}_src.bin")),
        target: PathBuf::from(format!("clouds/{i}_tgt.bin")),
        gt: random_transform(rng, 5.0),
        split: [Split::Train, Split::Val, Split::Test][i % 3],
        overlap: None,
    }
}

#[test]
fn manifest_round_trip() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let pairs: Vec<PairSpec> = (0..6).map(|i| spec(i, &mut rng)).collect();
    let mut buf = Vec::new();
    write_manifest(&mut buf, &pairs).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().all(|l| l.split('\t').count() == 15));
    let back = parse_manifest(&text, Path::new("")).unwrap();
    assert_eq!(back.len(), pairs.len());
    for (b, p) in back.iter().zip(&pairs) {
        assert_eq!((&b.source, &b.target, b.split, b.overlap), (&p.source, &p.target, p.split, p.overlap));
        // Rotations are re-projected on read, so only rounding may differ.
        assert!((b.gt.rotation - p.gt.rotation).amax() < 1e-12);
        assert_eq!(b.gt.translation, p.gt.translation);
    }
    let based = parse_manifest(&text, Path::new("/data")).unwrap();
    assert_eq!(based[0].source, Path::new("/data/clouds/0_src.bin"));

    assert!(parse_manifest("a\tb\t1\t0\t0\t0\t0\t1\t0\t0\t0\t0\t1\t0\n", Path::new("")).is_err());
    let bad_split = text.lines().next().unwrap().replace("train", "dev");
    assert!(parse_manifest(&bad_split, Path::new("")).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    std::fs::write(&path, &text).unwrap();
    assert_eq!(read_manifest(&path).unwrap()[1].source, dir.path().join("clouds/1_src.bin"));
}

#[test]
fn empty_benchmark_writes_header_only_reports() {
    let cfg = Config::toy();
    let params = init_model(&cfg).unwrap();
    let report = run_benchmark(&[], &params, &cfg).unwrap();
    assert!(report.pairs.is_empty());
    assert_eq!(report.recall(), 0.0);
    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &report).unwrap();
    for name in [PAIRS_CSV, SWEEP_CSV, OVERLAP_CSV] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(text.lines().count(), 1, "{name}");
        assert!(text.ends_with('\n'));
    }
}

#[test]
fn unreadable_pairs_are_recorded_as_failures() {
    let cfg = Config::toy();
    let params = init_model(&cfg).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    let pairs = vec![spec(0, &mut rng)];
    let report = run_benchmark(&pairs, &params, &cfg).unwrap();
    assert_eq!(report.pairs.len(), 1);
    assert!(!report.pairs[0].success());
    assert!(report.pairs[0].error.is_some());
}

fn record(index: usize, metrics: Option<PairMetrics>) -> PairRecord {
    PairRecord {
        index,
        source: format!("{index}_src"),
        target: format!("{index}_tgt"),
        split: Split::Test,
        overlap: Some(0.05 + 0.1 * (index % 10) as f64),
        metrics,
        coarse_ir: None,
        skeletal_ir: None,
        denoised_ir: None,
        hybrid_ir: None,
        error: None,
    }
}

fn random_report(rng: &mut Xoshiro256PlusPlus, n: usize, cfg: &Config) -> MetricReport {
    MetricReport {
        pairs: (0..n)
            .map(|i| {
                let metrics = (!rng.random_bool(0.1)).then(|| {
                    let rre_deg = rng.random_range(0.0..12.0);
                    let rte = rng.random_range(0.0..3.5);
                    PairMetrics {
                        rre_deg,
                        rte,
                        inlier_ratio: rng.random_range(0.0..1.0),
                        success: rre_deg < cfg.rre_threshold_deg && rte < cfg.rte_threshold,
                    }
                });
                record(i, metrics)
            })
            .collect(),
    }
}

fn sweep_rows(report: &MetricReport) -> Vec<(f64, f64, f64)> {
    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), report).unwrap();
    let text = std::fs::read_to_string(dir.path().join(SWEEP_CSV)).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sweep_is_monotone_in_both_thresholds(seed in 0u64..10_000, n in 0usize..40) {
        let cfg = Config::toy();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let report = random_report(&mut rng, n, &cfg);
        let rows = sweep_rows(&report);
        // An empty report writes the header only.
        let cells = if n == 0 { 0 } else { SWEEP_RRE_DEG.len() * sweep_rte().len() };
        prop_assert_eq!(rows.len(), cells);
        for a in &rows {
            for b in &rows {
                if a.0 <= b.0 && a.1 <= b.1 {
                    prop_assert!(a.2 <= b.2);
                }
            }
        }
        // The (5°, 2 m) cell agrees with the per-pair success flags.
        if n > 0 {
            let cell = rows.iter().find(|r| r.0 == 5.0 && r.1 == 2.0).unwrap();
            let rate = report.pairs.iter().filter(|p| p.success()).count() as f64 / n as f64;
            prop_assert!((cell.2 - rate).abs() < 1e-6);
        }
    }
}

#[test]
fn perfect_estimates_succeed_everywhere() {
    let report = MetricReport {
        pairs: (0..5)
            .map(|i| {
                record(
                    i,
                    Some(PairMetrics {
                        rre_deg: 0.0,
                        rte: 0.0,
                        inlier_ratio: 1.0,
                        success: true,
                    }),
                )
            })
            .collect(),
    };
    assert!(sweep_rows(&report).iter().all(|r| r.2 == 1.0));
    assert_eq!(report.recall(), 1.0);
    assert_eq!(report.mean_rre(), Some(0.0));
}

#[test]
fn overlap_bins_cover_the_unit_interval() {
    let cfg = Config::toy();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let report = random_report(&mut rng, 30, &cfg);
    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &report).unwrap();
    let text = std::fs::read_to_string(dir.path().join(OVERLAP_CSV)).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 10);
    let total: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 30);
    let pairs_text = std::fs::read_to_string(dir.path().join(PAIRS_CSV)).unwrap();
    assert_eq!(pairs_text.lines().count(), 31);
}

#[test]
fn thread_override_is_read_from_the_environment() {
    let cfg = Config {
        workers: 3,
        ..Config::toy()
    };
    assert_eq!(spreg::harness::worker_count(&cfg).unwrap(), 3);
    let _ = Point3::<f64>::origin();
}
