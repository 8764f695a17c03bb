use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use spreg::cloud::io::{format_pose_line, read_cloud, read_kitti_poses, write_cloud, write_ply, PlyFormat};
use spreg::harness::{
    procedural_scene, read_manifest, run_benchmark, synth_cross_source, write_manifest, write_reports, PairSpec, Split,
};
use spreg::matching::{write_correspondence_csv, CorrespondenceKind, CorrespondenceRow, CorrespondenceSet};
use spreg::pipeline::{load_checkpoint, preprocess, save_checkpoint, train_epoch, Checkpoint, TrainState};
use spreg::{Config, PointCloud, RigidTransform, TrainSample};

/// Manifest file name inside a synthetic dataset directory.
const MANIFEST: &str = "manifest.tsv";

/// Side length of procedural scenes in metres.
const SCENE_EXTENT: f64 = 28.0;

#[derive(Parser)]
#[command(name = "spreg", version, about = "Skeleton-guided point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cross-source pairs and a manifest.
    Synth {
        /// Base cloud (.bin or .ply); procedural scenes are used when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long = "n-pairs")]
        n_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of trailing pairs tagged `test` (default: a fifth).
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on the `train` pairs of a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register two clouds and print the source-to-target transform.
    Register {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Write the coarse, skeletal and dense correspondences as CSV.
        #[arg(long = "dump-corr")]
        dump_corr: Option<PathBuf>,
        /// File whose first line is a ground-truth pose (12 numbers), used to
        /// mark inliers in the dump.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Benchmark a checkpoint on a pair manifest.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only evaluate pairs with this split tag.
        #[arg(long)]
        split: Option<String>,
    },
    /// Write the skeleton of a cloud as PLY with a radius property.
    Skeleton {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn scene_seed(seed: u64, pair: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(pair as u64)
}

fn synth(
    base: Option<&Path>,
    n_pairs: usize,
    seed: u64,
    out: &Path,
    test: Option<usize>,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let test = test.unwrap_or(n_pairs / 5).min(n_pairs);
    std::fs::create_dir_all(out)?;
    let base = base.map(read_cloud).transpose()?;
    let mut specs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let pair_seed = scene_seed(seed, i);
        let scene;
        let cloud = match &base {
            Some(b) => b,
            None => {
                scene = procedural_scene(pair_seed, SCENE_EXTENT);
                &scene
            }
        };
        let pair = synth_cross_source(cloud, pair_seed ^ 0x5eed, &cfg).with_context(|| format!("pair {i}"))?;
        let (src_name, tgt_name) = (format!("pair_{i:04}_src.bin"), format!("pair_{i:04}_tgt.bin"));
        write_cloud(out.join(&src_name), &pair.sample.source)?;
        write_cloud(out.join(&tgt_name), &pair.sample.target)?;
        specs.push(PairSpec {
            source: src_name.into(),
            target: tgt_name.into(),
            gt: pair.sample.gt,
            split: if i >= n_pairs - test { Split::Test } else { Split::Train },
            overlap: Some(pair.sample.overlap),
        });
    }
    let mut w = BufWriter::new(File::create(out.join(MANIFEST))?);
    write_manifest(&mut w, &specs)?;
    w.flush()?;
    println!("wrote {n_pairs} pairs ({test} test) to {}", out.display());
    Ok(())
}

fn load_samples(pairs: &[PairSpec], cfg: &Config) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .map(|p| {
            let source = read_cloud(&p.source).with_context(|| format!("reading {}", p.source.display()))?;
            let target = read_cloud(&p.target).with_context(|| format!("reading {}", p.target.display()))?;
            let overlap = spreg::harness::overlap_ratio(&source, &target, &p.gt, cfg.tau_a);
            Ok(TrainSample {
                source,
                target,
                gt: p.gt,
                overlap,
            })
        })
        .collect()
}

fn train(data: &Path, epochs: u32, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let manifest = if data.is_dir() { data.join(MANIFEST) } else { data.to_path_buf() };
    let pairs: Vec<PairSpec> = read_manifest(&manifest)?
        .into_iter()
        .filter(|p| p.split == Split::Train)
        .collect();
    if pairs.is_empty() {
        bail!("no train pairs in {}", manifest.display());
    }
    let samples = load_samples(&pairs, &cfg)?;
    let mut state = TrainState::new(&cfg)?;
    for _ in 0..epochs {
        let m = train_epoch(&samples, &mut state, &cfg)?;
        println!(
            "epoch {:>3}  loss {:.5}  circle {:.5}  matching {:.5}  skeleton {:.5}  coarse_ir {:.4}  skipped {}",
            state.epoch, m.loss, m.circle, m.matching, m.skeleton, m.coarse_ir, m.skipped
        );
    }
    save_checkpoint(out, &Checkpoint::from_state(&state, &cfg))?;
    println!("saved {}", out.display());
    Ok(())
}

/// Inlier radius for a correspondence kind: dense matches use `tau_a`,
/// coarse ones `coarse_ir_radius`.
fn inlier_radius(cfg: &Config, kind: CorrespondenceKind) -> f64 {
    match kind {
        CorrespondenceKind::Dense => cfg.tau_a,
        _ => cfg.coarse_ir_radius,
    }
}

fn rows(
    result: &spreg::RegistrationResult,
    set: &CorrespondenceSet,
    gt: Option<&RigidTransform>,
    cfg: &Config,
) -> Vec<CorrespondenceRow> {
    set.iter()
        .map(|c| {
            let (src, tgt) = result.endpoints(c);
            CorrespondenceRow {
                kind: c.kind,
                src,
                tgt,
                score: c.score,
                inlier: gt.map(|g| (g.apply(&src) - tgt).norm() < inlier_radius(cfg, c.kind)),
            }
        })
        .collect()
}

fn register_cmd(src: &Path, tgt: &Path, ckpt: &Path, dump: Option<&Path>, gt: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let cfg = &ckpt.config;
    let src = read_cloud(src)?;
    let tgt = read_cloud(tgt)?;
    let gt = gt
        .map(|p| -> Result<RigidTransform> { read_kitti_poses(p)?.into_iter().next().context("empty pose file") })
        .transpose()?;
    let result = spreg::register(&src, &tgt, &ckpt.params, cfg)?;
    println!("{}", format_pose_line(&result.transform));
    let t = &result.timing;
    eprintln!(
        "timing ms: preprocess {:.1}  features {:.1}  coarse {:.1}  denoise {:.1}  dense {:.1}  estimate {:.1}  total {:.1}",
        t.preprocess, t.features, t.coarse, t.denoise, t.dense, t.estimate, t.total()
    );
    eprintln!(
        "correspondences: coarse {}  skeletal {}  denoised {}  hybrid {}  dense {}{}",
        result.coarse.len(),
        result.skeletal.len(),
        result.denoised.len(),
        result.hybrid.len(),
        result.dense.len(),
        if result.fallback { "  (fallback estimate)" } else { "" }
    );
    if let Some(path) = dump {
        let mut all = rows(&result, &result.hybrid, gt.as_ref(), cfg);
        all.extend(rows(&result, &result.skeletal, gt.as_ref(), cfg));
        all.extend(rows(&result, &result.dense, gt.as_ref(), cfg));
        let mut w = BufWriter::new(File::create(path)?);
        write_correspondence_csv(&mut w, &all)?;
        w.flush()?;
    }
    Ok(())
}

fn eval(pairs: &Path, ckpt: &Path, out: &Path, split: Option<&str>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let split: Option<Split> = split.map(str::parse).transpose()?;
    let specs: Vec<PairSpec> = read_manifest(pairs)?
        .into_iter()
        .filter(|p| split.is_none_or(|s| p.split == s))
        .collect();
    let report = run_benchmark(&specs, &ckpt.params, &ckpt.config)?;
    write_reports(out, &report)?;
    let failed = report.pairs.iter().filter(|p| p.error.is_some()).count();
    println!(
        "pairs {}  recall {:.4}  mean_rre {}  mean_rte {}  mean_ir {}  coarse_ir {}  failed {}",
        report.pairs.len(),
        report.recall(),
        fmt_opt(report.mean_rre()),
        fmt_opt(report.mean_rte()),
        fmt_opt(report.mean_ir()),
        fmt_opt(report.mean_coarse_ir()),
        failed
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn skeleton_cmd(src: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let cfg = &ckpt.config;
    let cloud = preprocess(&read_cloud(src)?, cfg)?;
    let tape = spreg::tensor::Tape::new();
    let pyramid = spreg::backbone::extract_pyramid(&tape, &cloud, &ckpt.params, cfg)?;
    let skel = spreg::skeleton::extract_skeleton(&tape, pyramid.superpoints(), pyramid.superpoint_features(), &ckpt.params)?;
    let points: PointCloud = skel.point_cloud();
    let radii = skel.radii.value().data().to_vec();
    write_ply(out, &points, &[("radius", &radii)], PlyFormat::BinaryLittleEndian)?;
    println!("wrote {} skeleton points to {}", points.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            base,
            n_pairs,
            seed,
            out,
            test,
            config,
        } => synth(base.as_deref(), n_pairs, seed, &out, test, config.as_deref()),
        Command::Train {
            data,
            epochs,
            config,
            out,
        } => train(&data, epochs, config.as_deref(), &out),
        Command::Register {
            src,
            tgt,
            ckpt,
            dump_corr,
            gt,
        } => register_cmd(&src, &tgt, &ckpt, dump_corr.as_deref(), gt.as_deref()),
        Command::Eval { pairs, ckpt, out, split } => eval(&pairs, &ckpt, &out, split.as_deref()),
        Command::Skeleton { src, ckpt, out } => skeleton_cmd(&src, &ckpt, &out),
    }
}
