use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;

use super::manifest::{PairSpec, Split};
use super::metrics::{compute_metrics, overlap_ratio, PairMetrics};
use crate::cloud::io::read_cloud;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fmt::sig6;
use crate::matching::CorrespondenceSet;
use crate::pipeline::{register, RegistrationResult};
use crate::tensor::ParameterStore;

/// Rotation thresholds (degrees) of the recall sweep.
pub const SWEEP_RRE_DEG: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

/// Translation thresholds (metres) of the recall sweep: 0.2 to 3.0 in steps of 0.2.
pub fn sweep_rte() -> Vec<f64> {
    (1..=15).map(|k| k as f64 / 5.0).collect()
}

/// Outcome of registering one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub index: usize,
    pub source: String,
    pub target: String,
    pub split: Split,
    pub overlap: Option<f64>,
    /// `None` when the pair could not be loaded or registered.
    pub metrics: Option<PairMetrics>,
    /// Inlier ratios of the coarse sets at `coarse_ir_radius`.
    pub coarse_ir: Option<f64>,
    pub skeletal_ir: Option<f64>,
    pub denoised_ir: Option<f64>,
    pub hybrid_ir: Option<f64>,
    pub error: Option<String>,
}

impl PairRecord {
    pub fn success(&self) -> bool {
        self.metrics.is_some_and(|m| m.success)
    }

    /// Success under other thresholds; failed pairs never succeed.
    pub fn success_at(&self, rre_deg: f64, rte: f64) -> bool {
        self.metrics.is_some_and(|m| m.rre_deg < rre_deg && m.rte < rte)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub pairs: Vec<PairRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    /// Registration recall; zero for an empty report.
    pub fn recall(&self) -> f64 {
        self.recall_at_fn(|p| p.success())
    }

    pub fn recall_at(&self, rre_deg: f64, rte: f64) -> f64 {
        self.recall_at_fn(|p| p.success_at(rre_deg, rte))
    }

    fn recall_at_fn(&self, ok: impl Fn(&PairRecord) -> bool) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| ok(p)).count() as f64 / self.pairs.len() as f64
    }

    /// Mean RRE over successful pairs.
    pub fn mean_rre(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.metrics.filter(|m| m.success).map(|m| m.rre_deg)))
    }

    /// Mean RTE over successful pairs.
    pub fn mean_rte(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.metrics.filter(|m| m.success).map(|m| m.rte)))
    }

    /// Mean inlier ratio of the final correspondences over evaluated pairs.
    pub fn mean_ir(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.metrics.map(|m| m.inlier_ratio)))
    }

    pub fn mean_coarse_ir(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.coarse_ir))
    }

    pub fn mean_skeletal_ir(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.skeletal_ir))
    }

    pub fn mean_denoised_ir(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.denoised_ir))
    }

    pub fn mean_hybrid_ir(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.hybrid_ir))
    }
}

fn set_ir(result: &RegistrationResult, set: &CorrespondenceSet, spec: &PairSpec, radius: f64) -> Option<f64> {
    (!set.is_empty()).then(|| result.inlier_ratio(set, &spec.gt, radius))
}

/// Registers one pair and scores it. Load and registration errors are
/// recorded on the returned record.
pub fn evaluate_pair(index: usize, spec: &PairSpec, params: &ParameterStore, cfg: &Config) -> PairRecord {
    let mut record = PairRecord {
        index,
        source: spec.source.display().to_string(),
        target: spec.target.display().to_string(),
        split: spec.split,
        overlap: spec.overlap,
        metrics: None,
        coarse_ir: None,
        skeletal_ir: None,
        denoised_ir: None,
        hybrid_ir: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let src = read_cloud(&spec.source)?;
        let tgt = read_cloud(&spec.target)?;
        if record.overlap.is_none() {
            record.overlap = Some(overlap_ratio(&src, &tgt, &spec.gt, cfg.tau_a));
        }
        let result = register(&src, &tgt, params, cfg)?;
        let dense: Vec<(Point3<f64>, Point3<f64>)> = result.dense.iter().map(|c| result.endpoints(c)).collect();
        record.metrics = Some(compute_metrics(
            &result.transform,
            &spec.gt,
            &dense,
            cfg.rre_threshold_deg,
            cfg.rte_threshold,
            cfg.tau_a,
        ));
        let r = cfg.coarse_ir_radius;
        record.coarse_ir = set_ir(&result, &result.coarse, spec, r);
        record.skeletal_ir = set_ir(&result, &result.skeletal, spec, r);
        record.denoised_ir = set_ir(&result, &result.denoised, spec, r);
        record.hybrid_ir = set_ir(&result, &result.hybrid, spec, r);
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

/// Worker count: `SPREG_THREADS` if set, else `cfg.workers`; zero means
/// one per core.
pub fn worker_count(cfg: &Config) -> Result<usize> {
    match std::env::var("SPREG_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("SPREG_THREADS must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(cfg.workers),
    }
}

/// Registers every pair, concurrently, keeping records in input order.
pub fn run_benchmark(pairs: &[PairSpec], params: &ParameterStore, cfg: &Config) -> Result<MetricReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(cfg)?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| evaluate_pair(i, spec, params, cfg))
            .collect()
    });
    Ok(MetricReport { pairs: records })
}

fn opt(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

pub fn write_pairs_csv(w: &mut impl Write, report: &MetricReport) -> Result<()> {
    writeln!(
        w,
        "pair,source,target,split,overlap,rre_deg,rte_m,inlier_ratio,success,coarse_ir,skeletal_ir,denoised_ir,hybrid_ir,error"
    )?;
    for p in &report.pairs {
        let m = p.metrics;
        let error = p.error.as_deref().unwrap_or("").replace([',', '\n', '\r'], " ");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.index,
            p.source,
            p.target,
            p.split,
            opt(p.overlap),
            opt(m.map(|m| m.rre_deg)),
            opt(m.map(|m| m.rte)),
            opt(m.map(|m| m.inlier_ratio)),
            u8::from(p.success()),
            opt(p.coarse_ir),
            opt(p.skeletal_ir),
            opt(p.denoised_ir),
            opt(p.hybrid_ir),
            error
        )?;
    }
    Ok(())
}

/// Recall over the threshold grid, RRE-major.
pub fn write_sweep_csv(w: &mut impl Write, report: &MetricReport) -> Result<()> {
    writeln!(w, "rre_threshold_deg,rte_threshold_m,recall")?;
    if report.pairs.is_empty() {
        return Ok(());
    }
    for rre in SWEEP_RRE_DEG {
        for rte in sweep_rte() {
            writeln!(w, "{},{},{}", sig6(rre), sig6(rte), sig6(report.recall_at(rre, rte)))?;
        }
    }
    Ok(())
}

/// Recall and mean inlier ratio per 10% overlap bin; the last bin is closed.
pub fn write_overlap_csv(w: &mut impl Write, report: &MetricReport) -> Result<()> {
    writeln!(w, "overlap_min,overlap_max,pairs,recall,mean_inlier_ratio")?;
    if report.pairs.is_empty() {
        return Ok(());
    }
    for b in 0..10 {
        let (lo, hi) = (b as f64 / 10.0, (b + 1) as f64 / 10.0);
        let members: Vec<&PairRecord> = report
            .pairs
            .iter()
            .filter(|p| p.overlap.is_some_and(|o| o >= lo && (o < hi || (b == 9 && o <= hi))))
            .collect();
        let recall = (!members.is_empty())
            .then(|| members.iter().filter(|p| p.success()).count() as f64 / members.len() as f64);
        let ir = mean(members.iter().filter_map(|p| p.metrics.map(|m| m.inlier_ratio)));
        writeln!(w, "{},{},{},{},{}", sig6(lo), sig6(hi), members.len(), opt(recall), opt(ir))?;
    }
    Ok(())
}

pub const PAIRS_CSV: &str = "pairs.csv";
pub const SWEEP_CSV: &str = "recall_sweep.csv";
pub const OVERLAP_CSV: &str = "overlap_bins.csv";

/// Writes the three report CSVs into `dir`, creating it if needed.
pub fn write_reports(dir: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(PAIRS_CSV))?);
    write_pairs_csv(&mut w, report)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(SWEEP_CSV))?);
    write_sweep_csv(&mut w, report)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(OVERLAP_CSV))?);
    write_overlap_csv(&mut w, report)?;
    w.flush()?;
    Ok(())
}
