//! Synthetic data, evaluation metrics and the benchmark runner.

mod benchmark;
mod manifest;
mod metrics;
mod synth;

pub use benchmark::{
    evaluate_pair, run_benchmark, sweep_rte, worker_count, write_overlap_csv, write_pairs_csv, write_reports,
    write_sweep_csv, MetricReport, PairRecord, OVERLAP_CSV, PAIRS_CSV, SWEEP_CSV, SWEEP_RRE_DEG,
};
pub use manifest::{parse_manifest, read_manifest, write_manifest, PairSpec, Split};
pub use metrics::{compute_metrics, inlier_ratio, overlap_ratio, rotation_error_deg, translation_error, PairMetrics};
pub use synth::{procedural_scene, synth_cross_source, SynthPair};
