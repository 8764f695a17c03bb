//! Coarse and skeletal correspondence sampling, spectral denoising, dense
//! patch matching and rigid transform estimation.

mod coarse;
mod dense;
mod lgr;
mod procrustes;
mod resample;
mod spectral;

pub use coarse::{
    coarse_match, dual_normalized_scores, write_correspondence_csv, Correspondence, CorrespondenceKind,
    CorrespondenceRow, CorrespondenceSet,
};
pub use dense::{dense_match, log_sinkhorn, mutual_topk};
pub use lgr::{local_to_global, LgrResult, PointMatch};
pub use procrustes::weighted_procrustes;
pub use resample::hybrid_resample;
pub use spectral::{
    build_compatibility, compatibility_from_points, principal_eigenvector, spectral_denoise, CompatibilityMatrix,
};
