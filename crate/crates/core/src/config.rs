//! Flat `key = value` configuration shared by every stage.
//!
//! A file may start from a named preset (`preset = toy`) and override single
//! keys. Unknown keys are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Frame for the relative coordinates fed to the backbone's local aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalFrame {
    /// `[‖d_xy‖, d_z, ‖d‖]`, invariant to rotations about the vertical axis.
    Yaw,
    /// Raw `[d_x, d_y, d_z]`.
    Raw,
}

/// Which tokens of the other cloud serve as cross-attention keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossKeys {
    Full,
    Superpoints,
}

/// How spectral denoising decides that a correspondence conflicts with the leader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictRule {
    /// Compatibility with the leader below `tau_conflict`.
    Threshold,
    /// Shares a source or target index with the leader.
    OneToOne,
}

/// Whether the skeleton loss and the registration loss share an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSchedule {
    Joint,
    Alternate,
}

macro_rules! enum_value {
    ($ty:ident { $($name:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

enum_value!(LocalFrame { "yaw" => Yaw, "raw" => Raw });
enum_value!(CrossKeys { "full" => Full, "superpoints" => Superpoints });
enum_value!(ConflictRule { "threshold" => Threshold, "one_to_one" => OneToOne });
enum_value!(LossSchedule { "joint" => Joint, "alternate" => Alternate });

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),+) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e: <$t as FromStr>::Err| e.to_string())
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )+};
}

plain_value!(f64, usize, u64, bool, LocalFrame, CrossKeys, ConflictRule, LossSchedule);

impl Value for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect()
    }
    fn format_value(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($($(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr;)+) => {
        /// Every tunable of the model, training, matching and evaluation.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $($(#[doc = $doc])* pub $field: $ty,)+
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($field: $default,)+ }
            }
        }

        impl Config {
            /// All recognised keys in canonical order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),+];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as Value>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
                    })+
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
                Ok(())
            }

            /// Canonical text form: every key, one per line.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($field), self.$field.format_value()));)+
                out
            }
        }
    };
}

config! {
    /// Seed for parameter init, sphere samples, patch sampling and synthesis.
    seed: u64 = 42;
    /// Voxel size applied to raw clouds before the backbone (m).
    preprocess_voxel: f64 = 0.3;

    /// Voxel size of each backbone level (m), finest first. The last level holds the superpoints.
    voxel_sizes: Vec<f64> = vec![0.3, 0.6, 1.2, 2.4];
    backbone_knn: usize = 16;
    local_frame: LocalFrame = LocalFrame::Yaw;
    /// Feature width at the superpoint level and inside the encoder.
    d_model: usize = 256;
    /// Feature width at the dense level.
    d_dense: usize = 64;
    /// Backbone level whose points are matched densely.
    dense_level: usize = 1;
    patch_size: usize = 64;

    skeleton_points: usize = 64;
    lambda_p2s: f64 = 0.3;
    lambda_radius: f64 = 0.4;
    sphere_samples: usize = 8;

    /// Number of (self, cross) attention rounds.
    interleave: usize = 3;
    heads: usize = 1;
    /// Skeleton neighbours per token for the skeleton-aware embedding.
    skeleton_knn: usize = 3;
    /// Neighbours per token for the angular part of the point-wise embedding.
    angle_knn: usize = 3;
    sigma_d: f64 = 4.8;
    sigma_a_deg: f64 = 15.0;
    sigma_d_skel: f64 = 4.8;
    sigma_a_skel_deg: f64 = 15.0;
    cross_keys: CrossKeys = CrossKeys::Full;

    coarse_cap: usize = 128;
    replace_count: usize = 32;
    skeletal_top: usize = 16;
    sigma_c: f64 = 0.6;
    tau_conflict: f64 = 0.5;
    min_cluster: usize = 3;
    conflict_rule: ConflictRule = ConflictRule::Threshold;
    sinkhorn_iters: usize = 100;
    mutual_topk: usize = 3;
    tau_m: f64 = 0.05;
    /// Inlier radius for supervision, LGR and dense IR (m).
    tau_a: f64 = 0.6;
    lgr_refine: usize = 5;

    lr: f64 = 1e-4;
    weight_decay: f64 = 1e-6;
    circle_pos_margin: f64 = 0.1;
    circle_neg_margin: f64 = 1.4;
    circle_scale: f64 = 10.0;
    /// Hinge-weighted logits, normalised by the scale. `false` gives the
    /// plain linear logits `β·√o·(d − Δp)` and `β·(Δn − d)`.
    circle_adaptive: bool = true;
    overlap_floor: f64 = 0.1;
    /// Coarse pairs sampled per training sample for the point matching loss.
    matching_pairs: usize = 32;
    loss_schedule: LossSchedule = LossSchedule::Joint;
    registration_loss: bool = true;

    rre_threshold_deg: f64 = 5.0;
    rte_threshold: f64 = 2.0;
    /// Residual radius for the inlier ratio of superpoint and skeletal sets (m).
    coarse_ir_radius: f64 = 2.4;
    icp_max_iters: usize = 50;
    icp_max_corr_dist: f64 = 1.0;
    /// Benchmark worker threads; 0 picks the available parallelism.
    workers: usize = 0;

    synth_voxel_src: f64 = 0.3;
    synth_voxel_tgt: f64 = 0.45;
    synth_noise_src: f64 = 0.02;
    synth_noise_tgt: f64 = 0.05;
    synth_crop_src: f64 = 0.8;
    synth_crop_tgt: f64 = 0.8;
    synth_scale_jitter: bool = true;
    synth_translation: f64 = 5.0;
    synth_tilt_deg: f64 = 2.0;
    synth_min_overlap: f64 = 0.1;
}

impl Config {
    /// Named starting points: `default`, `toy` (desk-scale training) and
    /// `forest` (tight success thresholds).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            "forest" => Ok(Self {
                rre_threshold_deg: 0.5,
                rte_threshold: 0.3,
                ..Self::default()
            }),
            _ => Err(Error::Config(format!("unknown preset {name}"))),
        }
    }

    /// Small widths and coarse voxels so training fits in minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            preprocess_voxel: 0.3,
            voxel_sizes: vec![0.6, 1.2, 2.4, 4.8],
            d_model: 32,
            d_dense: 16,
            patch_size: 16,
            skeleton_points: 16,
            interleave: 2,
            replace_count: 8,
            skeletal_top: 4,
            sigma_c: 1.2,
            lr: 2e-3,
            matching_pairs: 16,
            // Dense points sit on a 1.2 m grid here, so the inlier radius
            // scales with it.
            tau_a: 1.8,
            coarse_ir_radius: 4.8,
            ..Self::default()
        }
    }

    /// Parses config text. A leading `preset = name` line selects the base.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<Config> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if cfg.is_some() {
                    return Err(Error::Config(format!(
                        "line {}: preset must come before any other key",
                        lineno + 1
                    )));
                }
                cfg = Some(Self::preset(value)?);
                continue;
            }
            cfg.get_or_insert_with(Self::default)
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        let cfg = cfg.unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// First 8 bytes (little-endian) of the SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn superpoint_level(&self) -> usize {
        self.voxel_sizes.len() - 1
    }

    pub fn superpoint_voxel(&self) -> f64 {
        *self.voxel_sizes.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let counts = [
            ("backbone_knn", self.backbone_knn),
            ("d_model", self.d_model),
            ("d_dense", self.d_dense),
            ("patch_size", self.patch_size),
            ("skeleton_points", self.skeleton_points),
            ("sphere_samples", self.sphere_samples),
            ("heads", self.heads),
            ("skeleton_knn", self.skeleton_knn),
            ("angle_knn", self.angle_knn),
            ("coarse_cap", self.coarse_cap),
            ("replace_count", self.replace_count),
            ("skeletal_top", self.skeletal_top),
            ("min_cluster", self.min_cluster),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("mutual_topk", self.mutual_topk),
            ("matching_pairs", self.matching_pairs),
            ("icp_max_iters", self.icp_max_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        let positive = [
            ("preprocess_voxel", self.preprocess_voxel),
            ("sigma_d", self.sigma_d),
            ("sigma_a_deg", self.sigma_a_deg),
            ("sigma_d_skel", self.sigma_d_skel),
            ("sigma_a_skel_deg", self.sigma_a_skel_deg),
            ("sigma_c", self.sigma_c),
            ("tau_a", self.tau_a),
            ("lr", self.lr),
            ("circle_scale", self.circle_scale),
            ("rre_threshold_deg", self.rre_threshold_deg),
            ("rte_threshold", self.rte_threshold),
            ("coarse_ir_radius", self.coarse_ir_radius),
            ("icp_max_corr_dist", self.icp_max_corr_dist),
            ("synth_voxel_src", self.synth_voxel_src),
            ("synth_voxel_tgt", self.synth_voxel_tgt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("lambda_p2s", self.lambda_p2s),
            ("lambda_radius", self.lambda_radius),
            ("tau_conflict", self.tau_conflict),
            ("tau_m", self.tau_m),
            ("weight_decay", self.weight_decay),
            ("circle_pos_margin", self.circle_pos_margin),
            ("circle_neg_margin", self.circle_neg_margin),
            ("overlap_floor", self.overlap_floor),
            ("synth_noise_src", self.synth_noise_src),
            ("synth_noise_tgt", self.synth_noise_tgt),
            ("synth_translation", self.synth_translation),
            ("synth_tilt_deg", self.synth_tilt_deg),
            ("synth_min_overlap", self.synth_min_overlap),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("synth_crop_src", self.synth_crop_src), ("synth_crop_tgt", self.synth_crop_tgt)] {
            if !(v > 0.0 && v <= 1.0) {
                return fail(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if self.voxel_sizes.len() < 2 {
            return fail("voxel_sizes needs at least two levels".into());
        }
        if self.voxel_sizes.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || self.voxel_sizes.windows(2).any(|w| w[1] <= w[0])
        {
            return fail("voxel_sizes must be positive and strictly increasing".into());
        }
        if self.dense_level >= self.superpoint_level() {
            return fail(format!(
                "dense_level {} must be below the superpoint level {}",
                self.dense_level,
                self.superpoint_level()
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail("d_model must be even for sinusoidal embeddings".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if !(self.skeletal_top <= self.replace_count && self.replace_count <= self.coarse_cap) {
            return fail("need skeletal_top <= replace_count <= coarse_cap".into());
        }
        if self.skeleton_knn > self.skeleton_points {
            return fail("skeleton_knn cannot exceed skeleton_points".into());
        }
        Ok(())
    }
}

impl FromStr for Config {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
