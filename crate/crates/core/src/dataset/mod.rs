//! Correction tuples, detection samples, interleaved training sequences
//! and their JSONL storage.

mod io;
mod sequence;

pub use io::{
    parse_correction, parse_detection, read_correction_file, read_detection_file, serialize_correction,
    serialize_detection, write_dataset, CorrectionRecord, Dataset, DetectionRecord, Manifest, SCHEMA_VERSION,
};
pub use sequence::{
    assemble, AssemblyInput, Modality, MultimodalSequence, Segment, SeqToken, TaskTag, TokenValue, TrainSample,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toyworld::{
    gen_clean, inject_artifact, render_detection_answer, render_diagnosis, render_termination, ArtifactSpec, Category,
    GridConfig, Label, Magnitude, Region, RegionMask, TokenId, ToyError, ToyImage,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error("unknown curriculum state {0:?}")]
    UnknownState(String),
    #[error("state {state} cannot be assembled from this record type")]
    WrongInput { state: &'static str },
    #[error("line {line}: {path}: {message}")]
    Parse { line: usize, path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset grid {found:?} does not match manifest grid {expected:?}")]
    GridMismatch { expected: GridConfig, found: GridConfig },
}

/// Seed for record `index` of `stream`, derived from the base seed only.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over a combined key
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_TRAIN_DETECT: u64 = 1;
pub const STREAM_TRAIN_CORRECT: u64 = 2;
pub const STREAM_TEST_DETECT: u64 = 3;
pub const STREAM_TEST_CORRECT: u64 = 4;
pub const STREAM_CALIBRATION: u64 = 5;
const STREAM_SPEC: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTuple {
    pub artifact_image: ToyImage,
    pub diag_text: Vec<TokenId>,
    pub mid_images: Vec<ToyImage>,
    pub correct_image: ToyImage,
    pub stop_text: Vec<TokenId>,
    pub spec: ArtifactSpec,
    pub mask: RegionMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub image: ToyImage,
    pub label: Label,
    pub answer_text: Vec<TokenId>,
    /// Artifact behind a fake image; `None` for real ones.
    pub spec: Option<ArtifactSpec>,
}

/// Default interpolation levels for the mid-quality images.
pub const DEFAULT_MID_ALPHAS: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

/// `artifact + α·(correct − artifact)`.
pub fn interpolate_mid(artifact: &ToyImage, correct: &ToyImage, alpha: f64) -> ToyImage {
    artifact.zip_map(correct, |a, c| a + alpha * (c - a))
}

/// Build the tuple for `seed`: the clean image is `gen_clean(seed)` and the
/// artifact spec is drawn from a stream derived from the same seed.
pub fn build_correction_tuple(seed: u64, grid: GridConfig, alphas: &[f64]) -> Result<CorrectionTuple, DatasetError> {
    let clean = gen_clean(seed, grid);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPEC, 0));
    let spec = ArtifactSpec::random(&mut rng);
    correction_tuple_from(clean, spec, alphas)
}

pub fn correction_tuple_from(
    clean: ToyImage,
    spec: ArtifactSpec,
    alphas: &[f64],
) -> Result<CorrectionTuple, DatasetError> {
    let (artifact, mask) = inject_artifact(&clean, &spec)?;
    let mid_images = alphas.iter().map(|&a| interpolate_mid(&artifact, &clean, a)).collect();
    Ok(CorrectionTuple {
        artifact_image: artifact,
        diag_text: render_diagnosis(&spec),
        mid_images,
        correct_image: clean,
        stop_text: render_termination(),
        spec,
        mask,
    })
}

/// Detection sample for `seed`; `fake` draws an artifact from the same
/// stream.
pub fn build_detection_sample(seed: u64, grid: GridConfig, fake: bool) -> Result<DetectionSample, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = gen_clean(rng.random(), grid);
    if fake {
        let spec = ArtifactSpec::random(&mut rng);
        let (image, _) = inject_artifact(&clean, &spec)?;
        Ok(DetectionSample {
            image,
            label: Label::Fake,
            answer_text: render_detection_answer(Label::Fake, Some(&spec))?,
            spec: Some(spec),
        })
    } else {
        Ok(DetectionSample {
            image: clean,
            label: Label::Real,
            answer_text: render_detection_answer(Label::Real, None)?,
            spec: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Artifact region still far from the clean image.
    Incomplete,
    /// Content outside the artifact region moved.
    Drift,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Incomplete => "incomplete",
            RejectReason::Drift => "drift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterVerdict {
    pub accept: bool,
    pub reject_reason: Option<RejectReason>,
    pub region_rmse: f64,
    pub outside_rmse: f64,
}

/// Accept iff both the region RMSE and the outside-region RMSE against the
/// clean image are at most `tau_keep`.
pub fn quality_filter(candidate: &ToyImage, clean: &ToyImage, mask: &RegionMask, tau_keep: f64) -> FilterVerdict {
    let region_rmse = candidate.region_rmse(clean, mask);
    let outside_rmse = candidate.outside_rmse(clean, mask);
    let reject_reason = if region_rmse > tau_keep {
        Some(RejectReason::Incomplete)
    } else if outside_rmse > tau_keep {
        Some(RejectReason::Drift)
    } else {
        None
    };
    FilterVerdict {
        accept: reject_reason.is_none(),
        reject_reason,
        region_rmse,
        outside_rmse,
    }
}

/// Thresholds calibrated on corrupted-vs-clean region RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_keep: f64,
    pub tau_structure: f64,
    pub tau_physics: f64,
    pub tau_distortion: f64,
}

impl Thresholds {
    pub fn for_category(&self, c: Category) -> f64 {
        match c {
            Category::Structure => self.tau_structure,
            Category::Physics => self.tau_physics,
            Category::Distortion => self.tau_distortion,
        }
    }
}

pub const CALIBRATION_SEEDS: u64 = 100;

/// Midpoint between the largest region RMSE of accepted clean images (zero:
/// a clean image matches itself) and the smallest region RMSE of raw
/// corrupted images, over every category and magnitude on
/// `CALIBRATION_SEEDS` seeds. Per-category thresholds use the same rule
/// restricted to one category.
pub fn calibrate_thresholds(base_seed: u64, grid: GridConfig) -> Result<Thresholds, DatasetError> {
    let mut min_per_cat = [f64::INFINITY; 3];
    let mut clean_max: f64 = 0.0;
    for i in 0..CALIBRATION_SEEDS {
        let seed = derive_seed(base_seed, STREAM_CALIBRATION, i);
        let clean = gen_clean(seed, grid);
        let region = Region::ALL[(i % 4) as usize];
        for (ci, category) in Category::ALL.into_iter().enumerate() {
            for magnitude in [Magnitude::Low, Magnitude::High] {
                let spec = ArtifactSpec {
                    category,
                    region,
                    magnitude,
                    seed,
                };
                let (bad, mask) = inject_artifact(&clean, &spec)?;
                clean_max = clean_max.max(clean.region_rmse(&clean, &mask));
                min_per_cat[ci] = min_per_cat[ci].min(bad.region_rmse(&clean, &mask));
            }
        }
    }
    let mid = |lo: f64| 0.5 * (clean_max + lo);
    let global = min_per_cat.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Thresholds {
        tau_keep: mid(global),
        tau_structure: mid(min_per_cat[0]),
        tau_physics: mid(min_per_cat[1]),
        tau_distortion: mid(min_per_cat[2]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub grid: GridConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// Correction test tuples; defaults to `n_test`.
    pub n_test_correct: Option<usize>,
    pub seed: u64,
    pub mid_alphas: Vec<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            n_train: 4000,
            n_test: 500,
            n_test_correct: None,
            seed: 0,
            mid_alphas: DEFAULT_MID_ALPHAS.to_vec(),
        }
    }
}

fn detection_split(cfg: &DatasetConfig, stream: u64, n: usize) -> Result<Vec<DetectionSample>, DatasetError> {
    // even index → real, odd → fake: every split is balanced
    (0..n)
        .map(|i| build_detection_sample(derive_seed(cfg.seed, stream, i as u64), cfg.grid, i % 2 == 1))
        .collect()
}

fn correction_split(cfg: &DatasetConfig, stream: u64, n: usize) -> Result<Vec<CorrectionTuple>, DatasetError> {
    (0..n)
        .map(|i| build_correction_tuple(derive_seed(cfg.seed, stream, i as u64), cfg.grid, &cfg.mid_alphas))
        .collect()
}

/// Build every split plus calibrated thresholds.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset, DatasetError> {
    let n_test_correct = cfg.n_test_correct.unwrap_or(cfg.n_test);
    let thresholds = calibrate_thresholds(cfg.seed, cfg.grid)?;
    Ok(Dataset {
        manifest: Manifest::new(cfg, n_test_correct, thresholds),
        train_detect: detection_split(cfg, STREAM_TRAIN_DETECT, cfg.n_train)?,
        train_correct: correction_split(cfg, STREAM_TRAIN_CORRECT, cfg.n_train)?,
        test_detect: detection_split(cfg, STREAM_TEST_DETECT, cfg.n_test)?,
        test_correct: correction_split(cfg, STREAM_TEST_CORRECT, n_test_correct)?,
    })
}

#[cfg(test)]
mod tests;
