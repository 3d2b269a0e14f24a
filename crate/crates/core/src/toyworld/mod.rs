//! The synthetic image domain: sinusoidal latent grids, localized artifact
//! injection, and the closed-grammar texts that describe them.

mod image;
mod vocab;

pub use image::{GridConfig, RegionMask, ToyImage};
pub use vocab::{vocab, TokenId, Vocab, BOS, CAPTION, DETECT, EOS, PAD, REASON, STOP};

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("quadrant {rows}x{cols} cannot hold two disjoint 2x2 patches")]
    GridTooSmall { rows: usize, cols: usize },
    #[error("a fake detection answer requires an artifact spec")]
    MissingSpec,
    #[error("a real detection answer takes no artifact spec")]
    UnexpectedSpec,
    #[error("image shape {found:?} does not match {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
}

/// Sinusoid count per channel.
const CLEAN_TERMS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Structure,
    Physics,
    Distortion,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Structure, Category::Physics, Category::Distortion];

    pub fn word(self) -> &'static str {
        match self {
            Category::Structure => "structure",
            Category::Physics => "physics",
            Category::Distortion => "distortion",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::TopLeft,
        Region::TopRight,
        Region::BottomLeft,
        Region::BottomRight,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Region::TopLeft => "top_left",
            Region::TopRight => "top_right",
            Region::BottomLeft => "bottom_left",
            Region::BottomRight => "bottom_right",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.word() == word)
    }

    /// Half-open `(row_start, row_end, col_start, col_end)` of the quadrant.
    pub fn bounds(self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (hh, hw) = (height / 2, width / 2);
        match self {
            Region::TopLeft => (0, hh, 0, hw),
            Region::TopRight => (0, hh, hw, width),
            Region::BottomLeft => (hh, height, 0, hw),
            Region::BottomRight => (hh, height, hw, width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    Low,
    High,
}

impl Magnitude {
    pub fn word(self) -> &'static str {
        match self {
            Magnitude::Low => "low",
            Magnitude::High => "high",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        match word {
            "low" => Some(Magnitude::Low),
            "high" => Some(Magnitude::High),
            _ => None,
        }
    }

    /// Uniform-noise amplitude used by distortion artifacts.
    pub fn noise_amplitude(self) -> f64 {
        match self {
            Magnitude::Low => 0.25,
            Magnitude::High => 0.5,
        }
    }
}

/// One injected corruption; the ground truth for diagnosis and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub category: Category,
    pub region: Region,
    pub magnitude: Magnitude,
    pub seed: u64,
}

impl ArtifactSpec {
    /// Draw category, region, magnitude and corruption seed uniformly.
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            category: Category::ALL[rng.random_range(0..3)],
            region: Region::ALL[rng.random_range(0..4)],
            magnitude: if rng.random_bool(0.5) {
                Magnitude::High
            } else {
                Magnitude::Low
            },
            seed: rng.random(),
        }
    }
}

impl fmt::Display for ArtifactSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} in {} ({})",
            self.category.word(),
            self.region.word(),
            self.magnitude.word()
        )
    }
}

/// `value(c,i,j) = (1/K) Σ_k sin(2π(fx_k·i/H + fy_k·j/W) + φ_{c,k})` with
/// `K = 3`, integer frequencies in `{1, 2}` shared across channels and
/// per-channel phases.
pub fn gen_clean(seed: u64, cfg: GridConfig) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freqs: Vec<(f64, f64)> = (0..CLEAN_TERMS)
        .map(|_| (rng.random_range(1..=2) as f64, rng.random_range(1..=2) as f64))
        .collect();
    let phases: Vec<f64> = (0..cfg.channels * CLEAN_TERMS)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let mut img = ToyImage::zeros(cfg);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    for c in 0..cfg.channels {
        for i in 0..cfg.height {
            for j in 0..cfg.width {
                let s: f64 = freqs
                    .iter()
                    .enumerate()
                    .map(|(k, &(fx, fy))| {
                        (2.0 * PI * (fx * i as f64 / h + fy * j as f64 / w) + phases[c * CLEAN_TERMS + k]).sin()
                    })
                    .sum();
                img.set(c, i, j, s / CLEAN_TERMS as f64);
            }
        }
    }
    img
}

/// Corrupt the `spec.region` quadrant. Pixels outside it are untouched.
pub fn inject_artifact(img: &ToyImage, spec: &ArtifactSpec) -> Result<(ToyImage, RegionMask), ToyError> {
    let mask = RegionMask::quadrant(img.height(), img.width(), spec.region);
    let out = match spec.category {
        Category::Structure => swap_patches(img, spec.region, spec.seed)?,
        Category::Physics => negate_region(img, spec.region),
        Category::Distortion => add_region_noise(img, spec.region, spec.magnitude.noise_amplitude(), spec.seed),
    };
    Ok((out, mask))
}

/// Swap two disjoint 2×2 patches chosen uniformly among all disjoint pairs
/// inside the quadrant, across every channel.
pub fn swap_patches(img: &ToyImage, region: Region, seed: u64) -> Result<ToyImage, ToyError> {
    let (r0, r1, c0, c1) = region.bounds(img.height(), img.width());
    let (rows, cols) = (r1 - r0, c1 - c0);
    let too_small = ToyError::GridTooSmall { rows, cols };
    if rows < 2 || cols < 2 {
        return Err(too_small);
    }
    let corners: Vec<(usize, usize)> = (r0..=r1 - 2).flat_map(|r| (c0..=c1 - 2).map(move |c| (r, c))).collect();
    let pairs: Vec<((usize, usize), (usize, usize))> = corners
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| corners[i + 1..].iter().map(move |&b| (a, b)))
        .filter(|(a, b)| a.0.abs_diff(b.0) >= 2 || a.1.abs_diff(b.1) >= 2)
        .collect();
    if pairs.is_empty() {
        return Err(too_small);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = pairs[rng.random_range(0..pairs.len())];
    let mut out = img.clone();
    for c in 0..img.channels() {
        for di in 0..2 {
            for dj in 0..2 {
                let va = img.get(c, a.0 + di, a.1 + dj);
                let vb = img.get(c, b.0 + di, b.1 + dj);
                out.set(c, a.0 + di, a.1 + dj, vb);
                out.set(c, b.0 + di, b.1 + dj, va);
            }
        }
    }
    Ok(out)
}

/// Inverted shading: negate every value inside the quadrant.
pub fn negate_region(img: &ToyImage, region: Region) -> ToyImage {
    let (r0, r1, c0, c1) = region.bounds(img.height(), img.width());
    let mut out = img.clone();
    for c in 0..img.channels() {
        for i in r0..r1 {
            for j in c0..c1 {
                out.set(c, i, j, -img.get(c, i, j));
            }
        }
    }
    out
}

/// Add zero-mean uniform noise in `[-amplitude, amplitude)` inside the
/// quadrant, then clamp to `[-1, 1]`.
pub fn add_region_noise(img: &ToyImage, region: Region, amplitude: f64, seed: u64) -> ToyImage {
    let (r0, r1, c0, c1) = region.bounds(img.height(), img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for c in 0..img.channels() {
        for i in r0..r1 {
            for j in c0..c1 {
                let u: f64 = rng.random();
                let v = img.get(c, i, j) + amplitude * (2.0 * u - 1.0);
                out.set(c, i, j, v.clamp(-1.0, 1.0));
            }
        }
    }
    out
}

fn ids(words: &[&str]) -> Vec<TokenId> {
    let v = vocab();
    words
        .iter()
        .map(|w| v.id(w).expect("template word in vocabulary"))
        .collect()
}

/// `<reason> artifact {category} quadrant {region} magnitude {low|high}`.
pub fn render_diagnosis(spec: &ArtifactSpec) -> Vec<TokenId> {
    ids(&[
        "<reason>",
        "artifact",
        spec.category.word(),
        "quadrant",
        spec.region.word(),
        "magnitude",
        spec.magnitude.word(),
    ])
}

/// Number of tokens in every rendered diagnosis.
pub const DIAGNOSIS_LEN: usize = 7;

/// Fields recovered from a diagnosis; `None` if the tokens do not follow
/// the template.
pub fn parse_diagnosis(tokens: &[TokenId]) -> Option<(Category, Region, Magnitude)> {
    let v = vocab();
    let words: Vec<&str> = tokens.iter().map(|&t| v.token(t)).collect::<Result<_, _>>().ok()?;
    match words.as_slice() {
        ["<reason>", "artifact", cat, "quadrant", reg, "magnitude", mag] => Some((
            Category::from_word(cat)?,
            Region::from_word(reg)?,
            Magnitude::from_word(mag)?,
        )),
        _ => None,
    }
}

/// `<stop> image normal <eos>`.
pub fn render_termination() -> Vec<TokenId> {
    ids(&["<stop>", "image", "normal", "<eos>"])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

/// Structured detection answer. Real images take no spec; fake ones must
/// carry the spec of their artifact.
pub fn render_detection_answer(label: Label, spec: Option<&ArtifactSpec>) -> Result<Vec<TokenId>, ToyError> {
    match (label, spec) {
        (Label::Real, None) => Ok(ids(&[
            "<detect>",
            "real",
            "<caption>",
            "clean",
            "pattern",
            "image",
            "<reason>",
            "none",
            "observed",
            "<eos>",
        ])),
        (Label::Real, Some(_)) => Err(ToyError::UnexpectedSpec),
        (Label::Fake, Some(s)) => Ok(ids(&[
            "<detect>",
            "fake",
            "<caption>",
            "artifact",
            s.category.word(),
            "image",
            "<reason>",
            "artifact",
            s.category.word(),
            "quadrant",
            s.region.word(),
            "<eos>",
        ])),
        (Label::Fake, None) => Err(ToyError::MissingSpec),
    }
}

/// `<bos> detect this image`.
pub fn detection_prompt() -> Vec<TokenId> {
    ids(&["<bos>", "detect", "this", "image"])
}

/// `please repair this image`.
pub fn repair_prompt() -> Vec<TokenId> {
    ids(&["please", "repair", "this", "image"])
}

pub fn real_token() -> TokenId {
    vocab().id("real").expect("in vocabulary")
}

pub fn fake_token() -> TokenId {
    vocab().id("fake").expect("in vocabulary")
}

#[cfg(test)]
mod tests;
