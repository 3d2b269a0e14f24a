//! Greedy decoding, Euler flow sampling, structured detection and the
//! iterative diagnose-then-correct loop.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::MultimodalSequence;
use crate::model::{FlowInput, ForwardOptions, Model, ModelError};
use crate::objectives::{sample_noise, shift_timestep, TIMESTEP_SHIFT};
use crate::toyworld::{
    detection_prompt, fake_token, real_token, repair_prompt, GridConfig, Label, TokenId, ToyImage, CAPTION, DETECT,
    DIAGNOSIS_LEN, EOS, REASON, STOP,
};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 24;
pub const DEFAULT_FLOW_STEPS: usize = 20;
pub const DEFAULT_MAX_ROUNDS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("flow sampling needs at least one step")]
    NoSteps,
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("condition sequence has no generated-image block")]
    NoGenBlock,
    #[error("image grid {found:?} does not match model grid {expected:?}")]
    GridMismatch { expected: GridConfig, found: GridConfig },
}

/// Next-token scores for the last position of a sequence.
pub trait LogitSource {
    fn next_logits(&self, seq: &MultimodalSequence) -> Result<Vec<f64>, InferenceError>;
}

/// Velocity prediction for the generated block of `seq`.
pub trait VelocityField {
    fn velocity(&self, seq: &MultimodalSequence, z: &ToyImage, t: f64) -> Result<ToyImage, InferenceError>;
}

impl LogitSource for Model {
    fn next_logits(&self, seq: &MultimodalSequence) -> Result<Vec<f64>, InferenceError> {
        let (logits, _) = self.infer(seq, None, ForwardOptions { text_logits: true })?;
        let logits = logits.expect("text logits requested");
        Ok(logits.row(seq.len() - 1).to_vec())
    }
}

impl VelocityField for Model {
    fn velocity(&self, seq: &MultimodalSequence, z: &ToyImage, t: f64) -> Result<ToyImage, InferenceError> {
        let (_, v) = self.infer(seq, Some(FlowInput { z_t: z, t }), ForwardOptions::default())?;
        v.ok_or(InferenceError::NoGenBlock)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One decoded token with the scores that chose it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub token: TokenId,
    pub logits: Vec<f64>,
}

/// Greedy decoding with per-step scores. Stops after `<eos>` or
/// `max_new_tokens`.
pub fn decode_steps(
    src: &impl LogitSource,
    context: &MultimodalSequence,
    max_new_tokens: usize,
) -> Result<Vec<DecodeStep>, InferenceError> {
    let mut seq = context.clone();
    let mut steps = Vec::new();
    while steps.len() < max_new_tokens {
        let logits = src.next_logits(&seq)?;
        let token = TokenId(argmax(&logits) as u32);
        seq.extend_text(&[token]);
        steps.push(DecodeStep { token, logits });
        if token == EOS {
            break;
        }
    }
    Ok(steps)
}

pub fn decode_text(
    src: &impl LogitSource,
    context: &MultimodalSequence,
    max_new_tokens: usize,
) -> Result<Vec<TokenId>, InferenceError> {
    Ok(decode_steps(src, context, max_new_tokens)?
        .into_iter()
        .map(|s| s.token)
        .collect())
}

/// Shifted timestep grid `τ_k = shift(k / n)`, `k = 0..=n`.
pub fn timestep_grid(n_steps: usize, shift: f64) -> Vec<f64> {
    (0..=n_steps)
        .map(|k| shift_timestep(k as f64 / n_steps as f64, shift))
        .collect()
}

/// Euler integration from `z0` over the shifted grid, without clamping.
pub fn flow_integrate(
    field: &impl VelocityField,
    condition: &MultimodalSequence,
    z0: &ToyImage,
    n_steps: usize,
    shift: f64,
) -> Result<ToyImage, InferenceError> {
    if n_steps < 1 {
        return Err(InferenceError::NoSteps);
    }
    let taus = timestep_grid(n_steps, shift);
    let mut z = z0.clone();
    for k in 0..n_steps {
        let v = field.velocity(condition, &z, taus[k])?;
        let dt = taus[k + 1] - taus[k];
        z = z.zip_map(&v, |a, b| a + dt * b);
    }
    Ok(z)
}

/// Draw `z0 ~ N(0, I)`, integrate to `τ = 1` and clamp to `[−1, 1]`.
pub fn flow_sample(
    field: &impl VelocityField,
    condition: &MultimodalSequence,
    grid: GridConfig,
    n_steps: usize,
    rng: &mut impl Rng,
) -> Result<ToyImage, InferenceError> {
    if n_steps < 1 {
        return Err(InferenceError::NoSteps);
    }
    if !condition.has_gen() {
        return Err(InferenceError::NoGenBlock);
    }
    let z0 = sample_noise(grid, rng);
    Ok(flow_integrate(field, condition, &z0, n_steps, TIMESTEP_SHIFT)?.clamped())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredDetection {
    pub verdict: Label,
    pub fake_score: f64,
    pub caption: Vec<TokenId>,
    pub reason: Vec<TokenId>,
    pub raw: Vec<TokenId>,
    pub malformed: bool,
}

fn between(tokens: &[TokenId], open: TokenId, close: TokenId) -> Vec<TokenId> {
    match tokens.iter().position(|&t| t == open) {
        Some(a) => tokens[a + 1..].iter().take_while(|&&t| t != close).copied().collect(),
        None => Vec::new(),
    }
}

/// `[IMG_COND image][<bos> detect this image]`.
pub fn detection_context(image: &ToyImage) -> MultimodalSequence {
    let mut seq = MultimodalSequence::new();
    seq.push_image_cond(image).push_text(&detection_prompt(), false);
    seq
}

/// Decode an answer and read the verdict from the real/fake scores at the
/// slot after `<detect>`. Ties go to real.
pub fn detect(src: &impl LogitSource, image: &ToyImage) -> Result<StructuredDetection, InferenceError> {
    let steps = decode_steps(src, &detection_context(image), DEFAULT_MAX_NEW_TOKENS)?;
    let raw: Vec<TokenId> = steps.iter().map(|s| s.token).collect();
    let (slot, malformed) = match raw.iter().position(|&t| t == DETECT) {
        Some(k) if k + 1 < steps.len() => (k + 1, false),
        _ => (1.min(steps.len() - 1), true),
    };
    let logits = &steps[slot].logits;
    let (lf, lr) = (logits[fake_token().index()], logits[real_token().index()]);
    let fake_score = 1.0 / (1.0 + (lr - lf).exp());
    Ok(StructuredDetection {
        verdict: if lf > lr { Label::Fake } else { Label::Real },
        fake_score,
        caption: between(&raw, CAPTION, REASON),
        reason: between(&raw, REASON, EOS),
        raw,
        malformed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    StopToken,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub diagnosis: Vec<TokenId>,
    pub image: ToyImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrajectory {
    pub input: ToyImage,
    pub rounds: Vec<Round>,
    pub terminated_by: Termination,
    pub rounds_used: usize,
}

impl CorrectionTrajectory {
    /// The round-1 image: the single-step correction.
    pub fn single_step(&self) -> &ToyImage {
        &self.rounds[0].image
    }

    pub fn final_image(&self) -> &ToyImage {
        &self.rounds[self.rounds.len() - 1].image
    }
}

/// `[please repair this image][IMG_COND image]`, ready for the diagnosis.
pub fn repair_context(image: &ToyImage) -> MultimodalSequence {
    let mut seq = MultimodalSequence::new();
    seq.push_text(&repair_prompt(), false).push_image_cond(image);
    seq
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectOptions {
    pub max_rounds: usize,
    pub flow_steps: usize,
}

impl Default for CorrectOptions {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            flow_steps: DEFAULT_FLOW_STEPS,
        }
    }
}

/// Alternate diagnosis and regeneration until the model emits `<stop>` or
/// `max_rounds` is reached.
pub fn vcot_correct<M: LogitSource + VelocityField>(
    model: &M,
    image: &ToyImage,
    opts: CorrectOptions,
    rng: &mut impl Rng,
) -> Result<CorrectionTrajectory, InferenceError> {
    if opts.max_rounds < 1 {
        return Err(InferenceError::NoRounds);
    }
    let grid = image.grid();
    let mut current = image.clone();
    let mut rounds = Vec::new();
    let mut terminated_by = Termination::MaxRounds;
    while rounds.len() < opts.max_rounds {
        let mut seq = repair_context(&current);
        let diagnosis = decode_text(model, &seq, DIAGNOSIS_LEN)?;
        if diagnosis.first() == Some(&STOP) {
            rounds.push(Round {
                diagnosis,
                image: current.clone(),
            });
            terminated_by = Termination::StopToken;
            break;
        }
        seq.extend_text(&diagnosis);
        seq.push_image_gen(grid, false);
        let next = flow_sample(model, &seq, grid, opts.flow_steps, rng)?;
        rounds.push(Round {
            diagnosis,
            image: next.clone(),
        });
        current = next;
    }
    Ok(CorrectionTrajectory {
        input: image.clone(),
        rounds_used: rounds.len(),
        rounds,
        terminated_by,
    })
}

#[cfg(test)]
mod tests;
