//! Autoregressive cross-entropy, rectified flow matching, timestep sampling
//! and the weighted combination used in training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dataset::{Modality, TokenValue, TrainSample};
use crate::model::{FlowInput, ForwardOptions, Model, ModelError};
use crate::nn::{DenseArray, NnError, Tape, Var};
use crate::toyworld::{GridConfig, ToyImage};

pub const TIMESTEP_SHIFT: f64 = 4.0;
pub const LAMBDA_AR: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(GridConfig, GridConfig),
    #[error("no supervised text position; sample misassembled")]
    NoSupervisedPositions,
    #[error("loss weight must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("sample has a generated block but no flow target")]
    MissingTarget,
}

/// `t = s·u / (1 + (s−1)·u)`.
pub fn shift_timestep(u: f64, shift: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

pub fn sample_timestep(rng: &mut impl Rng, shift: f64) -> f64 {
    shift_timestep(rng.random::<f64>(), shift)
}

/// i.i.d. standard normal noise image.
pub fn sample_noise(grid: GridConfig, rng: &mut impl Rng) -> ToyImage {
    let data = (0..grid.len()).map(|_| StandardNormal.sample(rng)).collect();
    ToyImage::from_vec(grid, data).expect("length matches grid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub z_t: ToyImage,
    pub t: f64,
    pub z0: ToyImage,
}

pub fn interpolate(x1: &ToyImage, z0: &ToyImage, t: f64) -> Result<FlowState, ObjectiveError> {
    if x1.grid() != z0.grid() {
        return Err(ObjectiveError::ShapeMismatch(x1.grid(), z0.grid()));
    }
    Ok(FlowState {
        z_t: x1.zip_map(z0, |x, z| t * x + (1.0 - t) * z),
        t,
        z0: z0.clone(),
    })
}

/// `x1 − z0`.
pub fn target_velocity(x1: &ToyImage, z0: &ToyImage) -> Result<ToyImage, ObjectiveError> {
    if x1.grid() != z0.grid() {
        return Err(ObjectiveError::ShapeMismatch(x1.grid(), z0.grid()));
    }
    Ok(x1.zip_map(z0, |x, z| x - z))
}

/// Mean squared error of `pred` against `x1 − z0`.
pub fn fm_loss_value(pred: &ToyImage, x1: &ToyImage, z0: &ToyImage) -> Result<f64, ObjectiveError> {
    let target = target_velocity(x1, z0)?;
    if pred.grid() != target.grid() {
        return Err(ObjectiveError::ShapeMismatch(pred.grid(), target.grid()));
    }
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Flow-matching loss on the tape. `velocity` is the token-major `[n, C]`
/// head output; `rows` selects the supervised generated tokens and `sites`
/// their spatial site in the target.
pub fn fm_loss(
    tape: &mut Tape<'_>,
    velocity: Var,
    rows: &[usize],
    sites: &[usize],
    target: &ToyImage,
) -> Result<Var, ObjectiveError> {
    let all = target.to_tokens();
    let c = target.channels();
    let picked = DenseArray::from_fn(&[sites.len(), c], |k| all.at2(sites[k / c], k % c));
    let pred = if rows.len() == tape.value(velocity).rows() {
        velocity
    } else {
        tape.gather_rows(velocity, rows)?
    };
    let tgt = tape.constant(picked);
    let d = tape.sub(pred, tgt)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

/// Mean over `(row, target)` pairs of `−log softmax(logits[row])[target]`.
pub fn ar_loss(tape: &mut Tape<'_>, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var, ObjectiveError> {
    if rows.is_empty() {
        return Err(ObjectiveError::NoSupervisedPositions);
    }
    let sel = tape.gather_rows(logits, rows)?;
    let lse = tape.log_sum_exp(sel)?;
    let picked = tape.pick(sel, targets)?;
    let nll = tape.sub(lse, picked)?;
    Ok(tape.mean(nll)?)
}

/// Plain-value form of [`ar_loss`]: row `i` of `logits` scores `targets[i]`,
/// counted only where `mask[i]`.
pub fn ar_loss_value(logits: &DenseArray, targets: &[usize], mask: &[bool]) -> Result<f64, ObjectiveError> {
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| mask[i]).collect();
    let tg: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = ar_loss(&mut tape, l, &rows, &tg)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub fm: Option<f64>,
    pub ar: Option<f64>,
    pub combined: f64,
    pub lambda: f64,
}

/// `fm + λ·ar` when both are present, otherwise whichever term is present.
pub fn combined_loss(fm: Option<f64>, ar: Option<f64>, lambda: f64) -> Result<f64, ObjectiveError> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(ObjectiveError::NegativeLambda(lambda));
    }
    Ok(match (fm, ar) {
        (Some(f), Some(a)) => f + lambda * a,
        (Some(f), None) => f,
        (None, Some(a)) => a,
        (None, None) => 0.0,
    })
}

/// Flow draw for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub z0: ToyImage,
    pub t: f64,
}

impl FlowDraw {
    pub fn sample(grid: GridConfig, shift: f64, rng: &mut impl Rng) -> Self {
        let z0 = sample_noise(grid, rng);
        let t = sample_timestep(rng, shift);
        Self { z0, t }
    }
}

/// Loss variables recorded for one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub combined: Var,
    pub fm: Option<Var>,
    pub ar: Option<Var>,
}

impl SampleLoss {
    pub fn bundle(&self, tape: &Tape<'_>, lambda: f64) -> LossBundle {
        let v = |x: Option<Var>| x.map(|x| tape.value(x).item());
        LossBundle {
            fm: v(self.fm),
            ar: v(self.ar),
            combined: tape.value(self.combined).item(),
            lambda,
        }
    }
}

/// Forward one sample and record `L_FM + λ·L_AR` (either term alone when
/// the other has no supervision).
pub fn sample_loss<'p>(
    tape: &mut Tape<'p>,
    vars: &[Var],
    model: &Model,
    sample: &TrainSample,
    flow: Option<&FlowDraw>,
    lambda: f64,
) -> Result<SampleLoss, ObjectiveError> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(ObjectiveError::NegativeLambda(lambda));
    }
    let seq = &sample.sequence;
    let targets = seq.ar_targets();
    let state = match (seq.has_gen(), flow) {
        (true, Some(f)) => {
            let x1 = sample.fm_target.as_ref().ok_or(ObjectiveError::MissingTarget)?;
            Some((interpolate(x1, &f.z0, f.t)?, x1))
        }
        (true, None) => return Err(ModelError::MissingTimestep.into()),
        (false, _) => None,
    };
    let flow_in = state.as_ref().map(|(s, _)| FlowInput { z_t: &s.z_t, t: s.t });
    let out = model.forward(
        tape,
        vars,
        seq,
        flow_in,
        ForwardOptions {
            text_logits: !targets.is_empty(),
        },
    )?;

    let ar = match out.text_logits {
        Some(logits) => {
            let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
            let ids: Vec<usize> = targets.iter().map(|t| t.1.index()).collect();
            Some(ar_loss(tape, logits, &rows, &ids)?)
        }
        None => None,
    };
    let fm = match (out.velocity, &state) {
        (Some(v), Some((s, x1))) => {
            let gen = seq.positions(Modality::ImgGen);
            let mut rows = Vec::new();
            let mut sites = Vec::new();
            for (r, &pos) in gen.iter().enumerate() {
                if seq.fm_loss_mask[pos] {
                    rows.push(r);
                    if let TokenValue::Site(site) = seq.tokens[pos].value {
                        sites.push(site);
                    }
                }
            }
            if rows.is_empty() {
                None
            } else {
                let target = target_velocity(x1, &s.z0)?;
                Some(fm_loss(tape, v, &rows, &sites, &target)?)
            }
        }
        _ => None,
    };
    let combined = match (fm, ar) {
        (Some(f), Some(a)) => {
            let wa = tape.scale(a, lambda)?;
            tape.add(f, wa)?
        }
        (Some(f), None) => f,
        (None, Some(a)) => a,
        (None, None) => return Err(ObjectiveError::NoSupervisedPositions),
    };
    Ok(SampleLoss { combined, fm, ar })
}

#[cfg(test)]
mod tests;
