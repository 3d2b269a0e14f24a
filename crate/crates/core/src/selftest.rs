//! Built-in consistency suites shared by the `selftest` command and the
//! acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    assemble, build_correction_tuple, build_detection_sample, AssemblyInput, MultimodalSequence, TaskTag, TrainSample,
};
use crate::inference::{flow_integrate, repair_context, InferenceError, VelocityField};
use crate::model::{Expert, Model, ModelConfig};
use crate::nn::{gradient_check, DenseArray, ParamSet, Tape};
use crate::objectives::{ar_loss, sample_noise, target_velocity, FlowDraw, ObjectiveError, LAMBDA_AR, TIMESTEP_SHIFT};
use crate::toyworld::{gen_clean, vocab, GridConfig, ToyImage};
use crate::trainer::{adamw_step, OptimizerState, TrainingConfig};

#[derive(Debug, thiserror::Error)]
pub enum SelftestError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

impl From<crate::model::ModelError> for SelftestError {
    fn from(e: crate::model::ModelError) -> Self {
        Self::Objective(e.into())
    }
}

impl From<crate::nn::NnError> for SelftestError {
    fn from(e: crate::nn::NnError) -> Self {
        Self::Objective(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn failed(name: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Two-layer, width-16 model on a 2×2 grid.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        time_dim: 16,
        grid: gradcheck_grid(),
        ..ModelConfig::default()
    }
}

fn gradcheck_grid() -> GridConfig {
    GridConfig {
        channels: 3,
        height: 2,
        width: 2,
    }
}

/// A sample carrying both supervised text and a generated block, so the
/// combined loss has both terms.
pub fn gradcheck_sample() -> TrainSample {
    let grid = gradcheck_grid();
    let cond = ToyImage::from_vec(grid, (0..grid.len()).map(|k| (k as f64 * 0.73).sin()).collect()).unwrap();
    let target = ToyImage::from_vec(grid, (0..grid.len()).map(|k| (k as f64 * 1.31).cos() * 0.8).collect()).unwrap();
    let diag = vocab()
        .tokenize("artifact structure quadrant top_left magnitude high")
        .unwrap();
    let mut seq = repair_context(&cond);
    seq.push_text(&diag, true).push_image_gen(grid, true);
    TrainSample {
        sequence: seq,
        task_tag: TaskTag::VcotInitial,
        fm_target: Some(target),
    }
}

/// Central-difference check of every parameter of the combined loss.
pub fn check_gradients() -> CheckResult {
    const NAME: &str = "gradient_check";
    let run = || -> Result<CheckResult, ObjectiveError> {
        let model = Model::init(gradcheck_config(), 17)?;
        let sample = gradcheck_sample();
        let len = sample.sequence.len();
        let flow = FlowDraw {
            z0: sample_noise(gradcheck_grid(), &mut ChaCha8Rng::seed_from_u64(5)),
            t: 0.37,
        };
        {
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let l = crate::objectives::sample_loss(&mut tape, &vars, &model, &sample, Some(&flow), LAMBDA_AR)?;
            if l.fm.is_none() || l.ar.is_none() {
                return Ok(CheckResult::new(NAME, false, "sample lacks a loss term".into()));
            }
        }
        let report = gradient_check(
            |tape, vars| {
                crate::objectives::sample_loss(tape, vars, &model, &sample, Some(&flow), LAMBDA_AR)
                    .map(|l| l.combined)
                    .map_err(|e| match e {
                        ObjectiveError::Nn(e) => e,
                        other => panic!("sample validated above: {other}"),
                    })
            },
            &model.params,
            1e-5,
        )?;
        Ok(CheckResult::new(
            NAME,
            report.max_relative_error < GRADCHECK_TOLERANCE && len <= 32,
            format!(
                "max_rel_err={:.3e} at {:?} over {} scalars, seq_len={len}",
                report.max_relative_error, report.worst, report.checked
            ),
        ))
    };
    run().unwrap_or_else(|e| CheckResult::failed(NAME, e))
}

struct ConstField(f64);

impl VelocityField for ConstField {
    fn velocity(&self, _: &MultimodalSequence, z: &ToyImage, _: f64) -> Result<ToyImage, InferenceError> {
        Ok(z.map(|_| self.0))
    }
}

struct OracleField(ToyImage);

impl VelocityField for OracleField {
    fn velocity(&self, _: &MultimodalSequence, _: &ToyImage, _: f64) -> Result<ToyImage, InferenceError> {
        Ok(self.0.clone())
    }
}

/// Endpoint error under the straight-line oracle, and telescoping for a
/// constant field. Returns `(oracle max error, telescoping max error)`.
pub fn sampler_errors() -> Result<(f64, f64), ObjectiveError> {
    let grid = GridConfig::default();
    let x1 = gen_clean(9, grid);
    let z0 = sample_noise(grid, &mut ChaCha8Rng::seed_from_u64(11));
    let mut cond = repair_context(&gen_clean(1, grid));
    cond.push_image_gen(grid, false);
    let field = OracleField(target_velocity(&x1, &z0)?);
    let mut oracle_err = 0f64;
    let mut tele_err = 0f64;
    for n in [1, 5, 20] {
        let z = flow_integrate(&field, &cond, &z0, n, TIMESTEP_SHIFT).expect("oracle field is infallible");
        oracle_err = oracle_err.max(z.zip_map(&x1, |a, b| (a - b).abs()).max_abs());
        let z = flow_integrate(&ConstField(0.3), &cond, &z0, n, TIMESTEP_SHIFT).expect("constant field is infallible");
        tele_err = tele_err.max(z.zip_map(&z0, |a, b| (a - (b + 0.3)).abs()).max_abs());
    }
    Ok((oracle_err, tele_err))
}

pub fn check_sampler() -> CheckResult {
    const NAME: &str = "sampler_exactness";
    match sampler_errors() {
        Ok((o, t)) => CheckResult::new(
            NAME,
            o < 1e-6 && t < 1e-14,
            format!("oracle_max_err={o:.3e} telescoping_max_err={t:.3e}"),
        ),
        Err(e) => CheckResult::failed(NAME, e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskAudit {
    /// Squared gradient norm of the text head on an intermediate sample.
    pub text_head_on_intermediate: f64,
    /// Squared gradient norm of all correction-expert weights on a detect sample.
    pub correction_on_detect: f64,
    /// Squared gradient norm of the logits rows at image-condition positions.
    pub logits_at_condition: f64,
}

fn grad_norms(
    model: &Model,
    sample: &TrainSample,
    flow: Option<&FlowDraw>,
) -> Result<Vec<(String, f64)>, ObjectiveError> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let l = crate::objectives::sample_loss(&mut tape, &vars, model, sample, flow, LAMBDA_AR)?;
    let grads = tape.backward(l.combined)?;
    Ok(model
        .params
        .names()
        .iter()
        .zip(&vars)
        .map(|(n, &v)| (n.clone(), grads.get(v).map_or(0.0, DenseArray::sq_norm)))
        .collect())
}

pub fn mask_audit() -> Result<MaskAudit, SelftestError> {
    let grid = GridConfig::default();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        time_dim: 16,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 23).map_err(ObjectiveError::from)?;
    let tuple = build_correction_tuple(4, grid, &crate::dataset::DEFAULT_MID_ALPHAS)?;
    let detect = build_detection_sample(4, grid, true)?;
    let flow = FlowDraw {
        z0: sample_noise(grid, &mut ChaCha8Rng::seed_from_u64(2)),
        t: 0.6,
    };

    let mid = assemble(AssemblyInput::Correction(&tuple), TaskTag::VcotIntermediate)?;
    let text_head: f64 = grad_norms(&model, &mid[0], Some(&flow))?
        .iter()
        .filter(|(n, _)| n.starts_with("head_text."))
        .map(|(_, g)| g)
        .sum();

    let det = assemble(AssemblyInput::Detection(&detect), TaskTag::Detect)?;
    let correction_names = model.expert_param_names(Expert::Correction);
    let correction: f64 = grad_norms(&model, &det[0], None)?
        .iter()
        .filter(|(n, _)| correction_names.contains(n))
        .map(|(_, g)| g)
        .sum();

    let seq = &det[0].sequence;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let out = model.forward(
        &mut tape,
        &vars,
        seq,
        None,
        crate::model::ForwardOptions { text_logits: true },
    )?;
    let logits = out.text_logits.expect("requested");
    let targets = seq.ar_targets();
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let ids: Vec<usize> = targets.iter().map(|t| t.1.index()).collect();
    let loss = ar_loss(&mut tape, logits, &rows, &ids)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(logits).expect("logits feed the loss");
    let at_cond: f64 = seq
        .positions(crate::dataset::Modality::ImgCond)
        .into_iter()
        .map(|r| g.row(r).iter().map(|x| x * x).sum::<f64>())
        .sum();

    Ok(MaskAudit {
        text_head_on_intermediate: text_head,
        correction_on_detect: correction,
        logits_at_condition: at_cond,
    })
}

pub fn check_masks() -> CheckResult {
    const NAME: &str = "mask_soundness";
    match mask_audit() {
        Ok(a) => CheckResult::new(
            NAME,
            a.text_head_on_intermediate == 0.0 && a.correction_on_detect == 0.0 && a.logits_at_condition == 0.0,
            format!("{a:?}"),
        ),
        Err(e) => CheckResult::failed(NAME, e),
    }
}

/// Library AdamW against an inline scalar loop on `f(x) = x²`.
/// Returns the absolute difference after `steps` updates.
pub fn optimizer_oracle_gap(steps: usize) -> f64 {
    let cfg = TrainingConfig::for_stage(1).adam();
    let lr = 1e-2;
    let mut p = ParamSet::new();
    p.push("x", DenseArray::new(vec![1], vec![1.5]).expect("scalar"));
    let mut st = OptimizerState::new(&p);
    let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for k in 1..=steps as i32 {
        let g = DenseArray::new(vec![1], vec![2.0 * p.tensors()[0].data()[0]]).expect("scalar");
        adamw_step(&mut p, &[g], &mut st, lr, &cfg).expect("finite gradient");
        let gr = 2.0 * x;
        m = b1 * m + (1.0 - b1) * gr;
        v = b2 * v + (1.0 - b2) * gr * gr;
        let mh = m / (1.0 - b1.powi(k));
        let vh = v / (1.0 - b2.powi(k));
        x -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    (p.tensors()[0].data()[0] - x).abs()
}

pub fn check_optimizer() -> CheckResult {
    let gap = optimizer_oracle_gap(100);
    CheckResult::new("optimizer_oracle", gap < 1e-10, format!("gap={gap:.3e}"))
}

pub fn run_all() -> Vec<CheckResult> {
    vec![check_gradients(), check_sampler(), check_masks(), check_optimizer()]
}
