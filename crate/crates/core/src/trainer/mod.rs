//! Two-stage curriculum training: task sampling, AdamW with warmup and
//! clipping, weight EMA and checkpoints.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};

use crate::dataset::{assemble, AssemblyInput, Dataset, DatasetError, TaskTag, TrainSample};
use crate::model::{round_to_f32, Model, ModelConfig, ModelError};
use crate::nn::{DenseArray, ParamSet, Tape};
use crate::objectives::{sample_loss, FlowDraw, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training data for task {0}")]
    NoData(&'static str),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage: u8,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_ratio: f64,
    pub lambda: f64,
    pub timestep_shift: f64,
    pub sampling_weights: BTreeMap<TaskTag, f64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl TrainingConfig {
    pub fn for_stage(stage: u8) -> Self {
        let weights: &[(TaskTag, f64)] = if stage == 1 {
            &[(TaskTag::Detect, 1.0), (TaskTag::S1Correct, 5.0)]
        } else {
            &[
                (TaskTag::Detect, 2.0),
                (TaskTag::VcotInitial, 1.0),
                (TaskTag::VcotIntermediate, 1.0),
                (TaskTag::VcotTerminate, 0.1),
            ]
        };
        let model = ModelConfig::default();
        Self {
            stage,
            lr: 2e-5,
            warmup_steps: 500,
            total_steps: 5000,
            betas: [0.9, 0.95],
            adam_eps: 1e-15,
            weight_decay: 0.0,
            clip_norm: 1.0,
            ema_ratio: if stage == 1 { 0.999 } else { 0.990 },
            lambda: 0.25,
            timestep_shift: 4.0,
            sampling_weights: weights.iter().copied().collect(),
            batch_size: 8,
            seed: 0,
            checkpoint_every: 1000,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return fail(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) || !(0.0..=1.0).contains(&self.ema_ratio) {
            return fail("lr, clip_norm and ema_ratio out of range".into());
        }
        if self.lambda < 0.0 || self.timestep_shift <= 0.0 {
            return fail("lambda and timestep_shift out of range".into());
        }
        if self.sampling_weights.values().any(|w| !(*w >= 0.0)) || self.sampling_weights.values().sum::<f64>() <= 0.0 {
            return fail("sampling weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    pub fn model_config(&self, grid: crate::toyworld::GridConfig) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            grid,
            ..ModelConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup to `lr` over `warmup` steps, constant afterwards.
pub fn lr_at(step: u64, lr: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * (step as f64 / warmup as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<DenseArray>,
    pub v: Vec<DenseArray>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| DenseArray::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[DenseArray],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGrad(params.names()[i].clone()));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (pk, &gk)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *pk -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *pk);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[DenseArray]) -> f64 {
    grads.iter().map(DenseArray::sq_norm).sum::<f64>().sqrt()
}

/// Scale every gradient by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [DenseArray], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// `ema ← ratio·ema + (1−ratio)·params`.
pub fn ema_update(ema: &mut ParamSet, params: &ParamSet, ratio: f64) {
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = ratio * *ev + (1.0 - ratio) * pv;
        }
    }
}

/// Categorical draw over the configured task weights.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    tasks: Vec<TaskTag>,
    dist: WeightedIndex<f64>,
}

impl TaskSampler {
    pub fn new(weights: &BTreeMap<TaskTag, f64>) -> Result<Self, TrainError> {
        let tasks: Vec<TaskTag> = weights.keys().copied().collect();
        let dist = WeightedIndex::new(weights.values().copied()).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Self { tasks, dist })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TaskTag {
        self.tasks[self.dist.sample(rng)]
    }

    /// Normalized weight of `task`.
    pub fn probability(weights: &BTreeMap<TaskTag, f64>, task: TaskTag) -> f64 {
        let total: f64 = weights.values().sum();
        weights.get(&task).copied().unwrap_or(0.0) / total
    }
}

/// One training example with its flow draw.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub sample: TrainSample,
    pub flow: Option<FlowDraw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task: TaskTag,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub task: TaskTag,
    pub loss_fm: Option<f64>,
    pub loss_ar: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,task,loss_fm,loss_ar,loss,lr,grad_norm";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.9e},{:.9e},{:.9e}",
            self.step,
            self.task.name(),
            opt(self.loss_fm),
            opt(self.loss_ar),
            self.loss,
            self.lr,
            self.grad_norm
        )
    }
}

/// Batch-mean loss values and summed gradients, in sample order.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub grads: Vec<DenseArray>,
    pub loss: f64,
    pub loss_fm: Option<f64>,
    pub loss_ar: Option<f64>,
}

struct ItemResult {
    grads: Vec<Option<DenseArray>>,
    loss: f64,
    fm: Option<f64>,
    ar: Option<f64>,
}

fn item_gradients(model: &Model, item: &BatchItem, lambda: f64) -> Result<ItemResult, TrainError> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let out = sample_loss(&mut tape, &vars, model, &item.sample, item.flow.as_ref(), lambda)?;
    let b = out.bundle(&tape, lambda);
    let mut g = tape.backward(out.combined).map_err(ObjectiveError::from)?;
    Ok(ItemResult {
        grads: vars.iter().map(|&v| g.take(v)).collect(),
        loss: b.combined,
        fm: b.fm,
        ar: b.ar,
    })
}

/// Mean loss and gradient over the batch. Per-sample work is spread over
/// `threads` workers; reduction always runs in sample order so the result
/// does not depend on the thread count.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    lambda: f64,
    threads: usize,
) -> Result<BatchGradients, TrainError> {
    let n = batch.items.len();
    let threads = threads.clamp(1, n.max(1));
    let results: Vec<Result<ItemResult, TrainError>> = if threads == 1 {
        batch.items.iter().map(|it| item_gradients(model, it, lambda)).collect()
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .items
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|it| item_gradients(model, it, lambda)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut grads: Vec<DenseArray> = model
        .params
        .tensors()
        .iter()
        .map(|t| DenseArray::zeros(t.shape()))
        .collect();
    let (mut loss, mut fm, mut ar) = (0.0, None::<f64>, None::<f64>);
    for r in results {
        let r = r?;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            if let Some(g) = g {
                acc.add_assign(g);
            }
        }
        loss += r.loss;
        if let Some(v) = r.fm {
            fm = Some(fm.unwrap_or(0.0) + v);
        }
        if let Some(v) = r.ar {
            ar = Some(ar.unwrap_or(0.0) + v);
        }
    }
    let scale = 1.0 / n as f64;
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok(BatchGradients {
        grads,
        loss: loss * scale,
        loss_fm: fm.map(|v| v * scale),
        loss_ar: ar.map(|v| v * scale),
    })
}

/// Training state for one curriculum stage.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainingConfig,
    pub model: Model,
    pub ema: ParamSet,
    pub optimizer: OptimizerState,
    sampler: TaskSampler,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Start from `model`; the EMA starts as a copy of its parameters.
    pub fn new(config: TrainingConfig, mut model: Model) -> Result<Self, TrainError> {
        config.validate()?;
        round_to_f32(&mut model.params);
        let sampler = TaskSampler::new(&config.sampling_weights)?;
        let rng = ChaCha8Rng::seed_from_u64(crate::dataset::derive_seed(config.seed, 100 + config.stage as u64, 0));
        Ok(Self {
            ema: model.params.clone(),
            optimizer: OptimizerState::new(&model.params),
            sampler,
            rng,
            config,
            model,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Draw a task, then `batch_size` records for it, with per-sample flow draws.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Batch, TrainError> {
        let task = self.sampler.sample(&mut self.rng);
        let grid = self.model.config.grid;
        let mut items = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let mut samples = if task.uses_correction_data() {
                if data.train_correct.is_empty() {
                    return Err(TrainError::NoData(task.name()));
                }
                let i = self.rng.random_range(0..data.train_correct.len());
                assemble(AssemblyInput::Correction(&data.train_correct[i]), task)?
            } else {
                if data.train_detect.is_empty() {
                    return Err(TrainError::NoData(task.name()));
                }
                let i = self.rng.random_range(0..data.train_detect.len());
                assemble(AssemblyInput::Detection(&data.train_detect[i]), task)?
            };
            let pick = if samples.len() > 1 {
                self.rng.random_range(0..samples.len())
            } else {
                0
            };
            let sample = samples.swap_remove(pick);
            let flow = sample
                .sequence
                .has_gen()
                .then(|| FlowDraw::sample(grid, self.config.timestep_shift, &mut self.rng));
            items.push(BatchItem { sample, flow });
        }
        Ok(Batch { task, items })
    }

    /// Forward, backward, clip, AdamW and EMA on one batch.
    pub fn train_on(&mut self, batch: &Batch, threads: usize) -> Result<StepLog, TrainError> {
        let mut bg = batch_gradients(&self.model, batch, self.config.lambda, threads)?;
        let grad_norm = clip_grad_norm(&mut bg.grads, self.config.clip_norm);
        let step = self.optimizer.step + 1;
        let lr = lr_at(step, self.config.lr, self.config.warmup_steps);
        adamw_step(
            &mut self.model.params,
            &bg.grads,
            &mut self.optimizer,
            lr,
            &self.config.adam(),
        )?;
        round_to_f32(&mut self.model.params);
        ema_update(&mut self.ema, &self.model.params, self.config.ema_ratio);
        round_to_f32(&mut self.ema);
        Ok(StepLog {
            step,
            task: batch.task,
            loss_fm: bg.loss_fm,
            loss_ar: bg.loss_ar,
            loss: bg.loss,
            lr,
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config,
            params: self.model.params.clone(),
            ema: self.ema.clone(),
        }
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub threads: usize,
    /// Directory for periodic `ckpt_step{N}.gshd` files.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_step: Option<&'a mut dyn FnMut(&StepLog)>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// Build the starting model for a stage: stage 1 starts fresh; stage 2
/// continues from the live parameters of a stage-1 checkpoint.
pub fn initial_model(config: &TrainingConfig, data: &Dataset, init: Option<&Checkpoint>) -> Result<Model, TrainError> {
    match (config.stage, init) {
        (_, Some(c)) => Ok(c.model()?),
        (1, None) => Ok(Model::init(config.model_config(data.manifest.grid), config.seed)?),
        _ => Err(TrainError::Config("stage 2 requires a stage-1 checkpoint".into())),
    }
}

/// Run `total_steps` iterations of the stage.
pub fn run_stage(
    config: &TrainingConfig,
    data: &Dataset,
    init: Option<&Checkpoint>,
    mut opts: RunOptions<'_>,
) -> Result<StageOutcome, TrainError> {
    let model = initial_model(config, data, init)?;
    if model.config.grid != data.manifest.grid {
        return Err(TrainError::Config(format!(
            "checkpoint grid {:?} does not match data grid {:?}",
            model.config.grid, data.manifest.grid
        )));
    }
    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut log = Vec::with_capacity(config.total_steps as usize);
    while trainer.step() < config.total_steps {
        let batch = trainer.next_batch(data)?;
        let entry = trainer.train_on(&batch, opts.threads.max(1))?;
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&entry);
        }
        log.push(entry);
        if let Some(dir) = &opts.checkpoint_dir {
            let s = trainer.step();
            if config.checkpoint_every > 0 && s % config.checkpoint_every == 0 && s < config.total_steps {
                checkpoint::save(&dir.join(format!("ckpt_step{s}.gshd")), &trainer.checkpoint())?;
            }
        }
    }
    Ok(StageOutcome {
        checkpoint: trainer.checkpoint(),
        log,
    })
}
