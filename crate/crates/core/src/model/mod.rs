//! Mixture-of-transformers network.
//!
//! Every token is routed to one of two experts by modality: text and
//! conditioning-image tokens go to the detection expert, generated-image
//! tokens to the correction expert. Each expert owns its layer norms,
//! attention projections and feed-forward block, but a single softmax runs
//! over the whole sequence in every layer, so the experts read each other's
//! keys and values.

mod mask;

pub use mask::{build_attention_mask, AttentionMask, MASKED_BIAS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Modality, MultimodalSequence, TokenValue};
use crate::nn::{DenseArray, NnError, ParamId, ParamSet, Tape, Var};
use crate::toyworld::{vocab, GridConfig, ToyImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("sequence has generated-image tokens but no timestep was given")]
    MissingTimestep,
    #[error("generated-image input missing or mis-shaped for grid {0:?}")]
    BadFlowInput(GridConfig),
    #[error("image segment does not match model grid {0:?}")]
    GridMismatch(GridConfig),
    #[error("sequence length {len} exceeds the {max} text positions")]
    TooLong { len: usize, max: usize },
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter set has {found} tensors, expected {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("n_heads {n_heads} must divide d_model {d_model}")]
    HeadSplit { d_model: usize, n_heads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub grid: GridConfig,
    pub max_positions: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            vocab_size: vocab().len(),
            grid: GridConfig::default(),
            max_positions: 192,
            time_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::HeadSplit {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Expert {
    Detection,
    Correction,
}

impl Expert {
    pub fn name(self) -> &'static str {
        match self {
            Expert::Detection => "det",
            Expert::Correction => "cor",
        }
    }
}

/// Text and conditioning images go to the detection expert; generated
/// image tokens go to the correction expert.
pub fn route(modality: Modality) -> Expert {
    match modality {
        Modality::Text | Modality::ImgCond => Expert::Detection,
        Modality::ImgGen => Expert::Correction,
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct ExpertIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    tok_emb: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    gen_w: ParamId,
    gen_b: ParamId,
    pos_img: ParamId,
    pos_text: ParamId,
    seg_emb: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    layers: Vec<[ExpertIds; 2]>,
    det_lnf_g: ParamId,
    det_lnf_b: ParamId,
    head_text_w: ParamId,
    head_text_b: ParamId,
    cor_lnf_g: ParamId,
    cor_lnf_b: ParamId,
    head_vel_w: ParamId,
    head_vel_b: ParamId,
}

/// Canonical parameter list: name, shape, initializer.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let c = cfg.grid.channels;
    let out_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let w = Init::Normal(INIT_STD);
    let mut v: Vec<(String, Vec<usize>, Init)> = vec![
        ("tok_emb".into(), vec![cfg.vocab_size, d], w),
        ("cond_in.w".into(), vec![c, d], w),
        ("cond_in.b".into(), vec![d], Init::Zeros),
        ("gen_in.w".into(), vec![c, d], w),
        ("gen_in.b".into(), vec![d], Init::Zeros),
        ("pos_img".into(), vec![cfg.grid.sites(), d], w),
        ("pos_text".into(), vec![cfg.max_positions, d], w),
        ("seg_emb".into(), vec![3, d], w),
        ("time.w1".into(), vec![cfg.time_dim, d], w),
        ("time.b1".into(), vec![d], Init::Zeros),
        ("time.w2".into(), vec![d, d], w),
        ("time.b2".into(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        for e in [Expert::Detection, Expert::Correction] {
            let p = format!("layers.{l}.{}", e.name());
            v.extend([
                (format!("{p}.ln1.g"), vec![d], Init::Ones),
                (format!("{p}.ln1.b"), vec![d], Init::Zeros),
                (format!("{p}.attn.wq"), vec![d, d], w),
                (format!("{p}.attn.wk"), vec![d, d], w),
                (format!("{p}.attn.wv"), vec![d, d], w),
                (format!("{p}.attn.wo"), vec![d, d], Init::Normal(out_std)),
                (format!("{p}.ln2.g"), vec![d], Init::Ones),
                (format!("{p}.ln2.b"), vec![d], Init::Zeros),
                (format!("{p}.ffn.w1"), vec![d, 4 * d], w),
                (format!("{p}.ffn.b1"), vec![4 * d], Init::Zeros),
                (format!("{p}.ffn.w2"), vec![4 * d, d], Init::Normal(out_std)),
                (format!("{p}.ffn.b2"), vec![d], Init::Zeros),
            ]);
        }
    }
    v.extend([
        ("det.ln_f.g".into(), vec![d], Init::Ones),
        ("det.ln_f.b".into(), vec![d], Init::Zeros),
        ("head_text.w".into(), vec![d, cfg.vocab_size], w),
        ("head_text.b".into(), vec![cfg.vocab_size], Init::Zeros),
        ("cor.ln_f.g".into(), vec![d], Init::Ones),
        ("cor.ln_f.b".into(), vec![d], Init::Zeros),
        ("head_vel.w".into(), vec![d, c], w),
        ("head_vel.b".into(), vec![c], Init::Zeros),
    ]);
    v
}

fn resolve_ids(cfg: &ModelConfig, params: &ParamSet) -> Result<ParamIds, ModelError> {
    let id = |name: &str| params.find(name).map_err(ModelError::from);
    let expert = |l: usize, e: Expert| -> Result<ExpertIds, ModelError> {
        let p = format!("layers.{l}.{}", e.name());
        Ok(ExpertIds {
            ln1_g: id(&format!("{p}.ln1.g"))?,
            ln1_b: id(&format!("{p}.ln1.b"))?,
            wq: id(&format!("{p}.attn.wq"))?,
            wk: id(&format!("{p}.attn.wk"))?,
            wv: id(&format!("{p}.attn.wv"))?,
            wo: id(&format!("{p}.attn.wo"))?,
            ln2_g: id(&format!("{p}.ln2.g"))?,
            ln2_b: id(&format!("{p}.ln2.b"))?,
            ff_w1: id(&format!("{p}.ffn.w1"))?,
            ff_b1: id(&format!("{p}.ffn.b1"))?,
            ff_w2: id(&format!("{p}.ffn.w2"))?,
            ff_b2: id(&format!("{p}.ffn.b2"))?,
        })
    };
    let layers = (0..cfg.n_layers)
        .map(|l| Ok([expert(l, Expert::Detection)?, expert(l, Expert::Correction)?]))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(ParamIds {
        tok_emb: id("tok_emb")?,
        cond_w: id("cond_in.w")?,
        cond_b: id("cond_in.b")?,
        gen_w: id("gen_in.w")?,
        gen_b: id("gen_in.b")?,
        pos_img: id("pos_img")?,
        pos_text: id("pos_text")?,
        seg_emb: id("seg_emb")?,
        time_w1: id("time.w1")?,
        time_b1: id("time.b1")?,
        time_w2: id("time.w2")?,
        time_b2: id("time.b2")?,
        layers,
        det_lnf_g: id("det.ln_f.g")?,
        det_lnf_b: id("det.ln_f.b")?,
        head_text_w: id("head_text.w")?,
        head_text_b: id("head_text.b")?,
        cor_lnf_g: id("cor.ln_f.g")?,
        cor_lnf_b: id("cor.ln_f.b")?,
        head_vel_w: id("head_vel.w")?,
        head_vel_b: id("head_vel.b")?,
    })
}

/// Round every value to the nearest `f32`; parameters are stored at 32-bit
/// precision so checkpoints reproduce them exactly.
pub fn round_to_f32(params: &mut ParamSet) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Generated-image input: `z_t` values and the flow time `t`.
#[derive(Debug, Clone, Copy)]
pub struct FlowInput<'a> {
    pub z_t: &'a ToyImage,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Compute the text head. Skipped for flow-only samples.
    pub text_logits: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[L, V]`; row `i` scores token `i + 1`. Rows at generated-image
    /// positions are zero.
    pub text_logits: Option<Var>,
    /// `[H·W, C]` token-major velocity over the generated block.
    pub velocity: Option<Var>,
}

/// Sinusoidal embedding of `t ∈ [0, 1]` (scaled by 1000).
pub fn timestep_features(t: f64, dim: usize) -> DenseArray {
    let half = dim / 2;
    let log_max = 10000f64.ln();
    DenseArray::from_fn(&[1, dim], |k| {
        let i = k % half;
        let freq = (-(log_max) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        if k < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: ParamIds,
}

impl Model {
    /// Fresh model with `N(0, 0.02²)` weights (output projections scaled by
    /// `1/√(2·n_layers)`), unit layer-norm gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&config) {
            let arr = match init {
                Init::Zeros => DenseArray::zeros(&shape),
                Init::Ones => DenseArray::filled(&shape, 1.0),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    DenseArray::from_fn(&shape, |_| dist.sample(&mut rng))
                }
            };
            params.push(name, arr);
        }
        round_to_f32(&mut params);
        let ids = resolve_ids(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    /// Wrap an existing parameter set, checking names and shapes against
    /// the canonical layout.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(ModelError::ParamCount {
                expected: expected.len(),
                found: params.len(),
            });
        }
        for (name, shape, _) in &expected {
            let found = params.get(params.find(name)?).shape();
            if found != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: found.to_vec(),
                });
            }
        }
        let ids = resolve_ids(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    /// Canonical parameter names for `config`, in storage order.
    pub fn layout_names(config: &ModelConfig) -> Vec<String> {
        layout(config).into_iter().map(|(n, _, _)| n).collect()
    }

    /// Replace parameters with another set of the same layout.
    pub fn with_params(&self, params: ParamSet) -> Result<Self, ModelError> {
        Self::from_params(self.config, params)
    }

    /// Names of every parameter owned by `expert`'s layer blocks and head.
    pub fn expert_param_names(&self, expert: Expert) -> Vec<String> {
        let tag = format!(".{}.", expert.name());
        let head = match expert {
            Expert::Detection => ["det.", "head_text."],
            Expert::Correction => ["cor.", "head_vel."],
        };
        self.params
            .names()
            .iter()
            .filter(|n| n.contains(&tag) || head.iter().any(|h| n.starts_with(h)))
            .cloned()
            .collect()
    }

    /// Record the forward pass on `tape` with parameters bound as `vars`.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        vars: &[Var],
        seq: &MultimodalSequence,
        flow: Option<FlowInput<'_>>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let ids = &self.ids;
        let p = |id: ParamId| vars[id.0];
        let len = seq.len();
        let d = cfg.d_model;

        let mut text_pos = Vec::new();
        let mut text_ids = Vec::new();
        let mut gen_pos = Vec::new();
        let mut gen_sites = Vec::new();
        for (i, tok) in seq.tokens.iter().enumerate() {
            match (tok.modality, tok.value) {
                (Modality::Text, TokenValue::Text(id)) => {
                    text_pos.push(i);
                    text_ids.push(id.index());
                }
                (Modality::ImgGen, TokenValue::Site(s)) => {
                    gen_pos.push(i);
                    gen_sites.push(s);
                }
                _ => {}
            }
        }
        if len > cfg.max_positions {
            return Err(ModelError::TooLong {
                len,
                max: cfg.max_positions,
            });
        }

        let mut parts: Vec<(Var, Vec<usize>)> = Vec::new();
        let seg_row = |tape: &mut Tape<'p>, kind: usize| -> Result<Var, ModelError> {
            let r = tape.gather_rows(p(ids.seg_emb), &[kind])?;
            Ok(tape.reshape(r, &[d])?)
        };

        if !text_pos.is_empty() {
            let tok = tape.gather_rows(p(ids.tok_emb), &text_ids)?;
            let pos = tape.gather_rows(p(ids.pos_text), &text_pos)?;
            let e = tape.add(tok, pos)?;
            let seg = seg_row(tape, 0)?;
            let e = tape.add_broadcast(e, seg)?;
            parts.push((e, text_pos.clone()));
        }

        for seg in seq.segments.iter().filter(|s| s.kind == Modality::ImgCond) {
            let img = seg.image.as_ref().ok_or(ModelError::GridMismatch(cfg.grid))?;
            if img.grid() != cfg.grid {
                return Err(ModelError::GridMismatch(cfg.grid));
            }
            let sites: Vec<usize> = (seg.start..seg.end())
                .map(|i| match seq.tokens[i].value {
                    TokenValue::Site(s) => s,
                    TokenValue::Text(_) => 0,
                })
                .collect();
            let all = tape.constant(img.to_tokens());
            let patches = tape.gather_rows(all, &sites)?;
            let e = tape.matmul(patches, p(ids.cond_w))?;
            let e = tape.add_broadcast(e, p(ids.cond_b))?;
            let pos = tape.gather_rows(p(ids.pos_img), &sites)?;
            let e = tape.add(e, pos)?;
            let segv = seg_row(tape, 1)?;
            let e = tape.add_broadcast(e, segv)?;
            parts.push((e, (seg.start..seg.end()).collect()));
        }

        if !gen_pos.is_empty() {
            let flow = flow.ok_or(ModelError::MissingTimestep)?;
            if flow.z_t.grid() != cfg.grid || gen_sites.len() > cfg.grid.sites() {
                return Err(ModelError::BadFlowInput(cfg.grid));
            }
            let all = tape.constant(flow.z_t.to_tokens());
            let patches = tape.gather_rows(all, &gen_sites)?;
            let e = tape.matmul(patches, p(ids.gen_w))?;
            let e = tape.add_broadcast(e, p(ids.gen_b))?;
            let pos = tape.gather_rows(p(ids.pos_img), &gen_sites)?;
            let e = tape.add(e, pos)?;
            let segv = seg_row(tape, 2)?;
            let e = tape.add_broadcast(e, segv)?;
            let tf = tape.constant(timestep_features(flow.t, cfg.time_dim));
            let h = tape.matmul(tf, p(ids.time_w1))?;
            let h = tape.add_broadcast(h, p(ids.time_b1))?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, p(ids.time_w2))?;
            let h = tape.add_broadcast(h, p(ids.time_b2))?;
            let temb = tape.reshape(h, &[d])?;
            let e = tape.add_broadcast(e, temb)?;
            parts.push((e, gen_pos.clone()));
        }

        let det_pos: Vec<usize> = (0..len)
            .filter(|&i| route(seq.tokens[i].modality) == Expert::Detection)
            .collect();
        let groups: Vec<(usize, Vec<usize>)> = [(0, det_pos), (1, gen_pos.clone())]
            .into_iter()
            .filter(|(_, idx)| !idx.is_empty())
            .collect();

        let mut x = tape.merge_rows(len, parts)?;
        let bias = tape.constant(build_attention_mask(seq).to_bias());
        let (h, dh) = (cfg.n_heads, cfg.head_dim());

        for layer in &ids.layers {
            let mut qs = Vec::new();
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            for (e, idx) in &groups {
                let ex = &layer[*e];
                let xe = select(tape, x, idx, len)?;
                let n = tape.layer_norm(xe, p(ex.ln1_g), p(ex.ln1_b))?;
                qs.push((tape.matmul(n, p(ex.wq))?, idx.clone()));
                ks.push((tape.matmul(n, p(ex.wk))?, idx.clone()));
                vs.push((tape.matmul(n, p(ex.wv))?, idx.clone()));
            }
            let q = merge(tape, len, qs)?;
            let k = merge(tape, len, ks)?;
            let v = merge(tape, len, vs)?;
            let split = |tape: &mut Tape<'p>, t: Var| -> Result<Var, NnError> {
                let r = tape.reshape(t, &[len, h, dh])?;
                tape.swap_axes01(r)
            };
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.matmul_t(q, k, false, true)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = tape.add_broadcast(scores, bias)?;
            let probs = tape.softmax(scores)?;
            let ctx = tape.matmul(probs, v)?;
            let ctx = tape.swap_axes01(ctx)?;
            let ctx = tape.reshape(ctx, &[len, d])?;

            let mut outs = Vec::new();
            for (e, idx) in &groups {
                let ex = &layer[*e];
                let ce = select(tape, ctx, idx, len)?;
                outs.push((tape.matmul(ce, p(ex.wo))?, idx.clone()));
            }
            let attn = merge(tape, len, outs)?;
            x = tape.add(x, attn)?;

            let mut outs = Vec::new();
            for (e, idx) in &groups {
                let ex = &layer[*e];
                let xe = select(tape, x, idx, len)?;
                let n = tape.layer_norm(xe, p(ex.ln2_g), p(ex.ln2_b))?;
                let f = tape.matmul(n, p(ex.ff_w1))?;
                let f = tape.add_broadcast(f, p(ex.ff_b1))?;
                let f = tape.gelu(f)?;
                let f = tape.matmul(f, p(ex.ff_w2))?;
                let f = tape.add_broadcast(f, p(ex.ff_b2))?;
                outs.push((f, idx.clone()));
            }
            let ffn = merge(tape, len, outs)?;
            x = tape.add(x, ffn)?;
        }

        let mut out = ForwardOutput {
            text_logits: None,
            velocity: None,
        };
        for (e, idx) in &groups {
            let xe = select(tape, x, idx, len)?;
            if *e == 0 && opts.text_logits {
                let n = tape.layer_norm(xe, p(ids.det_lnf_g), p(ids.det_lnf_b))?;
                let l = tape.matmul(n, p(ids.head_text_w))?;
                let l = tape.add_broadcast(l, p(ids.head_text_b))?;
                out.text_logits = Some(if idx.len() == len {
                    l
                } else {
                    tape.merge_rows(len, vec![(l, idx.clone())])?
                });
            }
            if *e == 1 {
                let n = tape.layer_norm(xe, p(ids.cor_lnf_g), p(ids.cor_lnf_b))?;
                let v = tape.matmul(n, p(ids.head_vel_w))?;
                out.velocity = Some(tape.add_broadcast(v, p(ids.head_vel_b))?);
            }
        }
        Ok(out)
    }

    /// Forward without gradients; returns `(logits [L, V], velocity image)`.
    pub fn infer(
        &self,
        seq: &MultimodalSequence,
        flow: Option<FlowInput<'_>>,
        opts: ForwardOptions,
    ) -> Result<(Option<DenseArray>, Option<ToyImage>), ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, seq, flow, opts)?;
        let logits = out.text_logits.map(|l| tape.value(l).clone());
        let velocity = match out.velocity {
            Some(v) => Some(
                ToyImage::from_tokens(self.config.grid, tape.value(v))
                    .map_err(|_| ModelError::BadFlowInput(self.config.grid))?,
            ),
            None => None,
        };
        Ok((logits, velocity))
    }
}

fn select(tape: &mut Tape<'_>, x: Var, idx: &[usize], len: usize) -> Result<Var, NnError> {
    if idx.len() == len {
        Ok(x)
    } else {
        tape.gather_rows(x, idx)
    }
}

fn merge(tape: &mut Tape<'_>, len: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var, NnError> {
    if parts.len() == 1 && parts[0].1.len() == len {
        Ok(parts[0].0)
    } else {
        tape.merge_rows(len, parts)
    }
}

#[cfg(test)]
mod tests;
