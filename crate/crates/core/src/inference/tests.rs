use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::objectives::target_velocity;
use crate::toyworld::{gen_clean, vocab};

fn grid() -> GridConfig {
    GridConfig::default()
}

/// Always favors one token.
struct Always(TokenId);

impl LogitSource for Always {
    fn next_logits(&self, _: &MultimodalSequence) -> Result<Vec<f64>, InferenceError> {
        let mut v = vec![0.0; vocab().len()];
        v[self.0.index()] = 5.0;
        Ok(v)
    }
}

impl VelocityField for Always {
    fn velocity(&self, _: &MultimodalSequence, z: &ToyImage, _: f64) -> Result<ToyImage, InferenceError> {
        Ok(z.map(|_| 0.0))
    }
}

/// Emits a fixed script, then repeats its last token.
struct Script {
    tokens: Vec<TokenId>,
    start: usize,
    logits: Vec<f64>,
}

impl LogitSource for Script {
    fn next_logits(&self, seq: &MultimodalSequence) -> Result<Vec<f64>, InferenceError> {
        let k = (seq.len() - self.start).min(self.tokens.len() - 1);
        let mut v = self.logits.clone();
        v[self.tokens[k].index()] += 10.0;
        Ok(v)
    }
}

struct ConstField(f64);

impl VelocityField for ConstField {
    fn velocity(&self, _: &MultimodalSequence, z: &ToyImage, _: f64) -> Result<ToyImage, InferenceError> {
        Ok(z.map(|_| self.0))
    }
}

struct Oracle {
    velocity: ToyImage,
}

impl VelocityField for Oracle {
    fn velocity(&self, _: &MultimodalSequence, _: &ToyImage, _: f64) -> Result<ToyImage, InferenceError> {
        Ok(self.velocity.clone())
    }
}

fn gen_condition() -> MultimodalSequence {
    let mut seq = repair_context(&gen_clean(1, grid()));
    seq.push_image_gen(grid(), false);
    seq
}

fn words(ws: &[&str]) -> Vec<TokenId> {
    ws.iter().map(|w| vocab().id(w).unwrap()).collect()
}

#[test]
fn eos_model_emits_one_token() {
    let ctx = detection_context(&gen_clean(0, grid()));
    assert_eq!(decode_text(&Always(EOS), &ctx, 24).unwrap(), vec![EOS]);
    let other = decode_text(&Always(STOP), &ctx, 24).unwrap();
    assert_eq!(other.len(), 24);
}

#[test]
fn decoding_is_deterministic() {
    let model = Model::init(
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap();
    let ctx = detection_context(&gen_clean(0, grid()));
    let a = decode_text(&model, &ctx, 6).unwrap();
    assert_eq!(a, decode_text(&model, &ctx, 6).unwrap());
    assert!(!a.is_empty() && a.len() <= 6);
}

#[test]
fn constant_field_telescopes() {
    let cond = gen_condition();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z0 = crate::objectives::sample_noise(grid(), &mut rng);
    for n in [1, 5, 20] {
        let z = flow_integrate(&ConstField(0.3), &cond, &z0, n, TIMESTEP_SHIFT).unwrap();
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - (b + 0.3)).abs() < 1e-14);
        }
    }
}

#[test]
fn single_step_uses_start_velocity() {
    struct Probe;
    impl VelocityField for Probe {
        fn velocity(&self, _: &MultimodalSequence, z: &ToyImage, t: f64) -> Result<ToyImage, InferenceError> {
            assert_eq!(t, 0.0);
            Ok(z.map(|v| 2.0 * v))
        }
    }
    let z0 = gen_clean(4, grid());
    let z = flow_integrate(&Probe, &gen_condition(), &z0, 1, TIMESTEP_SHIFT).unwrap();
    assert_eq!(z, z0.map(|v| 3.0 * v));
}

#[test]
fn oracle_field_reaches_target() {
    let x1 = gen_clean(9, grid());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z0 = crate::objectives::sample_noise(grid(), &mut rng);
    let field = Oracle {
        velocity: target_velocity(&x1, &z0).unwrap(),
    };
    for n in [1, 5, 20] {
        let z = flow_integrate(&field, &gen_condition(), &z0, n, TIMESTEP_SHIFT).unwrap();
        let err = z.zip_map(&x1, |a, b| (a - b).abs()).max_abs();
        assert!(err < 1e-6, "n={n}: {err}");
    }
}

#[test]
fn sampler_errors_and_determinism() {
    let cond = gen_condition();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        flow_sample(&ConstField(0.0), &cond, grid(), 0, &mut rng),
        Err(InferenceError::NoSteps)
    );
    let a = flow_sample(&ConstField(0.1), &cond, grid(), 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = flow_sample(&ConstField(0.1), &cond, grid(), 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert!(a.max_abs() <= 1.0);
}

#[test]
fn grid_is_uniform_through_shift() {
    let g = timestep_grid(2, 4.0);
    assert_eq!(g, vec![0.0, 0.8, 1.0]);
}

#[test]
fn detection_reads_the_slot_after_detect() {
    let image = gen_clean(2, grid());
    let start = detection_context(&image).len();
    let mut logits = vec![0.0; vocab().len()];
    logits[crate::toyworld::fake_token().index()] = 1.0;
    let src = Script {
        tokens: words(&[
            "<detect>",
            "fake",
            "<caption>",
            "artifact",
            "structure",
            "image",
            "<reason>",
            "none",
            "<eos>",
        ]),
        start,
        logits,
    };
    let d = detect(&src, &image).unwrap();
    assert_eq!(d.verdict, Label::Fake);
    assert!(!d.malformed);
    let expect = 1.0 / (1.0 + (-(11.0f64)).exp());
    assert!((d.fake_score - expect).abs() < 1e-12);
    assert_eq!(d.caption, words(&["artifact", "structure", "image"]));
    assert_eq!(d.reason, words(&["none"]));
}

#[test]
fn tie_goes_to_real() {
    let image = gen_clean(2, grid());
    let start = detection_context(&image).len();
    // the script token after <detect> is neither label, so both score 0
    let src = Script {
        tokens: words(&["<detect>", "image", "<eos>"]),
        start,
        logits: vec![0.0; vocab().len()],
    };
    let d = detect(&src, &image).unwrap();
    assert_eq!(d.fake_score, 0.5);
    assert_eq!(d.verdict, Label::Real);
}

#[test]
fn missing_detect_is_flagged() {
    let image = gen_clean(2, grid());
    let start = detection_context(&image).len();
    let mut logits = vec![0.0; vocab().len()];
    logits[crate::toyworld::real_token().index()] = 3.0;
    let src = Script {
        tokens: words(&["image", "image", "<eos>"]),
        start,
        logits,
    };
    let d = detect(&src, &image).unwrap();
    assert!(d.malformed);
    assert_eq!(d.verdict, Label::Real);
    assert!((0.0..=1.0).contains(&d.fake_score));
}

struct LoopModel {
    stop: bool,
}

impl LogitSource for LoopModel {
    fn next_logits(&self, seq: &MultimodalSequence) -> Result<Vec<f64>, InferenceError> {
        let tok = if self.stop {
            STOP
        } else {
            vocab().id("artifact").unwrap()
        };
        let _ = seq;
        Always(tok).next_logits(seq)
    }
}

impl VelocityField for LoopModel {
    fn velocity(&self, _: &MultimodalSequence, z: &ToyImage, _: f64) -> Result<ToyImage, InferenceError> {
        Ok(z.map(|_| 0.0))
    }
}

#[test]
fn stop_model_terminates_immediately() {
    let image = gen_clean(3, grid());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = vcot_correct(&LoopModel { stop: true }, &image, CorrectOptions::default(), &mut rng).unwrap();
    assert_eq!(t.rounds_used, 1);
    assert_eq!(t.terminated_by, Termination::StopToken);
    assert_eq!(t.final_image(), &image);
    assert_eq!(t.rounds[0].diagnosis[0], STOP);
}

#[test]
fn never_stopping_model_hits_the_cap() {
    let image = gen_clean(3, grid());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = CorrectOptions {
        max_rounds: 3,
        flow_steps: 2,
    };
    let t = vcot_correct(&LoopModel { stop: false }, &image, opts, &mut rng).unwrap();
    assert_eq!(t.rounds_used, 3);
    assert_eq!(t.terminated_by, Termination::MaxRounds);
    assert_eq!(t.rounds[0].diagnosis.len(), DIAGNOSIS_LEN);
    let bad = CorrectOptions {
        max_rounds: 0,
        flow_steps: 2,
    };
    assert_eq!(
        vcot_correct(&LoopModel { stop: false }, &image, bad, &mut rng),
        Err(InferenceError::NoRounds)
    );
}

#[test]
fn single_step_is_a_prefix_of_the_trajectory() {
    let model = Model::init(
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        },
        2,
    )
    .unwrap();
    let image = gen_clean(5, grid());
    let one = CorrectOptions {
        max_rounds: 1,
        flow_steps: 3,
    };
    let three = CorrectOptions { max_rounds: 3, ..one };
    let a = vcot_correct(&model, &image, one, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = vcot_correct(&model, &image, three, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.rounds[0], b.rounds[0]);
    assert!(b.rounds_used <= 3);
}
