use super::*;
use crate::dataset::{assemble, build_correction_tuple, build_detection_sample, AssemblyInput, TaskTag};
use crate::toyworld::{gen_clean, TokenId};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        time_dim: 16,
        ..ModelConfig::default()
    }
}

fn grads_for(model: &Model, seq: &MultimodalSequence, flow: Option<FlowInput<'_>>) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let out = model
        .forward(&mut tape, &vars, seq, flow, ForwardOptions { text_logits: true })
        .unwrap();
    let mut terms = Vec::new();
    if let Some(l) = out.text_logits {
        let s = tape.square(l).unwrap();
        terms.push(tape.sum(s).unwrap());
    }
    if let Some(v) = out.velocity {
        let s = tape.square(v).unwrap();
        terms.push(tape.sum(s).unwrap());
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t).unwrap();
    }
    let grads = tape.backward(loss).unwrap();
    model
        .params
        .names()
        .iter()
        .zip(&vars)
        .map(|(n, &v)| (n.clone(), grads.get(v).map_or(0.0, |g| g.sq_norm())))
        .collect()
}

#[test]
fn routing_rule() {
    assert_eq!(route(Modality::Text), Expert::Detection);
    assert_eq!(route(Modality::ImgCond), Expert::Detection);
    assert_eq!(route(Modality::ImgGen), Expert::Correction);
}

#[test]
fn mask_enumerated_cond_then_text() {
    let grid = GridConfig {
        channels: 1,
        height: 1,
        width: 2,
    };
    let mut seq = MultimodalSequence::new();
    seq.push_image_cond(&ToyImage::zeros(grid))
        .push_text(&[TokenId(7), TokenId(8)], false);
    let m = build_attention_mask(&seq);
    let rows: Vec<Vec<bool>> = (0..4).map(|i| m.row(i).to_vec()).collect();
    assert_eq!(
        rows,
        vec![
            vec![true, true, false, false],
            vec![true, true, false, false],
            vec![true, true, true, false],
            vec![true, true, true, true],
        ]
    );
}

#[test]
fn mask_single_text_is_causal() {
    let mut seq = MultimodalSequence::new();
    seq.push_text(&[TokenId(7), TokenId(8), TokenId(9)], false);
    let m = build_attention_mask(&seq);
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(m.allowed(i, j), j <= i);
        }
    }
}

#[test]
fn gen_block_never_reads_later_tokens() {
    let grid = GridConfig::default();
    let t = build_correction_tuple(3, grid, &[0.5]).unwrap();
    let mut seq = assemble(AssemblyInput::Correction(&t), TaskTag::VcotInitial).unwrap()[0]
        .sequence
        .clone();
    seq.push_text(&[TokenId(6)], false);
    let m = build_attention_mask(&seq);
    let gen = seq.segments.iter().find(|s| s.kind == Modality::ImgGen).unwrap();
    for i in gen.start..gen.end() {
        assert!(m.row(i)[gen.end()..].iter().all(|&a| !a));
        assert!(m.row(i)[..gen.end()].iter().all(|&a| a));
    }
}

#[test]
fn detect_sample_leaves_correction_expert_untouched() {
    let model = Model::init(tiny(), 1).unwrap();
    let d = build_detection_sample(5, GridConfig::default(), true).unwrap();
    let seq = &assemble(AssemblyInput::Detection(&d), TaskTag::Detect).unwrap()[0].sequence;
    let grads = grads_for(&model, seq, None);
    let cor = model.expert_param_names(Expert::Correction);
    assert!(!cor.is_empty());
    for (name, g) in &grads {
        if cor.contains(name) {
            assert_eq!(*g, 0.0, "{name}");
        }
    }
    let det = model.expert_param_names(Expert::Detection);
    assert!(grads.iter().any(|(n, g)| det.contains(n) && *g > 0.0));
}

#[test]
fn intermediate_sample_leaves_text_head_untouched() {
    let model = Model::init(tiny(), 2).unwrap();
    let grid = GridConfig::default();
    let t = build_correction_tuple(4, grid, &[0.5]).unwrap();
    let s = &assemble(AssemblyInput::Correction(&t), TaskTag::VcotIntermediate).unwrap()[0];
    let z = gen_clean(9, grid);
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let out = model
        .forward(
            &mut tape,
            &vars,
            &s.sequence,
            Some(FlowInput { z_t: &z, t: 0.3 }),
            ForwardOptions::default(),
        )
        .unwrap();
    assert!(out.text_logits.is_none());
    let v = out.velocity.unwrap();
    let sq = tape.square(v).unwrap();
    let loss = tape.mean(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    for name in ["head_text.w", "head_text.b", "det.ln_f.g", "det.ln_f.b"] {
        let id = model.params.find(name).unwrap();
        assert!(grads.get(vars[id.0]).map_or(true, |g| g.sq_norm() == 0.0), "{name}");
    }
    let id = model.params.find("head_vel.w").unwrap();
    assert!(grads.get(vars[id.0]).unwrap().sq_norm() > 0.0);
}

#[test]
fn output_shapes_and_purity() {
    let model = Model::init(tiny(), 3).unwrap();
    let grid = GridConfig::default();
    let t = build_correction_tuple(8, grid, &[0.5]).unwrap();
    let s = &assemble(AssemblyInput::Correction(&t), TaskTag::VcotInitial).unwrap()[0];
    let z = gen_clean(1, grid);
    let flow = Some(FlowInput { z_t: &z, t: 0.7 });
    let opts = ForwardOptions { text_logits: true };
    let (l1, v1) = model.infer(&s.sequence, flow, opts).unwrap();
    let (l2, v2) = model.infer(&s.sequence, flow, opts).unwrap();
    let l1 = l1.unwrap();
    assert_eq!(l1.shape(), [s.sequence.len(), vocab().len()]);
    assert_eq!(v1.as_ref().unwrap().grid(), grid);
    assert_eq!(l1.data(), l2.unwrap().data());
    assert_eq!(v1.unwrap().data(), v2.unwrap().data());
}

#[test]
fn missing_timestep_is_an_error() {
    let model = Model::init(tiny(), 3).unwrap();
    let t = build_correction_tuple(8, GridConfig::default(), &[0.5]).unwrap();
    let s = &assemble(AssemblyInput::Correction(&t), TaskTag::S1Correct).unwrap()[0];
    let err = model.infer(&s.sequence, None, ForwardOptions::default()).unwrap_err();
    assert_eq!(err, ModelError::MissingTimestep);
}

#[test]
fn permuting_text_tokens_changes_logits() {
    let model = Model::init(tiny(), 4).unwrap();
    let mut a = MultimodalSequence::new();
    a.push_text(&[TokenId(10), TokenId(11), TokenId(12)], false);
    let mut b = MultimodalSequence::new();
    b.push_text(&[TokenId(11), TokenId(10), TokenId(12)], false);
    let opts = ForwardOptions { text_logits: true };
    let la = model.infer(&a, None, opts).unwrap().0.unwrap();
    let lb = model.infer(&b, None, opts).unwrap().0.unwrap();
    let last = |l: &DenseArray| l.row(2).to_vec();
    let diff: f64 = last(&la).iter().zip(last(&lb)).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-9, "diff {diff}");
}

#[test]
fn forbidden_tokens_do_not_leak() {
    let model = Model::init(tiny(), 5).unwrap();
    let grid = GridConfig::default();
    for seed in 0..3u64 {
        let t = build_correction_tuple(seed, grid, &[0.5]).unwrap();
        let s = &assemble(AssemblyInput::Correction(&t), TaskTag::VcotTerminate).unwrap()[0];
        let z = gen_clean(seed + 100, grid);
        let opts = ForwardOptions { text_logits: true };
        let (base, vel) = model
            .infer(&s.sequence, Some(FlowInput { z_t: &z, t: 0.5 }), opts)
            .unwrap();
        let base = base.unwrap();

        // the stop text comes after the conditioning image; changing it must not
        // move anything at or before the image
        let mut alt = s.sequence.clone();
        let stop = alt.segments.iter().rposition(|s| s.kind == Modality::Text).unwrap();
        let seg = alt.segments[stop].clone();
        for i in seg.start..seg.end() {
            alt.tokens[i].value = TokenValue::Text(TokenId(20));
        }
        // and perturbing the generated block must not move the text at all
        let z2 = z.map(|v| -v);
        let (changed, vel2) = model.infer(&alt, Some(FlowInput { z_t: &z2, t: 0.5 }), opts).unwrap();
        let changed = changed.unwrap();
        for i in 0..seg.start {
            assert_eq!(base.row(i), changed.row(i), "row {i}");
        }
        assert_ne!(vel.unwrap().data(), vel2.unwrap().data());
    }
}

#[test]
fn rejects_mismatched_params() {
    let model = Model::init(tiny(), 6).unwrap();
    let other = ModelConfig { d_model: 8, ..tiny() };
    let err = Model::from_params(other, model.params.clone()).unwrap_err();
    assert!(matches!(err, ModelError::ParamShape { .. }));
    let bad = ModelConfig { n_heads: 3, ..tiny() };
    assert!(matches!(Model::init(bad, 0), Err(ModelError::HeadSplit { .. })));
}

#[test]
fn init_statistics() {
    let model = Model::init(ModelConfig::default(), 7).unwrap();
    let w = model.params.get(model.params.find("layers.0.det.attn.wq").unwrap());
    let n = w.len() as f64;
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / n;
    assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
    let wo = model.params.get(model.params.find("layers.0.cor.attn.wo").unwrap());
    let var = wo.data().iter().map(|v| v * v).sum::<f64>() / wo.len() as f64;
    let expect = 0.02 / 8f64.sqrt();
    assert!((var.sqrt() - expect).abs() < 0.1 * expect);
    assert!(model
        .params
        .tensors()
        .iter()
        .all(|t| t.data().iter().all(|&v| v == v as f32 as f64)));
}
