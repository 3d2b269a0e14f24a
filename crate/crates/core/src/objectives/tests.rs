use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{assemble, build_correction_tuple, build_detection_sample, AssemblyInput, TaskTag};
use crate::model::ModelConfig;

fn grid() -> GridConfig {
    GridConfig::default()
}

fn random_image(seed: u64) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_noise(grid(), &mut rng)
}

#[test]
fn shift_endpoints_and_midpoint() {
    assert_eq!(shift_timestep(0.0, 4.0), 0.0);
    assert_eq!(shift_timestep(1.0, 4.0), 1.0);
    assert!((shift_timestep(0.5, 4.0) - 0.8).abs() < 1e-15);
    for u in [0.1, 0.37, 0.9] {
        assert_eq!(shift_timestep(u, 1.0), u);
    }
}

#[test]
fn interpolation_examples() {
    let x1 = ToyImage::filled(grid(), 1.0);
    let z0 = ToyImage::filled(grid(), -1.0);
    assert_eq!(interpolate(&x1, &z0, 0.0).unwrap().z_t, z0);
    assert_eq!(interpolate(&x1, &z0, 1.0).unwrap().z_t, x1);
    let mid = interpolate(&x1, &z0, 0.25).unwrap().z_t;
    assert!(mid.data().iter().all(|&v| (v + 0.5).abs() < 1e-15));
    let other = ToyImage::zeros(GridConfig {
        channels: 1,
        height: 2,
        width: 2,
    });
    assert!(matches!(
        interpolate(&x1, &other, 0.5),
        Err(ObjectiveError::ShapeMismatch(..))
    ));
}

#[test]
fn fm_loss_examples() {
    let x1 = random_image(1);
    let z0 = random_image(2);
    let exact = target_velocity(&x1, &z0).unwrap();
    assert_eq!(fm_loss_value(&exact, &x1, &z0).unwrap(), 0.0);

    let two = ToyImage::filled(grid(), 2.0);
    let zero = ToyImage::zeros(grid());
    assert_eq!(fm_loss_value(&zero, &two, &zero).unwrap(), 4.0);

    let pred = random_image(3);
    let mut sum = 0.0;
    for c in 0..4 {
        for i in 0..8 {
            for j in 0..8 {
                let d = pred.get(c, i, j) - (x1.get(c, i, j) - z0.get(c, i, j));
                sum += d * d;
            }
        }
    }
    let oracle = sum / 256.0;
    assert!((fm_loss_value(&pred, &x1, &z0).unwrap() - oracle).abs() < 1e-12);

    let mut tape = Tape::new();
    let v = tape.constant(pred.to_tokens());
    let sites: Vec<usize> = (0..64).collect();
    let l = fm_loss(&mut tape, v, &sites, &sites, &exact).unwrap();
    assert!((tape.value(l).item() - oracle).abs() < 1e-12);
}

#[test]
fn ar_loss_examples() {
    let uniform = DenseArray::zeros(&[3, 64]);
    let v = ar_loss_value(&uniform, &[5, 9, 63], &[true; 3]).unwrap();
    assert!((v - 64f64.ln()).abs() < 1e-12);
    assert!((v - 4.158883).abs() < 1e-6);

    let mut favor = DenseArray::zeros(&[2, 10]);
    favor.data_mut()[3] = 30.0;
    favor.data_mut()[10 + 7] = 30.0;
    assert!(ar_loss_value(&favor, &[3, 7], &[true, true]).unwrap() < 1e-9);

    let logits = DenseArray::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let v = ar_loss_value(&logits, &[0, 1], &[true, true]).unwrap();
    let oracle = ((1.0 + (-1f64).exp()).ln() + (1.0 + (-2f64).exp()).ln()) / 2.0;
    assert!((v - oracle).abs() < 1e-12);
    assert!((v - 0.220095).abs() < 1e-6);

    assert_eq!(
        ar_loss_value(&logits, &[0, 1], &[false, false]),
        Err(ObjectiveError::NoSupervisedPositions)
    );
}

#[test]
fn masked_positions_get_zero_gradient() {
    let logits = DenseArray::from_fn(&[4, 6], |k| (k as f64 * 0.37).sin());
    let mut tape = Tape::new();
    let l = tape.param_owned(logits);
    let loss = ar_loss(&mut tape, l, &[0, 2], &[1, 4]).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(l).unwrap();
    for r in [1, 3] {
        assert!(g.row(r).iter().all(|&x| x == 0.0));
    }
    assert!(g.row(0).iter().any(|&x| x != 0.0));
}

#[test]
fn combined_examples() {
    assert_eq!(combined_loss(Some(1.0), Some(2.0), LAMBDA_AR).unwrap(), 1.5);
    assert_eq!(combined_loss(Some(0.7), None, LAMBDA_AR).unwrap(), 0.7);
    assert_eq!(combined_loss(Some(0.0), Some(0.0), LAMBDA_AR).unwrap(), 0.0);
    assert!(combined_loss(Some(1.0), None, -0.1).is_err());
}

#[test]
fn sample_loss_matches_parts() {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        time_dim: 8,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 0).unwrap();
    let t = build_correction_tuple(2, grid(), &[0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for state in [TaskTag::VcotInitial, TaskTag::VcotIntermediate, TaskTag::S1Correct] {
        let s = &assemble(AssemblyInput::Correction(&t), state).unwrap()[0];
        let draw = FlowDraw::sample(grid(), TIMESTEP_SHIFT, &mut rng);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let out = sample_loss(&mut tape, &vars, &model, s, Some(&draw), LAMBDA_AR).unwrap();
        let b = out.bundle(&tape, LAMBDA_AR);
        assert_eq!(b.ar.is_some(), state == TaskTag::VcotInitial);
        let expect = combined_loss(b.fm, b.ar, LAMBDA_AR).unwrap();
        assert!((b.combined - expect).abs() < 1e-12);

        let (_, vel) = model
            .infer(
                &s.sequence,
                Some(FlowInput {
                    z_t: &interpolate(s.fm_target.as_ref().unwrap(), &draw.z0, draw.t)
                        .unwrap()
                        .z_t,
                    t: draw.t,
                }),
                ForwardOptions::default(),
            )
            .unwrap();
        let fm = fm_loss_value(&vel.unwrap(), s.fm_target.as_ref().unwrap(), &draw.z0).unwrap();
        assert!((b.fm.unwrap() - fm).abs() < 1e-12);
    }
    let d = build_detection_sample(1, grid(), false).unwrap();
    let s = &assemble(AssemblyInput::Detection(&d), TaskTag::Detect).unwrap()[0];
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let b = sample_loss(&mut tape, &vars, &model, s, None, LAMBDA_AR)
        .unwrap()
        .bundle(&tape, LAMBDA_AR);
    assert_eq!(b.fm, None);
    assert_eq!(b.combined, b.ar.unwrap());
}

proptest! {
    #[test]
    fn shift_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(shift_timestep(lo, 4.0) <= shift_timestep(hi, 4.0));
        prop_assert!((0.0..=1.0).contains(&shift_timestep(a, 4.0)));
    }

    #[test]
    fn interpolation_is_affine(s1 in 0u64..1000, s2 in 0u64..1000, t in 0.0f64..=1.0) {
        let x = random_image(s1);
        let z = random_image(s2);
        prop_assert_eq!(interpolate(&x, &x, t).unwrap().z_t.data().iter()
            .zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-12), true);
        let zt = interpolate(&x, &z, t).unwrap().z_t;
        let x2 = x.map(|v| 2.0 * v);
        let zt2 = interpolate(&x2, &z, t).unwrap().z_t;
        for k in 0..zt.data().len() {
            prop_assert!((zt2.data()[k] - zt.data()[k] - t * x.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fm_loss_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
        let v = fm_loss_value(&random_image(s1), &random_image(s2), &random_image(s3)).unwrap();
        prop_assert!(v > 0.0);
    }
}
