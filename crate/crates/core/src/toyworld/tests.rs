use proptest::prelude::*;

use super::*;

fn spec(category: Category, region: Region, magnitude: Magnitude, seed: u64) -> ArtifactSpec {
    ArtifactSpec {
        category,
        region,
        magnitude,
        seed,
    }
}

fn words(tokens: &[TokenId]) -> Vec<&'static str> {
    tokens.iter().map(|&t| vocab().token(t).unwrap()).collect()
}

#[test]
fn clean_images_are_bounded_and_deterministic() {
    let cfg = GridConfig::default();
    for seed in 0..50 {
        let a = gen_clean(seed, cfg);
        assert!(a.max_abs() <= 1.0);
        assert_eq!(a, gen_clean(seed, cfg));
    }
    assert_ne!(gen_clean(0, cfg), gen_clean(1, cfg));
}

#[test]
fn zero_amplitude_distortion_is_identity() {
    let img = gen_clean(4, GridConfig::default());
    let out = add_region_noise(&img, Region::TopRight, 0.0, 99);
    assert_eq!(out, img);
}

#[test]
fn physics_and_structure_are_involutions() {
    let img = gen_clean(9, GridConfig::default());
    for category in [Category::Physics, Category::Structure] {
        for region in Region::ALL {
            let s = spec(category, region, Magnitude::High, 1234);
            let (once, _) = inject_artifact(&img, &s).unwrap();
            assert_ne!(once, img);
            let (twice, _) = inject_artifact(&once, &s).unwrap();
            assert_eq!(twice, img, "{s}");
        }
    }
}

#[test]
fn distortion_is_not_an_involution() {
    let img = gen_clean(9, GridConfig::default());
    let s = spec(Category::Distortion, Region::BottomLeft, Magnitude::Low, 5);
    let (once, _) = inject_artifact(&img, &s).unwrap();
    let (twice, _) = inject_artifact(&once, &s).unwrap();
    assert_ne!(twice, img);
}

#[test]
fn tiny_grid_rejects_patch_swap() {
    let cfg = GridConfig {
        channels: 1,
        height: 2,
        width: 2,
    };
    let img = gen_clean(0, cfg);
    let err = inject_artifact(&img, &spec(Category::Structure, Region::TopLeft, Magnitude::Low, 0)).unwrap_err();
    assert_eq!(err, ToyError::GridTooSmall { rows: 1, cols: 1 });
}

#[test]
fn diagnosis_template() {
    let d = render_diagnosis(&spec(Category::Distortion, Region::TopLeft, Magnitude::High, 0));
    assert_eq!(
        words(&d),
        [
            "<reason>",
            "artifact",
            "distortion",
            "quadrant",
            "top_left",
            "magnitude",
            "high"
        ]
    );
    let d = render_diagnosis(&spec(Category::Physics, Region::BottomRight, Magnitude::Low, 0));
    assert_eq!(d.len(), DIAGNOSIS_LEN);
    assert_eq!(words(&d[5..]), ["magnitude", "low"]);
}

#[test]
fn termination_and_detection_templates() {
    let stop = render_termination();
    assert_eq!(stop[0], STOP);
    assert_eq!(*stop.last().unwrap(), EOS);

    let real = render_detection_answer(Label::Real, None).unwrap();
    assert_eq!(real[1], real_token());

    let s = spec(Category::Structure, Region::TopRight, Magnitude::Low, 0);
    let fake = render_detection_answer(Label::Fake, Some(&s)).unwrap();
    let w = words(&fake);
    assert!(w.windows(2).any(|p| p == ["quadrant", "top_right"]));
    assert_eq!(fake[1], fake_token());

    assert_eq!(render_detection_answer(Label::Fake, None), Err(ToyError::MissingSpec));
    assert_eq!(
        render_detection_answer(Label::Real, Some(&s)),
        Err(ToyError::UnexpectedSpec)
    );
}

#[test]
fn every_template_instance_round_trips_through_text() {
    let v = vocab();
    let mut texts = vec![render_termination(), detection_prompt(), repair_prompt()];
    texts.push(render_detection_answer(Label::Real, None).unwrap());
    for category in Category::ALL {
        for region in Region::ALL {
            for magnitude in [Magnitude::Low, Magnitude::High] {
                let s = spec(category, region, magnitude, 0);
                let d = render_diagnosis(&s);
                assert_eq!(parse_diagnosis(&d), Some((category, region, magnitude)));
                texts.push(d);
                texts.push(render_detection_answer(Label::Fake, Some(&s)).unwrap());
            }
        }
    }
    for ids in texts {
        let s = v.detokenize(&ids).unwrap();
        assert_eq!(v.tokenize(&s).unwrap(), ids);
        assert_eq!(v.detokenize(&v.tokenize(&s).unwrap()).unwrap(), s);
    }
}

#[test]
fn vocab_is_bijective_and_closed() {
    let v = vocab();
    for (i, t) in v.tokens().iter().enumerate() {
        assert_eq!(v.id(t).unwrap(), TokenId(i as u32));
    }
    assert!(v.id("hello").is_err());
    assert_eq!(
        v.token(TokenId(v.len() as u32)),
        Err(ToyError::UnknownId(v.len() as u32))
    );
    let json: serde_json::Value = serde_json::from_str(&v.to_json()).unwrap();
    assert_eq!(json["<stop>"], 6);
    assert!(v.to_json().starts_with("{\n  \"<pad>\": 0,\n  \"<bos>\": 1,"));
}

fn arb_spec() -> impl Strategy<Value = ArtifactSpec> {
    (0usize..3, 0usize..4, any::<bool>(), any::<u64>()).prop_map(|(c, r, high, seed)| ArtifactSpec {
        category: Category::ALL[c],
        region: Region::ALL[r],
        magnitude: if high { Magnitude::High } else { Magnitude::Low },
        seed,
    })
}

proptest! {
    #[test]
    fn injection_is_localized(seed in any::<u64>(), s in arb_spec()) {
        let img = gen_clean(seed, GridConfig::default());
        let (out, mask) = inject_artifact(&img, &s).unwrap();
        prop_assert!(out.max_abs() <= 1.0);
        for c in 0..img.channels() {
            for i in 0..img.height() {
                for j in 0..img.width() {
                    if !mask.contains(i, j) {
                        prop_assert_eq!(out.get(c, i, j).to_bits(), img.get(c, i, j).to_bits());
                    }
                }
            }
        }
        prop_assert_eq!(mask.count(), 16);
    }
}
