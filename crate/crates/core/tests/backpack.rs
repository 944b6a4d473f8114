use acros_core::backpack::{convert, BackpackModel, Conversion, ConversionConfig, BP_VALUES, BP_WEIGHTS};
use acros_core::base_lm::{DecoderConfig, DecoderModel};
use acros_core::numerics::{AdamWConfig, Graph, RngState};
use acros_core::train::TrainConfig;
use proptest::prelude::*;

fn cfg(v: usize, d: usize) -> DecoderConfig {
    DecoderConfig { n_layers: 1, d_model: d, n_heads: 2, vocab_size: v, max_seq: 12, tie_head: true }
}

fn model(k: usize, seed: u64) -> BackpackModel<f64> {
    let mut rng = RngState::new(seed);
    let b = DecoderModel::<f64>::init(cfg(17, 8), &mut rng).unwrap();
    let mut m = BackpackModel::init(b, k, 4, &mut rng).unwrap();
    // non-uniform mixture weights
    for x in m.params.get_mut(&format!("{BP_WEIGHTS}w")).unwrap().data_mut() {
        *x = 3.0 * rng.normal();
    }
    m
}

#[test]
fn mixture_weights_lie_on_the_simplex() {
    let m = model(4, 1);
    let t = m.forward(&[3, 4, 5, 6, 7, 8], 2, 3).unwrap();
    for r in 0..6 {
        let row = t.alpha.row(r);
        assert!(row.iter().all(|&a| a >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn state_is_the_convex_combination_of_values() {
    let m = model(4, 2);
    let t = m.forward(&[3, 9, 5, 12], 1, 4).unwrap();
    let d = 8;
    for r in 0..4 {
        let a = t.alpha.row(r);
        for c in 0..d {
            let vs: Vec<f64> = (0..4).map(|k| t.values.data()[(r * 4 + k) * d + c]).collect();
            let want: f64 = vs.iter().zip(a).map(|(v, w)| v * w).sum();
            let got = t.state.row(r)[c];
            assert!((got - want).abs() < 1e-12);
            let (lo, hi) = vs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }
}

#[test]
fn single_slot_state_equals_the_value() {
    let m = model(1, 3);
    let t = m.forward(&[3, 4, 5], 1, 3).unwrap();
    assert!(t.alpha.data().iter().all(|&a| a == 1.0));
    for r in 0..3 {
        assert_eq!(t.state.row(r), &t.values.data()[r * 8..(r + 1) * 8]);
    }
}

#[test]
fn values_depend_only_on_the_token() {
    let m = model(3, 4);
    let a = m.forward(&[5, 6, 7], 1, 3).unwrap();
    let b = m.forward(&[9, 9, 7], 1, 3).unwrap();
    let row = |t: &acros_core::backpack::BackpackTrace<f64>, r: usize| t.values.data()[r * 24..(r + 1) * 24].to_vec();
    assert_eq!(row(&a, 2), row(&b, 2));
    let direct = m.token_values(&[7]).unwrap();
    let flat: Vec<f64> = direct[0].iter().flatten().copied().collect();
    let got = row(&a, 2);
    assert!(flat.iter().zip(&got).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn parameter_count_matches_the_layout() {
    let (d, k, s) = (8usize, 4usize, 4usize);
    let m = model(k, 5);
    let value_net = d * s * d + s * d + s * d * d + d + 2 * d + d * k * d + k * d;
    let weight_net = d * k + k;
    assert_eq!(m.num_params(), m.backbone.num_params() + value_net + weight_net);
    assert!(m.params.keys().all(|n| n.starts_with(BP_VALUES) || n.starts_with(BP_WEIGHTS)));
}

#[test]
fn head_gradients_match_finite_differences() {
    let m = model(3, 6);
    let toks = [3, 4, 5, 6];
    let labels = [4, 5, 6, 7];
    let mask = [true; 4];
    let loss_of = |m: &BackpackModel<f64>, train: bool| {
        let mut g = Graph::new();
        let v = m.build(&mut g, &toks, 1, 4, train, false).unwrap();
        let l = g.cross_entropy(v.logits, &labels, &mask, 0.0).unwrap();
        (g, l)
    };
    let (g, l) = loss_of(&m, true);
    let grads = g.backward(l).unwrap();
    let h = 1e-5;
    for (name, var) in g.trainable_params() {
        let an = grads.get(*var).unwrap().to_vec();
        for i in (0..an.len()).step_by(7) {
            let eval = |delta: f64| {
                let mut m2 = m.clone();
                m2.params.get_mut(name.as_str()).unwrap().data_mut()[i] += delta;
                let (g, l) = loss_of(&m2, false);
                g.value(l).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (an[i] - fd).abs() / an[i].abs().max(fd.abs()).max(1e-4);
            assert!(err < 1e-4 || (an[i] - fd).abs() < 1e-8, "{name}[{i}]: {} vs {fd}", an[i]);
        }
    }
}

fn toy_stream() -> Vec<usize> {
    (0..400).map(|i| 3 + (i * 7 + i / 5) % 14).collect()
}

fn conversion(variant: Conversion) -> ConversionConfig {
    ConversionConfig {
        variant,
        train: TrainConfig { steps: 6, batch_size: 2, seq_len: 8, optim: AdamWConfig { lr: 1e-2, ..Default::default() } },
        ..Default::default()
    }
}

#[test]
fn frozen_conversion_keeps_the_backbone() {
    let base = DecoderModel::<f32>::init(cfg(17, 8), &mut RngState::new(7)).unwrap();
    let (bp, log) = convert(&base, &toy_stream(), &conversion(Conversion::DistillFrozen), 1).unwrap();
    assert_eq!(log.losses.len(), 6);
    assert_eq!(bp.backbone.hash(), base.hash());
    for v in [Conversion::Cpt, Conversion::Distill] {
        let (bp, _) = convert(&base, &toy_stream(), &conversion(v), 1).unwrap();
        assert_ne!(bp.backbone.hash(), base.hash(), "{}", v.name());
    }
}

#[test]
fn conversion_is_deterministic() {
    let base = DecoderModel::<f32>::init(cfg(17, 8), &mut RngState::new(8)).unwrap();
    let a = convert(&base, &toy_stream(), &conversion(Conversion::Distill), 3).unwrap();
    let b = convert(&base, &toy_stream(), &conversion(Conversion::Distill), 3).unwrap();
    assert_eq!(a.0.hash(), b.0.hash());
    assert_eq!(a.1, b.1);
}

#[test]
fn invalid_slot_count_names_the_field() {
    let mut c = conversion(Conversion::Cpt);
    c.k = 0;
    let err = c.validate().unwrap_err().to_string();
    assert!(err.contains("backpack_k"), "{err}");
    assert!(Conversion::parse("fast").is_err());
    assert_eq!(Conversion::parse("distill-frozen").unwrap(), Conversion::DistillFrozen);
}

#[test]
fn checkpoint_round_trip() {
    let m = model(4, 9).cast::<f32>();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bp.ckpt");
    m.save(&path).unwrap();
    let back = BackpackModel::<f32>::load(&path).unwrap();
    assert_eq!(back.hash(), m.hash());
    assert_eq!(back.backbone.hash(), m.backbone.hash());
    assert_eq!(back.forward(&[3, 4, 5], 1, 3).unwrap(), m.forward(&[3, 4, 5], 1, 3).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn simplex_for_any_input(seed in 0u64..1000, toks in proptest::collection::vec(3usize..17, 1..9)) {
        let m = model(4, seed);
        let t = m.forward(&toks, 1, toks.len()).unwrap();
        for r in 0..toks.len() {
            let row = t.alpha.row(r);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
