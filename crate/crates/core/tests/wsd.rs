mod common;

use acros_core::acros::{AcrosModel, SenseConfig};
use acros_core::base_lm::{train_base, DecoderConfig, DecoderModel};
use acros_core::numerics::{AdamWConfig, RngState};
use acros_core::tokenizer::{encode_corpus, Vocab};
use acros_core::train::TrainConfig;
use acros_core::wsd::{
    dense_gloss_control, disambiguate, evaluate_wsd, gloss_activation, gloss_likelihood_control, match_candidates, read_wsd,
    sense_activation, write_wsd, ActivationKind, WsdInstance, WsdRecord,
};
use proptest::prelude::*;

fn vocab() -> Vocab {
    let words = "<pad> <unk> <bos> : the bank river money fish coin flows pays .";
    Vocab::from_tokens(words.split(' ').map(String::from).collect()).unwrap()
}

fn model(seed: u64) -> AcrosModel<f64> {
    let cfg = DecoderConfig { n_layers: 1, d_model: 8, n_heads: 2, vocab_size: vocab().len(), max_seq: 16, tie_head: true };
    let mut rng = RngState::new(seed);
    let b = DecoderModel::<f64>::init(cfg, &mut rng).unwrap();
    let mut m = AcrosModel::new(b, SenseConfig::new(4, 8), &mut rng).unwrap();
    m.set_gate(0.5);
    m
}

fn record(glosses: &[&str], gold: usize) -> WsdRecord {
    WsdRecord {
        id: "w0".into(),
        context: "the bank flows the river".split(' ').map(String::from).collect(),
        target_pos: 1,
        lemma: "bank".into(),
        gold: format!("bank%{gold}"),
        candidates: glosses.iter().enumerate().map(|(i, g)| (format!("bank%{i}"), g.to_string())).collect(),
    }
}

#[test]
fn singleton_is_always_selected() {
    let m = model(1);
    let inst = WsdInstance::encode(&record(&["money coin"], 0), &vocab()).unwrap();
    for kind in [ActivationKind::ContributionNorm, ActivationKind::AttentionMass] {
        assert_eq!(disambiguate(&m, &inst, kind).unwrap(), "bank%0");
    }
    assert_eq!(dense_gloss_control(&m.backbone, &inst).unwrap(), "bank%0");
    assert_eq!(gloss_likelihood_control(&m.backbone, &inst).unwrap(), "bank%0");
}

#[test]
fn duplicate_glosses_resolve_to_the_first() {
    let m = model(2);
    let inst = WsdInstance::encode(&record(&["river fish", "river fish", "river fish"], 2), &vocab()).unwrap();
    assert_eq!(disambiguate(&m, &inst, ActivationKind::ContributionNorm).unwrap(), "bank%0");
    assert_eq!(dense_gloss_control(&m.backbone, &inst).unwrap(), "bank%0");
    assert_eq!(gloss_likelihood_control(&m.backbone, &inst).unwrap(), "bank%0");
}

#[test]
fn probes_are_read_at_their_final_position() {
    let m = model(3);
    let inst = WsdInstance::encode(&record(&["money coin", "river fish"], 1), &vocab()).unwrap();
    assert_eq!(inst.context[inst.target], vocab().id("bank").unwrap());
    assert_eq!(inst.probes[0][inst.lemma_pos], vocab().id("bank").unwrap());
    assert_eq!(inst.prefix_len, 3);
    let a = gloss_activation(&m, &inst.probes[0], inst.lemma_pos, ActivationKind::ContributionNorm).unwrap();
    let b = gloss_activation(&m, &inst.probes[1], inst.lemma_pos, ActivationKind::ContributionNorm).unwrap();
    assert_ne!(a, b, "different glosses must give different probe vectors");
    let last = inst.probes[0].len() - 1;
    assert_eq!(a, sense_activation(&m, &inst.probes[0], last).unwrap());
    assert!((a.0.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(a.0.iter().all(|&x| x >= 0.0));
}

#[test]
fn attention_mass_reads_the_anchor_column() {
    let m = model(4);
    let toks = [2, 4, 5, 10, 4, 6];
    let act = acros_core::wsd::sense_activation_at(&m, &toks, 5, 2, ActivationKind::AttentionMass).unwrap();
    let t = m.forward(&toks, 1, 6).unwrap();
    let raw: Vec<f64> = (0..4).map(|k| t.c_at(0, k, 5, 2)).collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (a, r) in act.0.iter().zip(&raw) {
        assert!((a - r / n).abs() < 1e-12);
    }
}

#[test]
fn evaluation_totality_and_determinism() {
    let m = model(5);
    let glosses = [["money coin", "river fish"], ["river fish", "money coin"], ["fish", "coin pays"]];
    let data: Vec<WsdInstance> =
        glosses.iter().enumerate().map(|(i, g)| WsdInstance::encode(&record(g, i % 2), &vocab()).unwrap()).collect();
    let a = evaluate_wsd(&data, |i| disambiguate(&m, i, ActivationKind::ContributionNorm)).unwrap();
    let b = evaluate_wsd(&data, |i| disambiguate(&m, i, ActivationKind::ContributionNorm)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.predictions.len(), data.len());
    assert!((a.chance - 0.5).abs() < 1e-12);
    let oracle = evaluate_wsd(&data, |i| Ok(i.record.gold.clone())).unwrap();
    assert_eq!(oracle.f1, 1.0);
    assert!(evaluate_wsd(&[], |i| Ok(i.record.gold.clone())).is_err());
}

#[test]
fn always_first_scores_one_when_gold_is_first() {
    let data: Vec<WsdInstance> = (0..5).map(|_| WsdInstance::encode(&record(&["money", "river", "fish"], 0), &vocab()).unwrap()).collect();
    let ev = evaluate_wsd(&data, |i| Ok(i.record.candidates[0].0.clone())).unwrap();
    assert_eq!(ev.f1, 1.0);
}

#[test]
fn chance_system_scores_near_one_over_c() {
    let data: Vec<WsdInstance> =
        (0..3000).map(|i| WsdInstance::encode(&record(&["money", "river", "fish", "coin"], i % 4), &vocab()).unwrap()).collect();
    let rng = std::cell::RefCell::new(RngState::new(9));
    let ev = evaluate_wsd(&data, |i| Ok(i.record.candidates[rng.borrow_mut().below(4)].0.clone())).unwrap();
    // four binomial standard errors
    assert!((ev.f1 - 0.25).abs() < 4.0 * (0.25f64 * 0.75 / 3000.0).sqrt());
}

#[test]
fn likelihood_control_prefers_the_corpus_continuation() {
    let v = vocab();
    let docs: Vec<String> = (0..200).map(|_| "bank : river fish flows .".to_string()).collect();
    let stream = encode_corpus(&v, &docs);
    let cfg = DecoderConfig { n_layers: 1, d_model: 16, n_heads: 2, vocab_size: v.len(), max_seq: 16, tie_head: true };
    let hp = TrainConfig { steps: 80, batch_size: 4, seq_len: 12, optim: AdamWConfig { lr: 3e-3, ..Default::default() } };
    let (base, _) = train_base(cfg, &stream, &hp, 1).unwrap();
    for (glosses, gold) in [(["river fish flows", "coin the pays"], "bank%0"), (["coin the pays", "river fish flows"], "bank%1")] {
        let inst = WsdInstance::encode(&record(&glosses, 0), &v).unwrap();
        assert_eq!(gloss_likelihood_control(&base, &inst).unwrap(), gold);
    }
    // a bare BOS prompt still scores
    let mut r = record(&["river", "coin"], 0);
    r.context = vec!["bank".into()];
    r.target_pos = 0;
    assert!(gloss_likelihood_control(&base, &WsdInstance::encode(&r, &v).unwrap()).is_ok());
}

#[test]
fn dataset_file_round_trip() {
    let recs = vec![record(&["money coin", "river fish"], 1), record(&["fish"], 0)];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("wsd.tsv");
    write_wsd(&p, &recs).unwrap();
    assert_eq!(read_wsd(&p).unwrap(), recs);
    std::fs::write(&p, "a\tthe bank\t7\tbank\tbank%0\tbank%0\triver\n").unwrap();
    assert!(read_wsd(&p).is_err());
}

proptest! {
    #[test]
    fn matching_is_scale_invariant(
        ctx in proptest::collection::vec(0.01f64..1.0, 4),
        cands in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 1..5),
        s in 0.01f64..100.0,
    ) {
        let scaled: Vec<f64> = ctx.iter().map(|x| x * s).collect();
        let scaled_c: Vec<Vec<f64>> = cands.iter().map(|c| c.iter().map(|x| x * s).collect()).collect();
        prop_assert_eq!(match_candidates(&ctx, &cands).unwrap(), match_candidates(&scaled, &scaled_c).unwrap());
        prop_assert!(match_candidates(&ctx, &cands).unwrap() < cands.len());
    }
}
