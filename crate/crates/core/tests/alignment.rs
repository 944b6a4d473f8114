use acros_core::acros::{AcrosModel, SenseConfig};
use acros_core::alignment::{
    adapt, context_embedding, extend_model_vocab, info_nce, make_parallel_corpus, read_pairs, retrieval_r1, sense_embedding, target_lm_loss,
    write_pairs, AdaptConfig, AdaptSchedule, CipherSpec, Phase,
};
use acros_core::base_lm::{clm_loss, DecoderConfig, DecoderModel};
use acros_core::numerics::{AdamWConfig, RngState, Tensor};
use acros_core::tokenizer::{Vocab, PAD};
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::build("the cat sat on a mat . a dog ran to the park .", 64).unwrap()
}

fn sentences() -> Vec<String> {
    let nouns = ["cat", "dog", "mat", "park"];
    let verbs = ["sat", "ran"];
    let mut out = Vec::new();
    for a in nouns {
        for v in verbs {
            for b in nouns {
                out.push(format!("the {a} {v} on a {b} ."));
            }
        }
    }
    out
}

fn model(v: usize, seed: u64) -> AcrosModel<f64> {
    let cfg = DecoderConfig { n_layers: 1, d_model: 8, n_heads: 2, vocab_size: v, max_seq: 16, tie_head: true };
    let mut rng = RngState::new(seed);
    let b = DecoderModel::<f64>::init(cfg, &mut rng).unwrap();
    let mut m = AcrosModel::new(b, SenseConfig::new(2, 8), &mut rng).unwrap();
    m.set_gate(0.5);
    m
}

#[test]
fn cipher_is_a_marked_bijection() {
    let v = vocab();
    let c = CipherSpec::new(&v, 3).unwrap();
    assert_eq!(c.map.len(), v.len() - 3);
    let images: std::collections::BTreeSet<&String> = c.map.values().collect();
    assert_eq!(images.len(), c.map.len());
    assert!(images.iter().all(|t| t.starts_with('~') && v.id(t).is_none()));
    let s = "the dog sat on a park .";
    assert_eq!(c.decipher(&c.encipher(s).unwrap()).unwrap(), s);
    assert_eq!(CipherSpec::new(&v, 3).unwrap(), c);
    assert!(c.encipher("the zebra").is_err());
}

#[test]
fn parallel_corpus_is_aligned_token_wise() {
    let v = vocab();
    let c = CipherSpec::new(&v, 1).unwrap();
    let (ext, pairs) = make_parallel_corpus(&sentences(), &c, &v).unwrap();
    assert_eq!(ext.len(), v.len() + c.map.len());
    for (p, s) in pairs.iter().zip(sentences()) {
        assert_eq!(p.source.len(), p.target.len());
        let tgt = ext.decode(&p.target[1..]).unwrap();
        assert_eq!(tgt, c.encipher(&s).unwrap());
        assert_eq!(v.decode(&p.source[1..]).unwrap(), s);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.tsv");
    write_pairs(&path, &ext, &pairs).unwrap();
    assert_eq!(read_pairs(&path, &ext).unwrap(), pairs);
}

#[test]
fn context_embedding_ignores_trailing_pads() {
    let m = model(12, 1);
    let a = context_embedding(&m, &[2, 4, 5, 6]).unwrap();
    let b = context_embedding(&m, &[2, 4, 5, 6, PAD, PAD]).unwrap();
    assert_eq!(a, b);
    let t = m.forward(&[2], 1, 1).unwrap();
    assert_eq!(context_embedding(&m, &[2]).unwrap(), t.row(&t.h, 0, 0));
    assert!(context_embedding(&m, &[PAD, PAD]).is_err());
}

#[test]
fn sense_pooling_limits() {
    let m = model(12, 2);
    let toks = [2, 4, 5, 6, 7];
    let t = m.forward(&toks, 1, 5).unwrap();
    let uniform: Vec<f64> = (0..8).map(|i| (0..5).map(|q| (t.u_vec(0, 0, q)[i] + t.u_vec(0, 1, q)[i]) / 2.0).sum::<f64>() / 5.0).collect();
    let hot = sense_embedding(&m, &toks, 1e6).unwrap();
    assert!(hot.iter().zip(&uniform).all(|(a, b)| (a - b).abs() < 1e-4));
    let cold = sense_embedding(&m, &toks, 1e-9).unwrap();
    let argmax: Vec<f64> = (0..8)
        .map(|i| {
            (0..5)
                .map(|q| {
                    let n = |k| t.u_vec(0, k, q).iter().map(|x| x * x).sum::<f64>();
                    let k = if n(1) > n(0) { 1 } else { 0 };
                    t.u_vec(0, k, q)[i]
                })
                .sum::<f64>()
                / 5.0
        })
        .collect();
    assert!(cold.iter().zip(&argmax).all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn info_nce_reference_values() {
    let mut rng = RngState::new(4);
    let n = 64;
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
    let p: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
    // unrelated pairs at a high temperature are close to uniform matching
    let l = info_nce(&a, &p, 10.0).unwrap();
    assert!((l - (n as f64).ln()).abs() < 0.05, "{l}");
    assert!(info_nce(&a, &a, 0.05).unwrap() < l);
}

#[test]
fn smoothing_off_is_plain_cross_entropy() {
    let mut rng = RngState::new(6);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.normal()).collect()).collect();
    let labels = [1, 0, 6, 3, 2];
    let mask = [true, true, false, true, true];
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let t = Tensor::<f64>::from_f64(vec![5, 7], &flat).unwrap();
    let want = clm_loss(&t, &labels, &mask).unwrap();
    assert!((target_lm_loss(&rows, &labels, &mask, 0.0).unwrap() - want).abs() < 1e-12);
    let uniform = vec![vec![0.3; 7]; 5];
    assert!((target_lm_loss(&uniform, &labels, &mask, 0.4).unwrap() - 7f64.ln()).abs() < 1e-12);
}

fn small_run(steps: usize) -> (AcrosModel<f64>, AcrosModel<f64>, AdaptConfig, Vec<acros_core::alignment::ParallelPair>) {
    let v = vocab();
    let c = CipherSpec::new(&v, 1).unwrap();
    let (ext, pairs) = make_parallel_corpus(&sentences(), &c, &v).unwrap();
    let mut m = model(v.len(), 7);
    extend_model_vocab(&mut m, ext.len() - v.len(), 1).unwrap();
    let cfg = AdaptConfig { schedule: AdaptSchedule::new(steps), batch_pairs: 4, optim: AdamWConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
    let before = m.clone();
    (before, m, cfg, pairs)
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let (before, mut m, cfg, pairs) = small_run(0);
    let log = adapt(&mut m, &pairs, &cfg, 1).unwrap();
    assert!(log.losses.is_empty());
    assert_eq!(m.pathway_hash(), before.pathway_hash());
    assert_eq!(m.backbone.hash(), before.backbone.hash());
}

#[test]
fn polish_freezes_the_sense_network_and_contextualizer() {
    let (before, mut m, cfg, pairs) = small_run(10);
    // stop right before polish to capture the hashes it must preserve
    let mut early = before.clone();
    let mut pre = cfg.clone();
    pre.schedule.total_steps = 10;
    pre.schedule.boundaries = (0.2, 1.0);
    adapt(&mut early, &pairs, &pre, 1).unwrap();
    assert_ne!(early.sense_net_hash(), before.sense_net_hash());
    let log = adapt(&mut m, &pairs, &cfg, 1).unwrap();
    assert_eq!(log.losses.len(), 10);
    assert_ne!(m.backbone.hash(), before.backbone.hash(), "backbone trains during adaptation");
    assert!(m.backbone.frozen, "frozen flag restored");
    assert_eq!(cfg.schedule.phase(4), Phase::Middle);
    assert_eq!(cfg.schedule.phase(5), Phase::Polish);
    // a fully polished run never touches the sense network or contextualizer
    let mut p = before.clone();
    let mut polish = cfg.clone();
    polish.schedule.boundaries = (0.0, 0.0);
    adapt(&mut p, &pairs, &polish, 1).unwrap();
    assert_eq!(p.sense_net_hash(), before.sense_net_hash());
    assert_eq!(p.ctx_hash(), before.ctx_hash());
    assert_ne!(p.pathway_hash(), before.pathway_hash(), "the gate still trains");
}

#[test]
fn adaptation_is_deterministic() {
    let (_, mut a, cfg, pairs) = small_run(6);
    let mut b = a.clone();
    let la = adapt(&mut a, &pairs, &cfg, 2).unwrap();
    let lb = adapt(&mut b, &pairs, &cfg, 2).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.pathway_hash(), b.pathway_hash());
}

#[test]
fn invalid_configs_name_their_field() {
    let mut c = AdaptConfig::default();
    c.batch_pairs = 1;
    assert!(c.validate().unwrap_err().to_string().contains("batch_pairs"));
    let mut c = AdaptConfig::default();
    c.schedule.boundaries = (0.6, 0.5);
    assert!(c.validate().unwrap_err().to_string().contains("phase_boundaries"));
}

fn rotate(v: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| q.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn retrieval_is_rotation_invariant(seed in 0u64..1000, theta in 0.0f64..6.28) {
        let mut rng = RngState::new(seed);
        let src: Vec<Vec<f64>> = (0..12).map(|_| (0..2).map(|_| rng.normal()).collect()).collect();
        let tgt: Vec<Vec<f64>> = src.iter().map(|x| x.iter().map(|v| v + 0.8 * rng.normal()).collect()).collect();
        let q = vec![vec![theta.cos(), -theta.sin()], vec![theta.sin(), theta.cos()]];
        let a = retrieval_r1(&src, &tgt).unwrap();
        let b = retrieval_r1(&rotate(&src, &q), &rotate(&tgt, &q)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn unrelated_embeddings_retrieve_near_chance(seed in 0u64..100) {
        let mut rng = RngState::new(seed);
        let n = 200;
        let src: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let tgt: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        prop_assert!(retrieval_r1(&src, &tgt).unwrap() < 0.03);
        prop_assert_eq!(retrieval_r1(&src, &src).unwrap(), 1.0);
    }
}
