use acros_core::base_lm::{perplexity, perplexity_chunked, train_base, DecoderConfig, DecoderModel};
use acros_core::numerics::{AdamWConfig, RngState};
use acros_core::tokenizer::{encode_corpus, Vocab};
use acros_core::train::TrainConfig;

fn cyclic_docs(n: usize) -> Vec<String> {
    let words = ["a", "b", "c"];
    (0..n).map(|i| (0..15).map(|j| words[(i + j) % 3]).collect::<Vec<_>>().join(" ")).collect()
}

fn small_config(v: usize) -> DecoderConfig {
    DecoderConfig { n_layers: 1, d_model: 16, n_heads: 2, vocab_size: v, max_seq: 32, tie_head: true }
}

#[test]
fn cyclic_corpus_is_learned() {
    let docs = cyclic_docs(60);
    let vocab = Vocab::build(&docs.join(" "), 16).unwrap();
    let stream = encode_corpus(&vocab, &docs);
    let hp = TrainConfig { steps: 200, batch_size: 16, seq_len: 32, optim: AdamWConfig { lr: 5e-3, ..Default::default() } };
    let (model, log) = train_base(small_config(vocab.len()), &stream, &hp, 7).unwrap();
    assert!(log.improved());
    let held: Vec<Vec<usize>> = cyclic_docs(6).iter().map(|d| vocab.encode_with_bos(d)).collect();
    let ppl = perplexity(&model, &held).unwrap();
    assert!(ppl < 1.5, "held-out perplexity {ppl}");
}

#[test]
fn zero_steps_returns_initialization_and_training_is_deterministic() {
    let docs = cyclic_docs(30);
    let vocab = Vocab::build(&docs.join(" "), 16).unwrap();
    let stream = encode_corpus(&vocab, &docs);
    let zero = TrainConfig { steps: 0, batch_size: 4, seq_len: 8, ..Default::default() };
    let (m0, _) = train_base(small_config(vocab.len()), &stream, &zero, 3).unwrap();
    let init = DecoderModel::<f32>::init(
        small_config(vocab.len()),
        &mut acros_core::numerics::stage_rng(3, acros_core::numerics::Stage::BaseInit),
    )
    .unwrap();
    assert_eq!(m0.hash(), init.hash());

    let hp = TrainConfig { steps: 20, batch_size: 4, seq_len: 8, ..Default::default() };
    let (a, _) = train_base(small_config(vocab.len()), &stream, &hp, 3).unwrap();
    let (b, _) = train_base(small_config(vocab.len()), &stream, &hp, 3).unwrap();
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn fresh_model_is_near_uniform_and_ppl_is_batch_invariant() {
    let v = 40;
    let m = DecoderModel::<f64>::init(small_config(v), &mut RngState::new(11)).unwrap();
    let toks: Vec<usize> = (0..12).map(|i| 3 + (i * 7) % 37).collect();
    let tr = m.forward(&toks, 1, 12).unwrap();
    for r in 0..12 {
        let row = tr.logits.row(r);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let ent: f64 = -row.iter().map(|x| { let p = (x - max).exp() / z; p * p.ln() }).sum::<f64>();
        assert!((ent - (v as f64).ln()).abs() < 0.05, "entropy {ent}");
    }
    let sents: Vec<Vec<usize>> = (0..7).map(|i| (0..(3 + i)).map(|j| 2 + (i + j) % 30).collect()).collect();
    let p1 = perplexity_chunked(&m, &sents, 1).unwrap();
    let p3 = perplexity_chunked(&m, &sents, 3).unwrap();
    let p7 = perplexity_chunked(&m, &sents, 7).unwrap();
    assert_eq!(p1, p3);
    assert_eq!(p1, p7);
}

#[test]
fn tied_head_couples_input_and_output() {
    let mut m = DecoderModel::<f64>::init(small_config(20), &mut RngState::new(5)).unwrap();
    let before = m.forward(&[4, 5], 1, 2).unwrap();
    m.params.get_mut("wte").unwrap().row_mut(4)[0] += 0.5;
    let after = m.forward(&[4, 5], 1, 2).unwrap();
    assert_ne!(before.embeddings.row(0), after.embeddings.row(0));
    // output column of token 9 is untouched, token 4's column moves
    assert_ne!(before.logits.row(1)[4], after.logits.row(1)[4]);
}

#[test]
fn save_load_gives_identical_logits() {
    let m = DecoderModel::<f32>::init(small_config(20), &mut RngState::new(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    m.save(&path).unwrap();
    let back = DecoderModel::<f32>::load(&path).unwrap();
    let a = m.forward(&[3, 7, 9], 1, 3).unwrap();
    let b = back.forward(&[3, 7, 9], 1, 3).unwrap();
    assert!(a.logits.max_abs_diff(&b.logits) <= 1e-7);
}
