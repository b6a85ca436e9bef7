mod common;

use common::*;
use dxgen::model::{ModelConfig, Transformer};
use dxgen::sample::*;
use dxgen::tokenizer::Vocabulary;

fn desk_model() -> Transformer<f64> {
    Transformer::init(ModelConfig::desk(97), 31).unwrap()
}

fn prompt() -> Vec<u32> {
    tokens(12, 97, 32)
}

#[test]
fn top_k_one_is_greedy_for_any_seed() {
    let m = desk_model();
    let greedy = decode_greedy(&m, &prompt(), 24).unwrap();
    for seed in [0, 1, 77, 12345] {
        let p = DecodeParams { top_k: 1, repetition_penalty: 1.0, max_new_tokens: 24, seed, ..DecodeParams::default() };
        assert_eq!(decode(&m, &prompt(), &p).unwrap(), greedy);
    }
}

#[test]
fn near_zero_temperature_is_greedy() {
    let m = desk_model();
    let greedy = decode_greedy(&m, &prompt(), 32).unwrap();
    assert_eq!(greedy.len(), 32);
    let p = DecodeParams { temperature: 1e-6, top_k: 40, repetition_penalty: 1.0, max_new_tokens: 32, ..DecodeParams::default() };
    assert_eq!(decode(&m, &prompt(), &p).unwrap(), greedy);
}

#[test]
fn cache_and_recompute_decode_identically() {
    let m = desk_model();
    let cached = Adapted::new(&m, None);
    let full = Recompute(Adapted::new(&m, None));
    let a = decode_greedy(&cached, &prompt(), 32).unwrap();
    let b = decode_greedy(&full, &prompt(), 32).unwrap();
    assert_eq!(a.len(), 32);
    assert_eq!(a, b);

    let mut seq = prompt();
    seq.extend(&a);
    let mut cache = cached.begin();
    let mut last = cached.feed(&mut cache, &prompt()).unwrap();
    for &t in &a {
        last = cached.feed(&mut cache, &[t]).unwrap();
    }
    let mut prefix = full.begin();
    let want = full.feed(&mut prefix, &seq).unwrap();
    let diff = last.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn penalty_adjusts_seen_logits() {
    let params = DecodeParams { temperature: 1.0, top_k: 4, top_p: 1.0, repetition_penalty: 1.3, ..DecodeParams::default() };
    let logits = [2.6, 0.4, -2.6, 1.0];
    let got = distribution(&logits, &[0, 2], &params);
    let want = softmax64(&[2.0, 0.4, -3.38, 1.0]);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
    }
}

#[test]
fn neutral_parameters_leave_softmax() {
    let mut r = rng(33);
    for _ in 0..50 {
        let z: Vec<f64> = (0..9).map(|_| rand::Rng::random_range(&mut r, -4.0..4.0)).collect();
        let got = distribution(&z, &[1, 2, 3], &DecodeParams::neutral(9));
        let want = softmax64(&z);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn neutral_sampling_matches_softmax_chi_square() {
    let model = FixedLogits(vec![0.3, -0.5, 1.2, 0.0]);
    let counts = first_token_counts(&model, &DecodeParams::neutral(4), 10_000);
    let stat = chi_square(&counts, &softmax64(&model.0));
    assert!(stat < CHI2_3DOF_999, "chi2 = {stat}, counts {counts:?}");
}

#[test]
fn top_k_and_top_p_restrict_support() {
    let model = FixedLogits(vec![0.3, -0.5, 1.2, 0.0]);
    let k2 = DecodeParams { top_k: 2, ..DecodeParams::neutral(4) };
    let c = first_token_counts(&model, &k2, 2000);
    assert_eq!((c[1], c[3]), (0, 0));
    assert!(c[0] > 0 && c[2] > 0);
    let p = DecodeParams { top_p: 0.4, ..DecodeParams::neutral(4) };
    let c = first_token_counts(&model, &p, 500);
    assert_eq!(c[2], 500);
}

#[test]
fn zero_budget_and_repeat_calls() {
    let m = desk_model();
    let p = DecodeParams { max_new_tokens: 0, ..DecodeParams::default() };
    assert!(decode(&m, &prompt(), &p).unwrap().is_empty());
    assert!(decode_greedy(&m, &prompt(), 0).unwrap().is_empty());
    let p = DecodeParams { max_new_tokens: 16, seed: 4, ..DecodeParams::default() };
    assert_eq!(decode(&m, &prompt(), &p).unwrap(), decode(&m, &prompt(), &p).unwrap());
}

#[test]
fn invalid_requests_are_errors() {
    let m = desk_model();
    let max = m.config().max_seq_len;
    assert!(decode_greedy(&m, &[], 4).is_err());
    assert!(decode_greedy(&m, &prompt(), max).is_err());
    for bad in [
        DecodeParams { temperature: 0.0, ..DecodeParams::default() },
        DecodeParams { top_k: 0, ..DecodeParams::default() },
        DecodeParams { top_p: 0.0, ..DecodeParams::default() },
        DecodeParams { top_p: 1.5, ..DecodeParams::default() },
        DecodeParams { repetition_penalty: 0.5, ..DecodeParams::default() },
    ] {
        assert!(decode(&m, &prompt(), &bad).is_err(), "{bad:?}");
    }
}

#[test]
fn text_generator_caps_budget_to_context() {
    let vocab = Vocabulary::build(&["alpha beta gamma"], 16).unwrap();
    let cfg = ModelConfig { max_seq_len: 8, ..common::toy_config(2) };
    let cfg = ModelConfig { vocab_size: vocab.len(), ..cfg };
    let m = Transformer::<f64>::init(cfg, 5).unwrap();
    let g = TextGenerator { model: &m, vocab: &vocab, params: DecodeParams { max_new_tokens: 100, ..DecodeParams::default() } };
    assert_eq!(g.prompt_ids("alpha beta"), vec![dxgen::tokenizer::BOS, vocab.id("alpha").unwrap(), vocab.id("beta").unwrap()]);
    let out = g.complete("alpha beta", 3).unwrap();
    assert!(dxgen::tokenizer::words(&out).len() <= 5);
}
