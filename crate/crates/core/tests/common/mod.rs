#![allow(dead_code)]

use dxgen::lora::LoraAdapter;
use dxgen::model::{GradMode, ModelConfig, Transformer};
use dxgen::numerics::{cross_entropy_backward, cross_entropy_sum, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config(n_kv_heads: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads,
        d_ff: 24,
        vocab_size: 13,
        max_seq_len: 64,
        rope_base: 10_000.0,
        rmsnorm_eps: 1e-5,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}

/// Adapter with both factors random, so every path carries gradient.
pub fn random_adapter(config: &ModelConfig, rank: usize, seed: u64) -> LoraAdapter<f64> {
    let mut a = LoraAdapter::new(config, rank, 16.0, seed).unwrap();
    let mut r = rng(seed ^ 0xB);
    for l in a.layers_mut() {
        for p in [&mut l.query, &mut l.value] {
            p.b.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        }
    }
    a
}

/// Summed cross-entropy over next-token targets, first `masked` positions
/// excluded.
pub fn next_token_loss(model: &Transformer<f64>, adapter: Option<&LoraAdapter<f64>>, toks: &[u32], masked: usize) -> f64 {
    let logits = model.forward_full(toks, adapter).unwrap();
    let (t, m) = targets(toks, masked);
    cross_entropy_sum(&logits, &t, &m).unwrap().0
}

pub fn targets(toks: &[u32], masked: usize) -> (Vec<u32>, Vec<bool>) {
    let mut t = toks[1..].to_vec();
    t.push(0);
    let m = (0..toks.len()).map(|i| i + 1 >= masked.max(1) && i + 1 < toks.len()).collect();
    (t, m)
}

#[derive(Debug)]
pub struct GradCheck {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|)` over
    /// entries whose magnitude exceeds the floor.
    pub max_rel: f64,
    /// Worst absolute difference over entries below the floor.
    pub max_abs_small: f64,
    pub worst: String,
    pub checked: usize,
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;

/// Compare every gradient entry from the backward pass with a central
/// difference of the loss.
pub fn finite_difference_check(
    model: &Transformer<f64>,
    adapter: Option<&LoraAdapter<f64>>,
    toks: &[u32],
    masked: usize,
) -> GradCheck {
    let (logits, trace) = model.forward_trace(toks, adapter).unwrap();
    let (t, m) = targets(toks, masked);
    let dl = cross_entropy_backward(&logits, &t, &m, 1.0).unwrap();
    let grads = model.backward(&trace, &dl, adapter, GradMode::Full).unwrap();

    let mut out = GradCheck { max_rel: 0.0, max_abs_small: 0.0, worst: String::new(), checked: 0 };
    let mut record = |name: String, a: f64, n: f64| {
        let mag = a.abs().max(n.abs());
        if mag > FD_FLOOR {
            let rel = (a - n).abs() / mag;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}: analytic {a:e} numeric {n:e}");
            }
        } else {
            out.max_abs_small = out.max_abs_small.max((a - n).abs());
        }
        out.checked += 1;
    };

    let mut gm = grads.model.unwrap();
    let gparams: Vec<Tensor<f64>> = gm.params_mut().into_iter().map(|p| p.clone()).collect();
    let mut work = model.clone();
    for (pi, g) in gparams.iter().enumerate() {
        for e in 0..g.len() {
            let n = central(|h| {
                let mut w = work.clone();
                w.params_mut()[pi].data_mut()[e] += h;
                next_token_loss(&w, adapter, toks, masked)
            });
            record(format!("model param {pi}[{e}]"), g.data()[e], n);
        }
    }
    work = model.clone();
    if let (Some(ad), Some(ga)) = (adapter, grads.adapter) {
        for (pi, g) in ga.params().iter().enumerate() {
            for e in 0..g.len() {
                let n = central(|h| {
                    let mut a = ad.clone();
                    a.params_mut()[pi].data_mut()[e] += h;
                    next_token_loss(&work, Some(&a), toks, masked)
                });
                record(format!("adapter param {pi}[{e}]"), g.data()[e], n);
            }
        }
    }
    out
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Stub language model whose next-token logits never change.
pub struct FixedLogits(pub Vec<f64>);

impl dxgen::sample::LanguageModel for FixedLogits {
    type State = ();
    fn vocab_size(&self) -> usize {
        self.0.len()
    }
    fn max_seq_len(&self) -> usize {
        1 << 20
    }
    fn begin(&self) {}
    fn feed(&self, _: &mut (), _: &[u32]) -> dxgen::Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

pub fn softmax64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pearson statistic of `counts` against expected probabilities.
pub fn chi_square(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

/// Upper 0.1% point of chi-square with 3 degrees of freedom.
pub const CHI2_3DOF_999: f64 = 16.266;

/// First token drawn by `decode` under `params` for seeds `0..draws`, with
/// end-of-sequence (an empty output) counted as its own id.
pub fn first_token_counts(model: &FixedLogits, params: &dxgen::sample::DecodeParams, draws: u64) -> Vec<usize> {
    let mut counts = vec![0; model.0.len()];
    for seed in 0..draws {
        let p = dxgen::sample::DecodeParams { seed, max_new_tokens: 1, ..*params };
        let out = dxgen::sample::decode(model, &[0], &p).unwrap();
        counts[out.first().copied().unwrap_or(dxgen::tokenizer::EOS) as usize] += 1;
    }
    counts
}
