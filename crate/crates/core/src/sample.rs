//! Autoregressive decoding with repetition penalty, temperature, top-k and
//! nucleus truncation, in that order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ReportRecord;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{KvCache, Linear, Transformer};
use crate::numerics::Scalar;
use crate::rouge::Generate;
use crate::tokenizer::{self, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub repetition_penalty: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            max_new_tokens: 512,
            repetition_penalty: 1.3,
            top_k: 40,
            top_p: 0.9,
            seed: 0,
        }
    }
}

impl DecodeParams {
    /// Parameters under which every stage is a no-op.
    pub fn neutral(vocab_size: usize) -> Self {
        Self {
            temperature: 1.0,
            repetition_penalty: 1.0,
            top_k: vocab_size,
            top_p: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Decode(m));
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if !(self.repetition_penalty >= 1.0) || !self.repetition_penalty.is_finite() {
            return bad(format!("repetition_penalty must be >= 1, got {}", self.repetition_penalty));
        }
        Ok(())
    }
}

/// Anything that yields next-token logits incrementally.
pub trait LanguageModel: Sync {
    type State;
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn begin(&self) -> Self::State;
    /// Extend the sequence by `tokens` and return the logits that follow it.
    fn feed(&self, state: &mut Self::State, tokens: &[u32]) -> Result<Vec<f64>>;
}

fn last_row<F: Scalar>(logits: &crate::numerics::Tensor<F>) -> Vec<f64> {
    let n = logits.rows();
    logits.row(n - 1).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

/// A model with an optional unmerged adapter, decoded through the KV cache.
pub struct Adapted<'a, F, W = crate::numerics::Tensor<F>> {
    pub model: &'a Transformer<F, W>,
    pub adapter: Option<&'a LoraAdapter<F>>,
}

impl<'a, F: Scalar, W: Linear<F>> Adapted<'a, F, W> {
    pub fn new(model: &'a Transformer<F, W>, adapter: Option<&'a LoraAdapter<F>>) -> Self {
        Self { model, adapter }
    }
}

impl<F: Scalar, W: Linear<F>> LanguageModel for Adapted<'_, F, W> {
    type State = KvCache<F>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }
    fn max_seq_len(&self) -> usize {
        self.model.config().max_seq_len
    }
    fn begin(&self) -> KvCache<F> {
        self.model.new_cache()
    }
    fn feed(&self, cache: &mut KvCache<F>, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(last_row(&self.model.forward(tokens, cache, self.adapter)?))
    }
}

impl<F: Scalar, W: Linear<F>> LanguageModel for Transformer<F, W> {
    type State = KvCache<F>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }
    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }
    fn begin(&self) -> KvCache<F> {
        self.new_cache()
    }
    fn feed(&self, cache: &mut KvCache<F>, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(last_row(&self.forward(tokens, cache, None)?))
    }
}

/// Decodes without a cache: every step reruns the whole prefix.
pub struct Recompute<'a, F, W = crate::numerics::Tensor<F>>(pub Adapted<'a, F, W>);

impl<F: Scalar, W: Linear<F>> LanguageModel for Recompute<'_, F, W> {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
    fn max_seq_len(&self) -> usize {
        self.0.max_seq_len()
    }
    fn begin(&self) -> Vec<u32> {
        Vec::new()
    }
    fn feed(&self, prefix: &mut Vec<u32>, tokens: &[u32]) -> Result<Vec<f64>> {
        prefix.extend_from_slice(tokens);
        Ok(last_row(&self.0.model.forward_full(prefix, self.0.adapter)?))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Probability of every token after all four stages; tokens removed by
/// top-k or top-p get zero.
pub fn distribution(logits: &[f64], seen: &[u32], params: &DecodeParams) -> Vec<f64> {
    let mut z = logits.to_vec();
    if params.repetition_penalty != 1.0 {
        let mut hit = vec![false; z.len()];
        for &t in seen {
            if let Some(h) = hit.get_mut(t as usize) {
                *h = true;
            }
        }
        for (v, _) in z.iter_mut().zip(&hit).filter(|(_, &h)| h) {
            *v = if *v > 0.0 { *v / params.repetition_penalty } else { *v * params.repetition_penalty };
        }
    }
    z.iter_mut().for_each(|v| *v /= params.temperature);

    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(params.top_k.min(z.len()).max(1));

    let max = z[order[0]];
    let mut probs: Vec<f64> = order.iter().map(|&i| (z[i] - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);

    let mut keep = probs.len();
    if params.top_p < 1.0 {
        let mut cum = 0.0;
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= params.top_p {
                keep = i + 1;
                break;
            }
        }
    }
    let kept: f64 = probs[..keep].iter().sum();
    let mut out = vec![0.0; z.len()];
    for (&i, &p) in order[..keep].iter().zip(&probs) {
        out[i] = p / kept;
    }
    out
}

/// Draw an index from a probability vector.
pub fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

fn check_lengths<M: LanguageModel + ?Sized>(model: &M, prompt: &[u32], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Decode("prompt is empty".into()));
    }
    if prompt.len() + max_new > model.max_seq_len() {
        return Err(Error::Decode(format!(
            "prompt of {} tokens plus {max_new} new tokens exceeds max_seq_len {}",
            prompt.len(),
            model.max_seq_len()
        )));
    }
    Ok(())
}

fn run<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    max_new: usize,
    mut pick: impl FnMut(&[f64], &[u32]) -> usize,
) -> Result<Vec<u32>> {
    check_lengths(model, prompt, max_new)?;
    let mut out = Vec::new();
    if max_new == 0 {
        return Ok(out);
    }
    let mut state = model.begin();
    let mut seen = prompt.to_vec();
    let mut logits = model.feed(&mut state, prompt)?;
    loop {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode("model produced non-finite logits".into()));
        }
        let tok = pick(&logits, &seen) as u32;
        if tok == tokenizer::EOS {
            break;
        }
        out.push(tok);
        seen.push(tok);
        if out.len() == max_new {
            break;
        }
        logits = model.feed(&mut state, &[tok])?;
    }
    Ok(out)
}

/// Seeded sampling decode. Stops at end-of-sequence (not included in the
/// output) or after `max_new_tokens`.
pub fn decode<M: LanguageModel + ?Sized>(model: &M, prompt: &[u32], params: &DecodeParams) -> Result<Vec<u32>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    run(model, prompt, params.max_new_tokens, |logits, seen| {
        draw(&distribution(logits, seen, params), &mut rng)
    })
}

/// Argmax at every step, no penalty.
pub fn decode_greedy<M: LanguageModel + ?Sized>(model: &M, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
    run(model, prompt, max_new_tokens, |logits, _| argmax(logits))
}

/// Renders a prompt, decodes it and returns the text.
pub struct TextGenerator<'a, M> {
    pub model: &'a M,
    pub vocab: &'a Vocabulary,
    pub params: DecodeParams,
}

impl<M: LanguageModel> TextGenerator<'_, M> {
    /// `[bos] + encode(prompt)`
    pub fn prompt_ids(&self, prompt: &str) -> Vec<u32> {
        let mut ids = vec![tokenizer::BOS];
        ids.extend(self.vocab.encode(prompt));
        ids
    }

    pub fn complete(&self, prompt: &str, seed: u64) -> Result<String> {
        let ids = self.prompt_ids(prompt);
        let room = self.model.max_seq_len().saturating_sub(ids.len());
        let params = DecodeParams { seed, max_new_tokens: self.params.max_new_tokens.min(room), ..self.params };
        let out = decode(self.model, &ids, &params)?;
        self.vocab.decode(&out)
    }
}

impl<M: LanguageModel> Generate for TextGenerator<'_, M> {
    fn generate(&self, _: &ReportRecord, prompt: &str, seed: u64) -> Result<String> {
        self.complete(prompt, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        DecodeParams::default().validate().unwrap();
        for p in [
            DecodeParams { temperature: 0.0, ..Default::default() },
            DecodeParams { top_k: 0, ..Default::default() },
            DecodeParams { top_p: 0.0, ..Default::default() },
            DecodeParams { top_p: 1.5, ..Default::default() },
            DecodeParams { repetition_penalty: 0.9, ..Default::default() },
        ] {
            assert!(p.validate().is_err());
        }
    }

    #[test]
    fn penalty_divides_positive_multiplies_negative() {
        let p = DecodeParams { repetition_penalty: 2.0, ..DecodeParams::neutral(3) };
        let d = distribution(&[2.0, -1.0, 0.5], &[0, 1], &p);
        let z: [f64; 3] = [1.0, -2.0, 0.5];
        let t: f64 = z.iter().map(|v| v.exp()).sum();
        for i in 0..3 {
            assert!((d[i] - z[i].exp() / t).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_keeps_lowest_index_on_ties() {
        let p = DecodeParams { top_k: 1, ..DecodeParams::neutral(3) };
        assert_eq!(distribution(&[1.0, 3.0, 3.0], &[], &p), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn top_p_keeps_smallest_covering_prefix() {
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let p = DecodeParams { top_p: 0.75, ..DecodeParams::neutral(3) };
        let d = distribution(&logits, &[], &p);
        assert!((d[0] - 0.625).abs() < 1e-12 && (d[1] - 0.375).abs() < 1e-12 && d[2] == 0.0);
    }

    #[test]
    fn draw_never_picks_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(draw(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }
}
