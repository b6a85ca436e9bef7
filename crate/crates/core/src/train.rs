//! Adapter fine-tuning: batch assembly with loss masking, gradient
//! accumulation and Adam updates on the low-rank pairs only.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PromptTemplate, ReportRecord};
use crate::error::{io_at, Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{GradMode, Gradients, Linear, Transformer};
use crate::numerics::{cross_entropy_backward, cross_entropy_sum, Scalar, Tensor};
use crate::parallel;
use crate::tokenizer::{self, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub grad_accum_steps: usize,
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.41e-5,
            batch_size: 4,
            max_seq_len: 512,
            grad_accum_steps: 16,
            lora_r: 64,
            lora_alpha: 16.0,
            epochs: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the desk model and a few hundred records per
    /// modality: rank 8, a larger step size and a smaller effective batch.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            grad_accum_steps: 2,
            lora_r: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lora_alpha > 0.0) || !self.lora_alpha.is_finite() {
            return Err(Error::Config(format!("lora_alpha must be positive, got {}", self.lora_alpha)));
        }
        for (v, name) in [
            (self.batch_size, "batch_size"),
            (self.max_seq_len, "max_seq_len"),
            (self.grad_accum_steps, "grad_accum_steps"),
            (self.lora_r, "lora_r"),
            (self.epochs, "epochs"),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Sequences per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    /// Set one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "grad_accum_steps" => self.grad_accum_steps = parse(key, value)?,
            "lora_r" => self.lora_r = parse(key, value)?,
            "lora_alpha" => self.lora_alpha = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines over the current values. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path).map_err(io_at(path))?)
    }

    /// The config as `key = value` lines, readable by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        format!(
            "learning_rate = {}\nbatch_size = {}\nmax_seq_len = {}\ngrad_accum_steps = {}\nlora_r = {}\nlora_alpha = {}\nepochs = {}\nseed = {}\n",
            self.learning_rate,
            self.batch_size,
            self.max_seq_len,
            self.grad_accum_steps,
            self.lora_r,
            self.lora_alpha,
            self.epochs,
            self.seed
        )
    }

    /// Fresh adapter for `model` with this config's rank, alpha and seed.
    pub fn new_adapter<F: Scalar, W: Linear<F>>(&self, model: &Transformer<F, W>) -> Result<LoraAdapter<F>> {
        LoraAdapter::attach(model, self.lora_r, self.lora_alpha, self.seed)
    }
}

/// One training sequence. `mask[j]` marks positions whose token is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Example {
    /// `[bos] + prompt + target + [eos]`, cut to `max_seq_len`. Returns
    /// `None` when the prompt leaves no room for a target token.
    pub fn new(prompt: &[u32], target: &[u32], max_seq_len: usize) -> Option<Self> {
        if 1 + prompt.len() >= max_seq_len {
            return None;
        }
        let mut tokens = Vec::with_capacity(prompt.len() + target.len() + 2);
        tokens.push(tokenizer::BOS);
        tokens.extend_from_slice(prompt);
        let start = tokens.len();
        tokens.extend_from_slice(target);
        tokens.push(tokenizer::EOS);
        tokens.truncate(max_seq_len);
        let mask = (0..tokens.len()).map(|j| j >= start).collect();
        Some(Self { tokens, mask })
    }

    /// Number of scored positions.
    pub fn scored(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Next-token targets and mask aligned with the logits rows.
    fn shifted(&self) -> (Vec<u32>, Vec<bool>) {
        let n = self.tokens.len();
        let mut targets: Vec<u32> = self.tokens[1..].to_vec();
        targets.push(tokenizer::PAD);
        let mut mask: Vec<bool> = self.mask[1..].to_vec();
        mask.push(false);
        debug_assert_eq!(targets.len(), n);
        (targets, mask)
    }
}

/// Tokenized records; rows padded to `max_seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    /// Records dropped because the prompt alone filled the context.
    pub skipped: usize,
}

impl Batch {
    /// `(rows, max_seq_len)`
    pub fn shape(&self) -> (usize, usize) {
        (self.tokens.len(), self.tokens.first().map_or(0, Vec::len))
    }

    /// Rows without padding.
    pub fn examples(&self) -> Vec<Example> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .zip(&self.lengths)
            .map(|((t, m), &n)| Example { tokens: t[..n].to_vec(), mask: m[..n].to_vec() })
            .collect()
    }
}

pub fn make_examples(
    records: &[ReportRecord],
    vocab: &Vocabulary,
    template: &PromptTemplate,
    max_seq_len: usize,
) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        let (prompt, target) = template.render(r)?;
        match Example::new(&vocab.encode(&prompt), &vocab.encode(&target), max_seq_len) {
            Some(e) => out.push(e),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

pub fn make_batch(
    records: &[ReportRecord],
    vocab: &Vocabulary,
    template: &PromptTemplate,
    max_seq_len: usize,
) -> Result<Batch> {
    let (examples, skipped) = make_examples(records, vocab, template, max_seq_len)?;
    let mut b = Batch { tokens: Vec::new(), mask: Vec::new(), lengths: Vec::new(), skipped };
    for e in examples {
        let n = e.tokens.len();
        let mut t = e.tokens;
        t.resize(max_seq_len, tokenizer::PAD);
        let mut m = e.mask;
        m.resize(max_seq_len, false);
        b.tokens.push(t);
        b.mask.push(m);
        b.lengths.push(n);
    }
    Ok(b)
}

fn add_grads<F: Scalar>(acc: &mut Gradients<F>, g: Gradients<F>) -> Result<()> {
    if let (Some(a), Some(b)) = (acc.adapter.as_mut(), g.adapter.as_ref()) {
        for (x, y) in a.params_mut().into_iter().zip(b.params()) {
            x.add_assign(y)?;
        }
    }
    if let (Some(a), Some(mut b)) = (acc.model.as_mut(), g.model) {
        for (x, y) in a.params_mut().into_iter().zip(b.params_mut()) {
            x.add_assign(y)?;
        }
    }
    Ok(())
}

/// Summed loss over `examples` divided by `denom`, and its gradient.
/// Per-example passes run in parallel and are reduced in input order.
pub fn loss_and_grad<F: Scalar>(
    model: &Transformer<F>,
    adapter: Option<&LoraAdapter<F>>,
    examples: &[Example],
    denom: usize,
    mode: GradMode,
) -> Result<(F, Gradients<F>)> {
    let scale = F::one() / F::of(denom.max(1) as f64);
    let parts = parallel::map(examples, |_, e| -> Result<(F, Gradients<F>)> {
        let (logits, trace) = model.forward_trace(&e.tokens, adapter)?;
        let (targets, mask) = e.shifted();
        let (sum, _) = cross_entropy_sum(&logits, &targets, &mask)?;
        let dlogits = cross_entropy_backward(&logits, &targets, &mask, scale)?;
        Ok((sum * scale, model.backward(&trace, &dlogits, adapter, mode)?))
    });
    let mut loss = F::zero();
    let mut acc: Option<Gradients<F>> = None;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => add_grads(a, g)?,
        }
    }
    let acc = match acc {
        Some(a) => a,
        None => Gradients {
            model: (mode == GradMode::Full).then(|| model.zeros_like()),
            adapter: adapter.map(LoraAdapter::zeros_like),
        },
    };
    Ok((loss, acc))
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<F>>, grads: Vec<&Tensor<F>>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.t));
        let c2 = F::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (F::of(self.lr), F::of(self.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub tokens: usize,
    pub tokens_per_s: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} loss={:.6} tokens={} tokens_per_s={:.1}",
            self.step, self.epoch, self.loss, self.tokens, self.tokens_per_s
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub adapter: LoraAdapter<F>,
    pub history: Vec<StepLog>,
    pub skipped: usize,
}

impl<F> TrainOutcome<F> {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.loss).collect()
    }
}

/// Fine-tune `adapter` on `records`. The base model is only read. Each epoch
/// shuffles the examples with a stream seeded from `config.seed`; every
/// `grad_accum_steps` micro-batches of `batch_size` make one optimizer step,
/// whose loss is the mean over all scored tokens in that window.
#[allow(clippy::too_many_arguments)]
pub fn train<F: Scalar>(
    model: &Transformer<F>,
    mut adapter: LoraAdapter<F>,
    records: &[ReportRecord],
    vocab: &Vocabulary,
    template: &PromptTemplate,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    adapter.check_compatible(model.config())?;
    let max_len = config.max_seq_len.min(model.config().max_seq_len);
    let (examples, skipped) = make_examples(records, vocab, template, max_len)?;
    if examples.is_empty() {
        return Err(Error::Data("no trainable records (empty split or every prompt too long)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut history = Vec::new();
    let window = config.effective_batch();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(window) {
            let started = Instant::now();
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let denom: usize = batch.iter().map(Example::scored).sum();
            let mut loss = F::zero();
            let mut acc: Option<Gradients<F>> = None;
            for micro in batch.chunks(config.batch_size) {
                let (l, g) = loss_and_grad(model, Some(&adapter), micro, denom, GradMode::AdapterOnly)?;
                loss += l;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => add_grads(a, g)?,
                }
            }
            let step = history.len() + 1;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            let grads = acc.and_then(|g| g.adapter).expect("adapter gradients");
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            opt.step(adapter.params_mut(), grads.params());
            let tokens: usize = batch.iter().map(|e| e.tokens.len()).sum();
            let secs = started.elapsed().as_secs_f64().max(1e-9);
            let log = StepLog { step, epoch: epoch + 1, loss, tokens, tokens_per_s: tokens as f64 / secs };
            on_step(&log);
            history.push(log);
        }
    }
    Ok(TrainOutcome { adapter, history, skipped })
}
