//! Decoder-only transformer in the LLaMA-2 layout: pre-norm RMSNorm blocks,
//! rotary position embeddings on queries and keys, grouped-query attention
//! with an append-only KV cache, and a SwiGLU feed-forward.

mod backward;
mod cache;
mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraLayer, LoraPair};
use crate::numerics::{matmul_t, Scalar, Tensor};
use crate::parallel;

pub use backward::{GradMode, Gradients};
pub use cache::KvCache;
pub use ops::{grouped_attention, rmsnorm, rmsnorm_rows, rope, rope_inverse, RopeTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub rmsnorm_eps: f64,
}

impl ModelConfig {
    /// Default desk-scale shape for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 256,
            n_layers: 4,
            n_heads: 8,
            n_kv_heads: 2,
            d_ff: 688,
            vocab_size,
            max_seq_len: 512,
            rope_base: 10_000.0,
            rmsnorm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_kv_heads == 0 || self.n_kv_heads > self.n_heads || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!("n_kv_heads {} must divide n_heads {}", self.n_kv_heads, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1".into());
        }
        if !(self.rope_base > 0.0) || !(self.rmsnorm_eps > 0.0) {
            return bad("rope_base and rmsnorm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim()
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// A weight matrix stored `out × in`, applied as `y = x Wᵀ` to a batch of
/// row vectors.
pub trait Linear<F: Scalar>: Send + Sync {
    fn out_features(&self) -> usize;
    fn in_features(&self) -> usize;
    fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>>;
}

impl<F: Scalar> Linear<F> for Tensor<F> {
    fn out_features(&self) -> usize {
        self.rows()
    }
    fn in_features(&self) -> usize {
        self.cols()
    }
    fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        matmul_t(x, self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F, W = Tensor<F>> {
    pub attn_norm: Tensor<F>,
    pub wq: W,
    pub wk: W,
    pub wv: W,
    pub wo: W,
    pub ffn_norm: Tensor<F>,
    pub w_gate: W,
    pub w_up: W,
    pub w_down: W,
}

/// Borrowed view of one named parameter.
pub enum Param<'a, F, W> {
    Float(&'a Tensor<F>),
    Weight(&'a W),
}

#[derive(Debug, Clone)]
pub struct Transformer<F, W = Tensor<F>> {
    config: ModelConfig,
    pub embed: Tensor<F>,
    pub blocks: Vec<Block<F, W>>,
    pub final_norm: Tensor<F>,
    pub output: Tensor<F>,
    rope: RopeTable<F>,
    merged: Option<String>,
}

/// Saved activations of one layer, consumed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<F> {
    x_in: Tensor<F>,
    inv_rms1: Vec<F>,
    h1: Tensor<F>,
    lora_q_hidden: Option<Tensor<F>>,
    lora_v_hidden: Option<Tensor<F>>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    probs: Vec<F>,
    attn: Tensor<F>,
    x_mid: Tensor<F>,
    inv_rms2: Vec<F>,
    h2: Tensor<F>,
    gate_pre: Tensor<F>,
    up: Tensor<F>,
    act: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct Trace<F> {
    tokens: Vec<u32>,
    layers: Vec<LayerTrace<F>>,
    x_final: Tensor<F>,
    inv_rms_final: Vec<F>,
    h_final: Tensor<F>,
}

fn gaussian<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::of(normal.sample(rng)))
}

fn ones<F: Scalar>(n: usize) -> Tensor<F> {
    Tensor::from_fn(&[n], |_| F::one())
}

impl<F: Scalar> Transformer<F> {
    /// Random initialization: embeddings `N(0, 1)`, every linear weight
    /// `N(0, 1/fan_in)`, norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let lin = |out: usize, inp: usize, rng: &mut ChaCha8Rng| gaussian::<F>(&[out, inp], 1.0 / (inp as f64).sqrt(), rng);
        let embed = gaussian(&[config.vocab_size, d], 1.0, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: ones(d),
                wq: lin(config.q_dim(), d, &mut rng),
                wk: lin(config.kv_dim(), d, &mut rng),
                wv: lin(config.kv_dim(), d, &mut rng),
                wo: lin(d, config.q_dim(), &mut rng),
                ffn_norm: ones(d),
                w_gate: lin(config.d_ff, d, &mut rng),
                w_up: lin(config.d_ff, d, &mut rng),
                w_down: lin(d, config.d_ff, &mut rng),
            })
            .collect();
        let output = lin(config.vocab_size, d, &mut rng);
        Ok(Self::from_parts(config, embed, blocks, ones(d), output))
    }

    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        Transformer {
            config: self.config,
            embed: self.embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: b.attn_norm.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ffn_norm: b.ffn_norm.cast(),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            output: self.output.cast(),
            rope: RopeTable::new(&self.config),
            merged: self.merged.clone(),
        }
    }

    /// Every parameter tensor, mutable, in canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend([
                &mut b.attn_norm,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ffn_norm,
                &mut b.w_gate,
                &mut b.w_up,
                &mut b.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.output);
        out
    }

    /// Zero-valued tensors with this model's parameter shapes.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.merged = None;
        for p in z.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    /// Digest of the adapter currently merged into the weights, if any.
    pub fn merged_adapter(&self) -> Option<&str> {
        self.merged.as_deref()
    }

    pub(crate) fn set_merged(&mut self, id: Option<String>) {
        self.merged = id;
    }
}

impl<F: Scalar, W: Linear<F>> Transformer<F, W> {
    pub fn from_parts(
        config: ModelConfig,
        embed: Tensor<F>,
        blocks: Vec<Block<F, W>>,
        final_norm: Tensor<F>,
        output: Tensor<F>,
    ) -> Self {
        Self {
            rope: RopeTable::new(&config),
            config,
            embed,
            blocks,
            final_norm,
            output,
            merged: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Named parameters in canonical checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Param<'_, F, W>)> {
        let mut out = vec![("tok_embeddings".to_string(), Param::Float(&self.embed))];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attention_norm"), Param::Float(&b.attn_norm)));
            out.push((p("attention.wq"), Param::Weight(&b.wq)));
            out.push((p("attention.wk"), Param::Weight(&b.wk)));
            out.push((p("attention.wv"), Param::Weight(&b.wv)));
            out.push((p("attention.wo"), Param::Weight(&b.wo)));
            out.push((p("ffn_norm"), Param::Float(&b.ffn_norm)));
            out.push((p("feed_forward.w_gate"), Param::Weight(&b.w_gate)));
            out.push((p("feed_forward.w_up"), Param::Weight(&b.w_up)));
            out.push((p("feed_forward.w_down"), Param::Weight(&b.w_down)));
        }
        out.push(("norm".to_string(), Param::Float(&self.final_norm)));
        out.push(("output".to_string(), Param::Float(&self.output)));
        out
    }

    /// Build a model by pulling each named parameter from `float` (norms,
    /// embeddings, output) or `weight` (block matrices).
    pub fn assemble(
        config: ModelConfig,
        mut float: impl FnMut(&str, &[usize]) -> Result<Tensor<F>>,
        mut weight: impl FnMut(&str, &[usize]) -> Result<W>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = float("tok_embeddings", &[config.vocab_size, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layers.{i}.{n}");
            blocks.push(Block {
                attn_norm: float(&p("attention_norm"), &[d])?,
                wq: weight(&p("attention.wq"), &[config.q_dim(), d])?,
                wk: weight(&p("attention.wk"), &[config.kv_dim(), d])?,
                wv: weight(&p("attention.wv"), &[config.kv_dim(), d])?,
                wo: weight(&p("attention.wo"), &[d, config.q_dim()])?,
                ffn_norm: float(&p("ffn_norm"), &[d])?,
                w_gate: weight(&p("feed_forward.w_gate"), &[config.d_ff, d])?,
                w_up: weight(&p("feed_forward.w_up"), &[config.d_ff, d])?,
                w_down: weight(&p("feed_forward.w_down"), &[d, config.d_ff])?,
            });
        }
        let final_norm = float("norm", &[d])?;
        let output = float("output", &[config.vocab_size, d])?;
        Ok(Self::from_parts(config, embed, blocks, final_norm, output))
    }

    pub fn new_cache(&self) -> KvCache<F> {
        KvCache::new(&self.config)
    }

    fn check_adapter(&self, adapter: Option<&LoraAdapter<F>>) -> Result<()> {
        if let Some(a) = adapter {
            if a.layers().len() != self.config.n_layers {
                return Err(Error::Lora(format!(
                    "adapter has {} layers, model has {}",
                    a.layers().len(),
                    self.config.n_layers
                )));
            }
        }
        Ok(())
    }

    /// Logits for `tokens`, which continue the sequence already held in
    /// `cache`. Returns one row of `vocab_size` logits per new token.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: &mut KvCache<F>,
        adapter: Option<&LoraAdapter<F>>,
    ) -> Result<Tensor<F>> {
        self.run(tokens, cache, adapter, None)
    }

    /// Forward over a fresh cache.
    pub fn forward_full(&self, tokens: &[u32], adapter: Option<&LoraAdapter<F>>) -> Result<Tensor<F>> {
        let mut cache = self.new_cache();
        self.forward(tokens, &mut cache, adapter)
    }

    pub(crate) fn run(
        &self,
        tokens: &[u32],
        cache: &mut KvCache<F>,
        adapter: Option<&LoraAdapter<F>>,
        mut trace: Option<&mut Trace<F>>,
    ) -> Result<Tensor<F>> {
        let cfg = &self.config;
        self.check_adapter(adapter)?;
        if tokens.is_empty() {
            return Ok(Tensor::zeros(&[0, cfg.vocab_size]));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Data(format!("token id {bad} >= vocab_size {}", cfg.vocab_size)));
        }
        let total = cache.len() + tokens.len();
        if total > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: total, max: cfg.max_seq_len });
        }
        let d = cfg.d_model;
        let mut x = Tensor::from_fn(&[tokens.len(), d], |i| self.embed.row(tokens[i / d] as usize)[i % d]);
        let pos0 = cache.len();
        for (l, block) in self.blocks.iter().enumerate() {
            let lora = adapter.map(|a| (&a.layers()[l], a.scale()));
            let layer_trace = trace.as_deref_mut().map(|t| {
                t.layers.push(LayerTrace::placeholder());
                t.layers.last_mut().expect("just pushed")
            });
            match self.block_forward(block, l, &x, pos0, cache, lora, layer_trace) {
                Ok(y) => x = y,
                Err(e) => {
                    cache.truncate(pos0);
                    return Err(e);
                }
            }
        }
        cache.commit(tokens.len());
        let eps = F::of(cfg.rmsnorm_eps);
        let (h, inv) = rmsnorm_rows(&x, self.final_norm.data(), eps);
        let logits = matmul_t(&h, &self.output)?;
        if let Some(t) = trace {
            t.tokens = tokens.to_vec();
            t.x_final = x;
            t.inv_rms_final = inv;
            t.h_final = h;
        }
        Ok(logits)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        block: &Block<F, W>,
        layer: usize,
        x: &Tensor<F>,
        pos0: usize,
        cache: &mut KvCache<F>,
        lora: Option<(&LoraLayer<F>, F)>,
        trace: Option<&mut LayerTrace<F>>,
    ) -> Result<Tensor<F>> {
        let cfg = &self.config;
        let eps = F::of(cfg.rmsnorm_eps);
        let n = x.rows();
        let (h1, inv1) = rmsnorm_rows(x, block.attn_norm.data(), eps);

        let mut q = block.wq.apply(&h1)?;
        let k = block.wk.apply(&h1)?;
        let mut v = block.wv.apply(&h1)?;
        let mut lq = None;
        let mut lv = None;
        if let Some((ll, s)) = lora {
            lq = Some(add_lora(&mut q, &h1, &ll.query, s)?);
            lv = Some(add_lora(&mut v, &h1, &ll.value, s)?);
        }
        let mut k = k;
        let hd = cfg.head_dim();
        let rope_tab = &self.rope;
        parallel::for_each_row(q.data_mut(), cfg.q_dim(), |i, row| rope_tab.apply_heads(row, hd, pos0 + i));
        parallel::for_each_row(k.data_mut(), cfg.kv_dim(), |i, row| rope_tab.apply_heads(row, hd, pos0 + i));

        cache.append(layer, k.data(), v.data());
        let (keys, values) = cache.layer(layer, pos0 + n);
        let (attn, probs) = grouped_attention(&q, keys, values, cfg.n_heads, cfg.n_kv_heads, hd, pos0)?;
        let mut x_mid = block.wo.apply(&attn)?;
        x_mid.add_assign(x)?;

        let (h2, inv2) = rmsnorm_rows(&x_mid, block.ffn_norm.data(), eps);
        let gate_pre = block.w_gate.apply(&h2)?;
        let up = block.w_up.apply(&h2)?;
        let act = ops::swiglu(&gate_pre, &up);
        let mut out = block.w_down.apply(&act)?;
        out.add_assign(&x_mid)?;

        if let Some(t) = trace {
            *t = LayerTrace {
                x_in: x.clone(),
                inv_rms1: inv1,
                h1,
                lora_q_hidden: lq,
                lora_v_hidden: lv,
                q,
                k,
                v,
                probs,
                attn,
                x_mid,
                inv_rms2: inv2,
                h2,
                gate_pre,
                up,
                act,
            };
        }
        Ok(out)
    }
}

impl<F: Scalar, W: Linear<F>> Block<F, W> {
    /// Gated feed-forward on already-normalized rows:
    /// `W_down (silu(W_gate x) ⊙ W_up x)`.
    pub fn ffn(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let gate = self.w_gate.apply(x)?;
        let up = self.w_up.apply(x)?;
        self.w_down.apply(&ops::swiglu(&gate, &up))
    }
}

/// `y += s · (x Bᵀ) Aᵀ`; returns the rank-space activations `x Bᵀ`.
fn add_lora<F: Scalar>(y: &mut Tensor<F>, x: &Tensor<F>, pair: &LoraPair<F>, s: F) -> Result<Tensor<F>> {
    let hidden = matmul_t(x, &pair.b)?;
    let delta = matmul_t(&hidden, &pair.a)?;
    y.add_scaled(s, &delta)?;
    Ok(hidden)
}

impl<F: Scalar> LayerTrace<F> {
    fn placeholder() -> Self {
        let z = || Tensor::zeros(&[0]);
        Self {
            x_in: z(),
            inv_rms1: Vec::new(),
            h1: z(),
            lora_q_hidden: None,
            lora_v_hidden: None,
            q: z(),
            k: z(),
            v: z(),
            probs: Vec::new(),
            attn: z(),
            x_mid: z(),
            inv_rms2: Vec::new(),
            h2: z(),
            gate_pre: z(),
            up: z(),
            act: z(),
        }
    }
}

impl<F: Scalar> Default for Trace<F> {
    fn default() -> Self {
        Self {
            tokens: Vec::new(),
            layers: Vec::new(),
            x_final: Tensor::zeros(&[0]),
            inv_rms_final: Vec::new(),
            h_final: Tensor::zeros(&[0]),
        }
    }
}

impl<F: Scalar> Transformer<F> {
    /// Forward from an empty cache, recording every activation needed by
    /// [`Transformer::backward`].
    pub fn forward_trace(&self, tokens: &[u32], adapter: Option<&LoraAdapter<F>>) -> Result<(Tensor<F>, Trace<F>)> {
        let mut cache = self.new_cache();
        let mut trace = Trace::default();
        let logits = self.run(tokens, &mut cache, adapter, Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// SHA-256 over every parameter's bytes, in canonical order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.named_params() {
            h.update(name.as_bytes());
            let (Param::Float(t) | Param::Weight(t)) = p;
            let mut buf = Vec::with_capacity(t.len() * F::BYTES);
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
