//! Low-rank adapters on the query and value projections.
//!
//! For a target weight `W` (`m × n`, applied as `y = x Wᵀ`) the adapter holds
//! `A` (`m × r`) and `B` (`r × n`) and contributes `ΔW = (alpha / r) · A B`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::numerics::{matmul, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<F> {
    /// `m × r`
    pub a: Tensor<F>,
    /// `r × n`
    pub b: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<F> {
    pub query: LoraPair<F>,
    pub value: LoraPair<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    rank: usize,
    alpha: f64,
    layers: Vec<LoraLayer<F>>,
}

/// Which projection a pair adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Query,
    Value,
}

impl Target {
    pub fn weight_name(self) -> &'static str {
        match self {
            Target::Query => "attention.wq",
            Target::Value => "attention.wv",
        }
    }
}

fn target_shapes(config: &ModelConfig) -> [(Target, usize, usize); 2] {
    [
        (Target::Query, config.q_dim(), config.d_model),
        (Target::Value, config.kv_dim(), config.d_model),
    ]
}

impl<F: Scalar> LoraPair<F> {
    /// `(m, r, n)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.rows(), self.a.cols(), self.b.cols())
    }

    /// `scale · A B`
    pub fn delta(&self, scale: F) -> Result<Tensor<F>> {
        let mut d = matmul(&self.a, &self.b)?;
        d.scale(scale);
        Ok(d)
    }
}

impl<F: Scalar> LoraAdapter<F> {
    /// Fresh adapter for every layer of a model with `config`. `A` is drawn
    /// from `N(0, 1/r)`, `B` is zero, so the initial delta vanishes.
    pub fn new(config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if rank == 0 {
            return Err(Error::Lora("rank must be >= 1".into()));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Lora(format!("alpha must be positive, got {alpha}")));
        }
        for (t, m, n) in target_shapes(config) {
            if rank > m.min(n) {
                return Err(Error::Lora(format!(
                    "rank {rank} exceeds min({m}, {n}) for {}",
                    t.weight_name()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("finite std");
        let mut pair = |m: usize, n: usize| LoraPair {
            a: Tensor::from_fn(&[m, rank], |_| F::of(normal.sample(&mut rng))),
            b: Tensor::zeros(&[rank, n]),
        };
        let layers = (0..config.n_layers)
            .map(|_| LoraLayer {
                query: pair(config.q_dim(), config.d_model),
                value: pair(config.kv_dim(), config.d_model),
            })
            .collect();
        Ok(Self { rank, alpha, layers })
    }

    /// Adapter shaped for `model`.
    pub fn attach<W>(model: &Transformer<F, W>, rank: usize, alpha: f64, seed: u64) -> Result<Self>
    where
        W: crate::model::Linear<F>,
    {
        Self::new(model.config(), rank, alpha, seed)
    }

    /// Adapter from explicit pairs; shapes must agree with `rank`.
    pub fn from_layers(rank: usize, alpha: f64, layers: Vec<LoraLayer<F>>) -> Result<Self> {
        if rank == 0 || !(alpha > 0.0) {
            return Err(Error::Lora(format!("invalid rank {rank} or alpha {alpha}")));
        }
        for (i, l) in layers.iter().enumerate() {
            for p in [&l.query, &l.value] {
                let (m, r, n) = p.dims();
                if r != rank || p.b.rows() != rank || p.a.shape().len() != 2 || p.b.shape().len() != 2 {
                    return Err(Error::Lora(format!("layer {i}: pair {m}x{r} / {}x{n} does not have rank {rank}", p.b.rows())));
                }
            }
        }
        Ok(Self { rank, alpha, layers })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / rank`
    pub fn scale(&self) -> F {
        F::of(self.alpha / self.rank as f64)
    }

    pub fn layers(&self) -> &[LoraLayer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LoraLayer<F>] {
        &mut self.layers
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    /// Trainable tensors in canonical order: per layer `q.a, q.b, v.a, v.b`.
    pub fn params(&self) -> Vec<&Tensor<F>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.query.a, &l.query.b, &l.value.a, &l.value.b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.query.a, &mut l.query.b, &mut l.value.a, &mut l.value.b])
            .collect()
    }

    /// Named tensors as stored on disk.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (t, p) in [(Target::Query, &l.query), (Target::Value, &l.value)] {
                let base = format!("layers.{i}.{}", t.weight_name());
                out.push((format!("{base}.lora_a"), &p.a));
                out.push((format!("{base}.lora_b"), &p.b));
            }
        }
        out
    }

    /// Number of trainable scalars, `Σ r (m + n)` over targets.
    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// SHA-256 over rank, alpha and every tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rank as u64).to_le_bytes());
        h.update(self.alpha.to_le_bytes());
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            let mut buf = Vec::with_capacity(t.len() * F::BYTES);
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Check that every pair fits the target weights of `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Lora(format!(
                "adapter has {} layers, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for ((t, m, n), p) in target_shapes(config).into_iter().zip([&l.query, &l.value]) {
                let (pm, _, pn) = p.dims();
                if (pm, pn) != (m, n) {
                    return Err(Error::Lora(format!(
                        "layer {i} {}: adapter is {pm}x{pn}, weight is {m}x{n}",
                        t.weight_name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn apply_deltas(&self, model: &mut Transformer<F>, sign: F) -> Result<()> {
        let s = self.scale() * sign;
        for (block, l) in model.blocks.iter_mut().zip(&self.layers) {
            block.wq.add_assign(&l.query.delta(s)?)?;
            block.wv.add_assign(&l.value.delta(s)?)?;
        }
        Ok(())
    }
}

/// `W ← W + ΔW` for every target. Fails if the model already carries a
/// merged adapter.
pub fn merge<F: Scalar>(model: &mut Transformer<F>, adapter: &LoraAdapter<F>) -> Result<()> {
    adapter.check_compatible(model.config())?;
    let id = adapter.digest();
    if let Some(cur) = model.merged_adapter() {
        let what = if cur == id { "this adapter is" } else { "another adapter is" };
        return Err(Error::Lora(format!("{what} already merged")));
    }
    adapter.apply_deltas(model, F::one())?;
    model.set_merged(Some(id));
    Ok(())
}

/// Merged copy of `model`.
pub fn merged<F: Scalar>(model: &Transformer<F>, adapter: &LoraAdapter<F>) -> Result<Transformer<F>> {
    let mut m = model.clone();
    merge(&mut m, adapter)?;
    Ok(m)
}

/// `W ← W − ΔW`; `adapter` must be the one currently merged.
pub fn unmerge<F: Scalar>(model: &mut Transformer<F>, adapter: &LoraAdapter<F>) -> Result<()> {
    adapter.check_compatible(model.config())?;
    expect_merged(model, adapter)?;
    adapter.apply_deltas(model, -F::one())?;
    model.set_merged(None);
    Ok(())
}

/// `(W + ΔW) − ΔW + ΔW′` using matrix addition only.
pub fn swap<F: Scalar>(model: &mut Transformer<F>, old: &LoraAdapter<F>, new: &LoraAdapter<F>) -> Result<()> {
    old.check_compatible(model.config())?;
    new.check_compatible(model.config())?;
    expect_merged(model, old)?;
    old.apply_deltas(model, -F::one())?;
    new.apply_deltas(model, F::one())?;
    model.set_merged(Some(new.digest()));
    Ok(())
}

fn expect_merged<F: Scalar>(model: &Transformer<F>, adapter: &LoraAdapter<F>) -> Result<()> {
    match model.merged_adapter() {
        Some(cur) if cur == adapter.digest() => Ok(()),
        Some(_) => Err(Error::Lora("model is merged with a different adapter".into())),
        None => Err(Error::Lora("model has no merged adapter".into())),
    }
}
