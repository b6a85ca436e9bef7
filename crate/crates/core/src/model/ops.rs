use crate::error::{Error, Result};
use crate::numerics::{dot, silu, softmax_in_place, Scalar, Tensor};
use crate::parallel;

use super::ModelConfig;

/// `y_i = gain_i · x_i / sqrt(mean(x²) + eps)`
pub fn rmsnorm<F: Scalar>(x: &[F], gain: &[F], eps: F) -> Vec<F> {
    assert_eq!(x.len(), gain.len(), "rmsnorm: input and gain lengths differ");
    let inv = inv_rms(x, eps);
    x.iter().zip(gain).map(|(&xi, &g)| g * xi * inv).collect()
}

/// The mean square is accumulated in `f64` so large `f32` activations do not
/// overflow it.
#[inline]
fn inv_rms<F: Scalar>(x: &[F], eps: F) -> F {
    let ss: f64 = x.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum();
    let ms = ss / x.len() as f64;
    F::of(1.0 / (ms + eps.to_f64().unwrap_or(0.0)).sqrt())
}

/// Row-wise RMSNorm; also returns each row's `1/rms` for the backward pass.
pub fn rmsnorm_rows<F: Scalar>(x: &Tensor<F>, gain: &[F], eps: F) -> (Tensor<F>, Vec<F>) {
    let d = x.cols();
    let inv: Vec<F> = (0..x.rows()).map(|i| inv_rms(x.row(i), eps)).collect();
    let mut out = Tensor::zeros(x.shape());
    parallel::for_each_row(out.data_mut(), d, |i, row| {
        for ((o, &xi), &g) in row.iter_mut().zip(x.row(i)).zip(gain) {
            *o = g * xi * inv[i];
        }
    });
    (out, inv)
}

fn rope_angle(position: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    position as f64 * base.powf(-2.0 * pair as f64 / head_dim as f64)
}

fn rotate<F: Scalar>(v: &mut [F], cos: impl Fn(usize) -> F, sin: impl Fn(usize) -> F) {
    for (i, pair) in v.chunks_exact_mut(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let (c, s) = (cos(i), sin(i));
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Rotate consecutive pairs `(x_2i, x_2i+1)` of one head vector by
/// `position · base^(-2i/d)`.
pub fn rope<F: Scalar>(v: &[F], position: usize, base: f64) -> Result<Vec<F>> {
    rope_signed(v, position, base, 1.0)
}

/// Inverse rotation (the transpose, used to pull gradients back).
pub fn rope_inverse<F: Scalar>(v: &[F], position: usize, base: f64) -> Result<Vec<F>> {
    rope_signed(v, position, base, -1.0)
}

fn rope_signed<F: Scalar>(v: &[F], position: usize, base: f64, sign: f64) -> Result<Vec<F>> {
    let d = v.len();
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary embedding needs an even head dim, got {d}")));
    }
    let mut out = v.to_vec();
    let ang = |i| rope_angle(position, i, d, base);
    rotate(&mut out, |i| F::of(ang(i).cos()), |i| F::of(sign * ang(i).sin()));
    Ok(out)
}

/// Precomputed cos/sin per (position, pair).
#[derive(Debug, Clone)]
pub struct RopeTable<F> {
    cos: Vec<F>,
    sin: Vec<F>,
    half: usize,
}

impl<F: Scalar> RopeTable<F> {
    pub fn new(config: &ModelConfig) -> Self {
        let hd = config.head_dim();
        let half = hd / 2;
        let n = config.max_seq_len * half;
        let mut cos = Vec::with_capacity(n);
        let mut sin = Vec::with_capacity(n);
        for p in 0..config.max_seq_len {
            for i in 0..half {
                let a = rope_angle(p, i, hd, config.rope_base);
                cos.push(F::of(a.cos()));
                sin.push(F::of(a.sin()));
            }
        }
        Self { cos, sin, half }
    }

    /// Rotate every head in a row of concatenated heads.
    pub fn apply_heads(&self, row: &mut [F], head_dim: usize, position: usize) {
        let base = position * self.half;
        for head in row.chunks_exact_mut(head_dim) {
            rotate(head, |i| self.cos[base + i], |i| self.sin[base + i]);
        }
    }

    pub fn invert_heads(&self, row: &mut [F], head_dim: usize, position: usize) {
        let base = position * self.half;
        for head in row.chunks_exact_mut(head_dim) {
            rotate(head, |i| self.cos[base + i], |i| -self.sin[base + i]);
        }
    }
}

/// Causal grouped-query attention.
///
/// `q` holds `n` new query rows (`n_heads · head_dim` wide) at absolute
/// positions `pos0..pos0+n`; `keys`/`values` hold all `pos0 + n` cached rows
/// (`n_kv_heads · head_dim` wide). Query head `h` reads key/value head
/// `h / (n_heads / n_kv_heads)`. Returns the attended rows and the attention
/// probabilities laid out `[n][n_heads][pos0 + n]`.
pub fn grouped_attention<F: Scalar>(
    q: &Tensor<F>,
    keys: &[F],
    values: &[F],
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    pos0: usize,
) -> Result<(Tensor<F>, Vec<F>)> {
    let n = q.rows();
    let q_dim = n_heads * head_dim;
    let kv_dim = n_kv_heads * head_dim;
    let total = pos0 + n;
    if q.cols() != q_dim || keys.len() != total * kv_dim || values.len() != total * kv_dim {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: vec![keys.len() / kv_dim.max(1), kv_dim],
        });
    }
    let group = n_heads / n_kv_heads;
    let scale = F::one() / F::of(head_dim as f64).sqrt();

    let mut probs = vec![F::zero(); n * n_heads * total];
    parallel::for_each_row(&mut probs, n_heads * total, |i, row| {
        let visible = pos0 + i + 1;
        let qi = q.row(i);
        for h in 0..n_heads {
            let g = h / group;
            let qh = &qi[h * head_dim..(h + 1) * head_dim];
            let p = &mut row[h * total..h * total + visible];
            for (j, s) in p.iter_mut().enumerate() {
                let kj = &keys[j * kv_dim + g * head_dim..j * kv_dim + (g + 1) * head_dim];
                *s = dot(qh, kj) * scale;
            }
            softmax_in_place(p);
        }
    });

    let mut out = Tensor::zeros(&[n, q_dim]);
    parallel::for_each_row(out.data_mut(), q_dim, |i, row| {
        let visible = pos0 + i + 1;
        for h in 0..n_heads {
            let g = h / group;
            let p = &probs[(i * n_heads + h) * total..(i * n_heads + h) * total + visible];
            let oh = &mut row[h * head_dim..(h + 1) * head_dim];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &values[j * kv_dim + g * head_dim..j * kv_dim + (g + 1) * head_dim];
                for (o, &vv) in oh.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    });
    Ok((out, probs))
}

/// `silu(gate) ⊙ up`
pub(crate) fn swiglu<F: Scalar>(gate: &Tensor<F>, up: &Tensor<F>) -> Tensor<F> {
    let g = gate.data();
    let u = up.data();
    Tensor::from_fn(gate.shape(), |i| silu(g[i]) * u[i])
}
