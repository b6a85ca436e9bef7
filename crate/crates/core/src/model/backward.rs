//! Hand-derived reverse pass over the fixed block structure.

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraPair};
use crate::numerics::{dot, matmul, matmul_tn, silu, silu_grad, Scalar, Tensor};
use crate::parallel;

use super::{Block, LayerTrace, Trace, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients for every base weight and, if present, the adapter.
    Full,
    /// Gradients for the adapter only; base weights are treated as frozen.
    AdapterOnly,
}

/// Parameter gradients, shaped like the parameters themselves.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub model: Option<Transformer<F>>,
    pub adapter: Option<LoraAdapter<F>>,
}

/// Returns `(dx, dgain)` for `y = gain ⊙ x / rms(x)` applied row-wise.
fn rmsnorm_backward<F: Scalar>(x: &Tensor<F>, gain: &[F], inv: &[F], dy: &Tensor<F>) -> (Tensor<F>, Vec<F>) {
    let d = x.cols();
    let df = F::of(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    parallel::for_each_row(dx.data_mut(), d, |i, row| {
        let (xr, dyr, r) = (x.row(i), dy.row(i), inv[i]);
        let s: F = xr.iter().zip(dyr).zip(gain).map(|((&a, &b), &g)| g * b * a).sum();
        let k = r * r * r * s / df;
        for j in 0..d {
            row[j] = r * gain[j] * dyr[j] - k * xr[j];
        }
    });
    let mut dgain = vec![F::zero(); d];
    for (i, &r) in inv.iter().enumerate() {
        let (xr, dyr) = (x.row(i), dy.row(i));
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * r;
        }
    }
    (dx, dgain)
}

struct AttnGrads<F> {
    dq: Tensor<F>,
    dk: Tensor<F>,
    dv: Tensor<F>,
}

/// Reverse of causal grouped attention over a full sequence (no prefix).
fn attention_backward<F: Scalar>(
    lt: &LayerTrace<F>,
    d_attn: &Tensor<F>,
    n_heads: usize,
    n_kv_heads: usize,
    hd: usize,
) -> AttnGrads<F> {
    let t = lt.q.rows();
    let q_dim = n_heads * hd;
    let kv_dim = n_kv_heads * hd;
    let group = n_heads / n_kv_heads;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let (q, k, v, probs) = (&lt.q, &lt.k, &lt.v, &lt.probs);
    let p_at = |i: usize, h: usize, j: usize| probs[(i * n_heads + h) * t + j];

    // dS[i][h][j], already multiplied by the score scale
    let mut ds = vec![F::zero(); t * n_heads * t];
    parallel::for_each_row(&mut ds, n_heads * t, |i, row| {
        let doi = d_attn.row(i);
        for h in 0..n_heads {
            let g = h / group;
            let doh = &doi[h * hd..(h + 1) * hd];
            let seg = &mut row[h * t..h * t + i + 1];
            let mut c = F::zero();
            for (j, s) in seg.iter_mut().enumerate() {
                let dp = dot(doh, &v.row(j)[g * hd..(g + 1) * hd]);
                *s = dp;
                c += p_at(i, h, j) * dp;
            }
            for (j, s) in seg.iter_mut().enumerate() {
                *s = p_at(i, h, j) * (*s - c) * scale;
            }
        }
    });

    let mut dq = Tensor::zeros(&[t, q_dim]);
    parallel::for_each_row(dq.data_mut(), q_dim, |i, row| {
        for h in 0..n_heads {
            let g = h / group;
            let out = &mut row[h * hd..(h + 1) * hd];
            for j in 0..=i {
                let w = ds[(i * n_heads + h) * t + j];
                for (o, &kv) in out.iter_mut().zip(&k.row(j)[g * hd..(g + 1) * hd]) {
                    *o += w * kv;
                }
            }
        }
    });

    let mut dk = Tensor::zeros(&[t, kv_dim]);
    parallel::for_each_row(dk.data_mut(), kv_dim, |j, row| {
        for h in 0..n_heads {
            let g = h / group;
            let out = &mut row[g * hd..(g + 1) * hd];
            for i in j..t {
                let w = ds[(i * n_heads + h) * t + j];
                for (o, &qv) in out.iter_mut().zip(&q.row(i)[h * hd..(h + 1) * hd]) {
                    *o += w * qv;
                }
            }
        }
    });

    let mut dv = Tensor::zeros(&[t, kv_dim]);
    parallel::for_each_row(dv.data_mut(), kv_dim, |j, row| {
        for h in 0..n_heads {
            let g = h / group;
            let out = &mut row[g * hd..(g + 1) * hd];
            for i in j..t {
                let w = p_at(i, h, j);
                for (o, &dv) in out.iter_mut().zip(&d_attn.row(i)[h * hd..(h + 1) * hd]) {
                    *o += w * dv;
                }
            }
        }
    });

    AttnGrads { dq, dk, dv }
}

/// Pull `dy` back through `y += s · hidden Aᵀ` with `hidden = x Bᵀ`.
/// Accumulates into `grad` and `dx`.
fn lora_backward<F: Scalar>(
    pair: &LoraPair<F>,
    s: F,
    x: &Tensor<F>,
    hidden: &Tensor<F>,
    dy: &Tensor<F>,
    grad: &mut LoraPair<F>,
    dx: &mut Tensor<F>,
) -> Result<()> {
    grad.a.add_scaled(s, &matmul_tn(dy, hidden)?)?;
    let mut dhidden = matmul(dy, &pair.a)?;
    dhidden.scale(s);
    grad.b.add_assign(&matmul_tn(&dhidden, x)?)?;
    dx.add_assign(&matmul(&dhidden, &pair.b)?)?;
    Ok(())
}

impl<F: Scalar> Transformer<F> {
    /// Gradients of `Σ dlogits ⊙ logits` for the forward recorded in `trace`.
    pub fn backward(
        &self,
        trace: &Trace<F>,
        dlogits: &Tensor<F>,
        adapter: Option<&LoraAdapter<F>>,
        mode: GradMode,
    ) -> Result<Gradients<F>> {
        let cfg = self.config();
        let t = trace.tokens.len();
        if dlogits.shape() != [t, cfg.vocab_size] || trace.layers.len() != cfg.n_layers {
            return Err(Error::Shape {
                op: "backward",
                left: dlogits.shape().to_vec(),
                right: vec![t, cfg.vocab_size],
            });
        }
        if adapter.is_none() && mode == GradMode::AdapterOnly {
            return Err(Error::Lora("adapter-only gradients requested without an adapter".into()));
        }
        let full = mode == GradMode::Full;
        let mut gm = full.then(|| self.zeros_like());
        let mut ga = adapter.map(LoraAdapter::zeros_like);

        let dh = matmul(dlogits, &self.output)?;
        if let Some(g) = gm.as_mut() {
            g.output = matmul_tn(dlogits, &trace.h_final)?;
        }
        let (mut dx, dgain) = rmsnorm_backward(&trace.x_final, self.final_norm.data(), &trace.inv_rms_final, &dh);
        if let Some(g) = gm.as_mut() {
            g.final_norm = Tensor::new(vec![cfg.d_model], dgain)?;
        }

        for l in (0..cfg.n_layers).rev() {
            let lora = adapter.map(|a| (&a.layers()[l], a.scale()));
            let glora = ga.as_mut().map(|a| &mut a.layers_mut()[l]);
            let gblock = gm.as_mut().map(|g| &mut g.blocks[l]);
            dx = self.block_backward(&self.blocks[l], &trace.layers[l], &dx, lora, glora, gblock)?;
        }

        if let Some(g) = gm.as_mut() {
            let d = cfg.d_model;
            for (i, &tok) in trace.tokens.iter().enumerate() {
                let src = &dx.data()[i * d..(i + 1) * d];
                let dst = g.embed.row_mut(tok as usize);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        Ok(Gradients { model: gm, adapter: ga })
    }

    fn block_backward(
        &self,
        block: &Block<F>,
        lt: &LayerTrace<F>,
        dout: &Tensor<F>,
        lora: Option<(&crate::lora::LoraLayer<F>, F)>,
        glora: Option<&mut crate::lora::LoraLayer<F>>,
        mut gblock: Option<&mut Block<F>>,
    ) -> Result<Tensor<F>> {
        let cfg = self.config();
        let hd = cfg.head_dim();

        // feed-forward
        let d_act = matmul(dout, &block.w_down)?;
        let (g, u, da) = (lt.gate_pre.data(), lt.up.data(), d_act.data());
        let d_gate = Tensor::from_fn(lt.gate_pre.shape(), |i| da[i] * u[i] * silu_grad(g[i]));
        let d_up = Tensor::from_fn(lt.up.shape(), |i| da[i] * silu(g[i]));
        let mut dh2 = matmul(&d_gate, &block.w_gate)?;
        dh2.add_assign(&matmul(&d_up, &block.w_up)?)?;
        let (dxm, dg2) = rmsnorm_backward(&lt.x_mid, block.ffn_norm.data(), &lt.inv_rms2, &dh2);
        let mut dx_mid = dout.clone();
        dx_mid.add_assign(&dxm)?;
        if let Some(gb) = gblock.as_deref_mut() {
            gb.w_down = matmul_tn(dout, &lt.act)?;
            gb.w_gate = matmul_tn(&d_gate, &lt.h2)?;
            gb.w_up = matmul_tn(&d_up, &lt.h2)?;
            gb.ffn_norm = Tensor::new(vec![cfg.d_model], dg2)?;
        }

        // attention
        let d_attn = matmul(&dx_mid, &block.wo)?;
        let AttnGrads { mut dq, mut dk, dv } = attention_backward(lt, &d_attn, cfg.n_heads, cfg.n_kv_heads, hd);
        parallel::for_each_row(dq.data_mut(), cfg.q_dim(), |i, row| self.rope.invert_heads(row, hd, i));
        parallel::for_each_row(dk.data_mut(), cfg.kv_dim(), |i, row| self.rope.invert_heads(row, hd, i));

        let mut dh1 = matmul(&dq, &block.wq)?;
        dh1.add_assign(&matmul(&dk, &block.wk)?)?;
        dh1.add_assign(&matmul(&dv, &block.wv)?)?;
        if let (Some((ll, s)), Some(gl)) = (lora, glora) {
            let hq = lt.lora_q_hidden.as_ref().ok_or_else(|| Error::Lora("trace lacks adapter activations".into()))?;
            let hv = lt.lora_v_hidden.as_ref().ok_or_else(|| Error::Lora("trace lacks adapter activations".into()))?;
            lora_backward(&ll.query, s, &lt.h1, hq, &dq, &mut gl.query, &mut dh1)?;
            lora_backward(&ll.value, s, &lt.h1, hv, &dv, &mut gl.value, &mut dh1)?;
        }
        let (dx1, dg1) = rmsnorm_backward(&lt.x_in, block.attn_norm.data(), &lt.inv_rms1, &dh1);
        if let Some(gb) = gblock {
            gb.wo = matmul_tn(&dx_mid, &lt.attn)?;
            gb.wq = matmul_tn(&dq, &lt.h1)?;
            gb.wk = matmul_tn(&dk, &lt.h1)?;
            gb.wv = matmul_tn(&dv, &lt.h1)?;
            gb.attn_norm = Tensor::new(vec![cfg.d_model], dg1)?;
        }
        dx_mid.add_assign(&dx1)?;
        Ok(dx_mid)
    }
}
