//! Blockwise symmetric int4 weight quantization.
//!
//! A tensor is flattened row-major and cut into blocks of `block_size`
//! elements. Each block has scale `max|w| / 7` and one code in `[-7, 7]` per
//! element, two codes per byte (low nibble first). The block maximum is
//! stored as `f32` and the scale is formed from it in `f64` on use, so a code
//! of ±7 always reproduces the maximum exactly.

use crate::error::{Error, Result};
use crate::model::{Block, Linear, Transformer};
use crate::numerics::{dot, Tensor};
use crate::parallel;

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const MAX_CODE: i8 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    block_size: usize,
    block_max: Vec<f32>,
    packed: Vec<u8>,
}

/// A model whose block matrices are int4; norms, embeddings and the output
/// projection stay `f32`.
pub type QuantModel = Transformer<f32, QuantTensor>;

fn encode(code: i8) -> u8 {
    (code as u8) & 0x0F
}

fn decode(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

impl QuantTensor {
    pub fn quantize(w: &Tensor<f32>, block_size: usize) -> Result<Self> {
        if block_size < 2 {
            return Err(Error::Quant(format!("block size must be >= 2, got {block_size}")));
        }
        if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Quant(format!("non-finite value at flat index {i}")));
        }
        let data = w.data();
        let block_max: Vec<f32> = data
            .chunks(block_size)
            .map(|b| b.iter().fold(0f32, |m, v| m.max(v.abs())))
            .collect();
        let code = |i: usize| -> i8 {
            let m = block_max[i / block_size] as f64;
            if m == 0.0 {
                return 0;
            }
            let q = (data[i] as f64 * MAX_CODE as f64 / m).round_ties_even();
            q.clamp(-(MAX_CODE as f64), MAX_CODE as f64) as i8
        };
        let packed = (0..data.len().div_ceil(2))
            .map(|j| {
                let lo = encode(code(2 * j));
                let hi = if 2 * j + 1 < data.len() { encode(code(2 * j + 1)) } else { 0 };
                lo | (hi << 4)
            })
            .collect();
        Ok(Self { shape: w.shape().to_vec(), block_size, block_max, packed })
    }

    /// Reassemble from stored parts, checking sizes and code range.
    pub fn from_parts(shape: Vec<usize>, block_size: usize, block_max: Vec<f32>, packed: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if block_size < 2 || block_max.len() != n.div_ceil(block_size) || packed.len() != n.div_ceil(2) {
            return Err(Error::Quant(format!(
                "inconsistent int4 tensor: {n} elements, block {block_size}, {} blocks, {} bytes",
                block_max.len(),
                packed.len()
            )));
        }
        if block_max.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Quant("block maxima must be finite and non-negative".into()));
        }
        let q = Self { shape, block_size, block_max, packed };
        if (0..n).any(|i| q.code(i) < -MAX_CODE) {
            return Err(Error::Quant("code -8 is not a valid int4 code".into()));
        }
        Ok(q)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Per-block `max|w|` as stored.
    pub fn block_max(&self) -> &[f32] {
        &self.block_max
    }

    /// Scale of block `b`, `max|w| / 7`.
    pub fn scale(&self, b: usize) -> f64 {
        self.block_max[b] as f64 / MAX_CODE as f64
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..self.block_max.len()).map(|b| self.scale(b)).collect()
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Code of flat element `i`.
    pub fn code(&self, i: usize) -> i8 {
        let byte = self.packed[i / 2];
        decode(if i.is_multiple_of(2) { byte & 0x0F } else { byte >> 4 })
    }

    pub fn codes(&self) -> Vec<i8> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }

    /// `code × scale`, rounded once to `f32`.
    fn value(&self, i: usize) -> f32 {
        (self.code(i) as f64 * self.block_max[i / self.block_size] as f64 / MAX_CODE as f64) as f32
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        Tensor::from_fn(&self.shape, |i| self.value(i))
    }

    /// Bytes held in memory: packed codes plus one `f32` per block.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * self.block_max.len()
    }

    fn dequantize_row(&self, row: usize, out: &mut [f32]) {
        let base = row * out.len();
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.value(base + j);
        }
    }
}

impl Linear<f32> for QuantTensor {
    fn out_features(&self) -> usize {
        self.shape[0]
    }

    fn in_features(&self) -> usize {
        self.shape[1]
    }

    /// Dequantizes one weight row at a time and multiplies it against every
    /// input row.
    fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.shape.len() != 2 || x.cols() != self.in_features() {
            return Err(Error::Shape {
                op: "int4 matmul",
                left: x.shape().to_vec(),
                right: self.shape.clone(),
            });
        }
        let (n, out, inp) = (x.rows(), self.out_features(), self.in_features());
        let mut yt = vec![0f32; out * n];
        parallel::for_each_row(&mut yt, n, |j, col| {
            let mut w = vec![0f32; inp];
            self.dequantize_row(j, &mut w);
            for (i, c) in col.iter_mut().enumerate() {
                *c = dot(x.row(i), &w);
            }
        });
        Ok(Tensor::from_fn(&[n, out], |k| yt[(k % out) * n + k / out]))
    }
}

/// Quantize every block matrix of `model`.
pub fn quantize_model(model: &Transformer<f32>, block_size: usize) -> Result<QuantModel> {
    let q = |w: &Tensor<f32>| QuantTensor::quantize(w, block_size);
    let blocks = model
        .blocks
        .iter()
        .map(|b| {
            Ok(Block {
                attn_norm: b.attn_norm.clone(),
                wq: q(&b.wq)?,
                wk: q(&b.wk)?,
                wv: q(&b.wv)?,
                wo: q(&b.wo)?,
                ffn_norm: b.ffn_norm.clone(),
                w_gate: q(&b.w_gate)?,
                w_up: q(&b.w_up)?,
                w_down: q(&b.w_down)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Transformer::from_parts(
        *model.config(),
        model.embed.clone(),
        blocks,
        model.final_norm.clone(),
        model.output.clone(),
    ))
}

/// Float model with every int4 matrix expanded back to `f32`.
pub fn dequantize_model(model: &QuantModel) -> Transformer<f32> {
    let blocks = model
        .blocks
        .iter()
        .map(|b| Block {
            attn_norm: b.attn_norm.clone(),
            wq: b.wq.dequantize(),
            wk: b.wk.dequantize(),
            wv: b.wv.dequantize(),
            wo: b.wo.dequantize(),
            ffn_norm: b.ffn_norm.clone(),
            w_gate: b.w_gate.dequantize(),
            w_up: b.w_up.dequantize(),
            w_down: b.w_down.dequantize(),
        })
        .collect();
    Transformer::from_parts(
        *model.config(),
        model.embed.clone(),
        blocks,
        model.final_norm.clone(),
        model.output.clone(),
    )
}
