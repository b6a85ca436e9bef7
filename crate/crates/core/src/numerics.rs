//! Dense row-major tensors and the handful of kernels the decoder needs.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and inference and in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

/// On-disk element type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    Int4 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::Int4),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, alpha: F) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        self.check_same(other, "add")?;
        axpy(F::one(), &other.data, &mut self.data);
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        self.check_same(other, "sub")?;
        axpy(-F::one(), &other.data, &mut self.data);
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: F, other: &Tensor<F>) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max)
    }

    fn check_same(&self, other: &Tensor<F>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn require_matrix<F: Scalar>(t: &Tensor<F>, op: &'static str, other: &Tensor<F>) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::Shape {
            op,
            left: t.shape.clone(),
            right: other.shape.clone(),
        });
    }
    Ok(())
}

/// `C = A · B` for `A: m×k`, `B: k×n`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    require_matrix(a, "matmul", b)?;
    require_matrix(b, "matmul", a)?;
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    parallel::for_each_row(&mut out.data, n.max(1), |i, row| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != F::zero() {
                axpy(av, &b.data[p * n..(p + 1) * n], row);
            }
        }
    });
    Ok(out)
}

/// `C = A · Bᵀ` for `A: m×k`, `B: n×k`. This is the linear-layer product
/// `Y = X Wᵀ` with weights stored `out × in`.
pub fn matmul_t<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    require_matrix(a, "matmul_t", b)?;
    require_matrix(b, "matmul_t", a)?;
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    if b.shape[1] != k {
        return Err(Error::Shape {
            op: "matmul_t",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    parallel::for_each_row(&mut out.data, n.max(1), |i, row| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &b.data[j * k..(j + 1) * k]);
        }
    });
    Ok(out)
}

/// `C = Aᵀ · B` for `A: k×m`, `B: k×n`. Used for weight gradients.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    require_matrix(a, "matmul_tn", b)?;
    require_matrix(b, "matmul_tn", a)?;
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    parallel::for_each_row(&mut out.data, n.max(1), |i, row| {
        for p in 0..k {
            let av = a.data[p * m + i];
            if av != F::zero() {
                axpy(av, &b.data[p * n..(p + 1) * n], row);
            }
        }
    });
    Ok(out)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return;
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax along `axis` of a 1-d or 2-d tensor.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    match (x.shape.len(), axis) {
        (1, 0) => {
            let mut out = x.clone();
            softmax_in_place(&mut out.data);
            Ok(out)
        }
        (2, 1) => {
            let mut out = x.clone();
            let c = out.cols();
            parallel::for_each_row(&mut out.data, c, |_, row| softmax_in_place(row));
            Ok(out)
        }
        (2, 0) => {
            let (r, c) = (x.shape[0], x.shape[1]);
            let mut t = Tensor::from_fn(&[c, r], |i| x.data[(i % r) * c + i / r]);
            parallel::for_each_row(&mut t.data, r, |_, row| softmax_in_place(row));
            Ok(Tensor::from_fn(&[r, c], |i| t.data[(i % c) * r + i / c]))
        }
        _ => Err(Error::Shape {
            op: "softmax",
            left: x.shape.clone(),
            right: vec![axis],
        }),
    }
}

fn log_softmax_at<F: Scalar>(row: &[F], idx: usize) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row[idx] - lse
}

fn check_ce_inputs<F: Scalar>(logits: &Tensor<F>, targets: &[u32], mask: &[bool]) -> Result<()> {
    if logits.shape.len() != 2 || logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape.clone(),
            right: vec![targets.len(), mask.len()],
        });
    }
    let v = logits.cols();
    if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t as usize >= v).map(|(t, _)| t) {
        return Err(Error::Shape {
            op: "cross_entropy target",
            left: logits.shape.clone(),
            right: vec![bad as usize],
        });
    }
    Ok(())
}

/// Summed negative log-likelihood over unmasked rows and the number of such
/// rows.
pub fn cross_entropy_sum<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(F, usize)> {
    check_ce_inputs(logits, targets, mask)?;
    let mut total = F::zero();
    let mut count = 0;
    for (t, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total -= log_softmax_at(logits.row(t), tgt as usize);
            count += 1;
        }
    }
    Ok((total, count))
}

/// Mean of `-log p(target)` over unmasked rows; zero when every row is masked.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[u32], mask: &[bool]) -> Result<F> {
    let (total, count) = cross_entropy_sum(logits, targets, mask)?;
    if count == 0 {
        return Ok(F::zero());
    }
    Ok(total / F::of(count as f64))
}

/// Gradient of `scale * Σ_unmasked -log p(target)` with respect to the logits:
/// `scale * (softmax - onehot)` on unmasked rows, zero elsewhere.
pub fn cross_entropy_backward<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    mask: &[bool],
    scale: F,
) -> Result<Tensor<F>> {
    check_ce_inputs(logits, targets, mask)?;
    let mut grad = Tensor::zeros(&logits.shape);
    let v = logits.cols();
    parallel::for_each_row(&mut grad.data, v, |t, row| {
        if !mask[t] {
            return;
        }
        row.copy_from_slice(logits.row(t));
        softmax_in_place(row);
        row[targets[t] as usize] -= F::one();
        row.iter_mut().for_each(|g| *g *= scale);
    });
    Ok(grad)
}

#[inline]
pub fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}
