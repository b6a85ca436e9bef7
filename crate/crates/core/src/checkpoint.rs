//! Binary container for models, adapters and int4 models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "OLM2" | version u32
//! d_model n_layers n_heads n_kv_heads d_ff vocab_size max_seq_len : u32 × 7
//! rope_base rmsnorm_eps : f64 × 2
//! [adapter files only] rank u32 | alpha f64
//! repeated until end of file:
//!   name_len u32 | name bytes | n_dims u32 | dims u64 × n_dims | dtype u8 | payload
//! ```
//!
//! Float payloads are the raw elements. An int4 payload is
//! `block_size u32 | block max f32 × n_blocks | packed codes`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{io_at, Error, Result};
use crate::lora::{LoraAdapter, LoraLayer, LoraPair};
use crate::model::{Linear, ModelConfig, Param, Transformer};
use crate::numerics::{DType, Scalar, Tensor};
use crate::quant::{QuantModel, QuantTensor};

pub const MAGIC: &[u8; 4] = b"OLM2";
pub const VERSION: u32 = 1;

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Int4(QuantTensor),
}

impl Stored {
    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::F64(_) => DType::F64,
            Stored::Int4(_) => DType::Int4,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
            Stored::Int4(q) => q.shape(),
        }
    }

    fn float<F: Scalar>(t: &Tensor<F>) -> Self {
        match F::DTYPE {
            DType::F32 => Stored::F32(t.cast()),
            _ => Stored::F64(t.cast()),
        }
    }

    /// Float tensor in precision `F`. Exact when the stored precision is `F`.
    pub fn to_float<F: Scalar>(&self) -> Result<Tensor<F>> {
        match self {
            Stored::F32(t) => Ok(t.cast()),
            Stored::F64(t) => Ok(t.cast()),
            Stored::Int4(_) => Err(Error::Checkpoint("expected a float tensor, found int4".into())),
        }
    }
}

/// Parsed container: header plus named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub adapter: Option<(usize, f64)>,
    pub tensors: Vec<(String, Stored)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for (v, what) in [
            (c.d_model, "d_model"),
            (c.n_layers, "n_layers"),
            (c.n_heads, "n_heads"),
            (c.n_kv_heads, "n_kv_heads"),
            (c.d_ff, "d_ff"),
            (c.vocab_size, "vocab_size"),
            (c.max_seq_len, "max_seq_len"),
        ] {
            put_u32(&mut out, dim_u32(v, what)?);
        }
        out.extend_from_slice(&c.rope_base.to_le_bytes());
        out.extend_from_slice(&c.rmsnorm_eps.to_le_bytes());
        if let Some((rank, alpha)) = self.adapter {
            put_u32(&mut out, dim_u32(rank, "rank")?);
            out.extend_from_slice(&alpha.to_le_bytes());
        }
        for (name, t) in &self.tensors {
            put_u32(&mut out, dim_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, dim_u32(t.shape().len(), "rank")?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.dtype() as u8);
            match t {
                Stored::F32(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
                Stored::F64(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
                Stored::Int4(q) => {
                    put_u32(&mut out, dim_u32(q.block_size(), "block size")?);
                    q.block_max().iter().for_each(|v| v.write_le(&mut out));
                    out.extend_from_slice(q.packed());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], adapter: bool) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an OLM2 file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            d_model: dims[0],
            n_layers: dims[1],
            n_heads: dims[2],
            n_kv_heads: dims[3],
            d_ff: dims[4],
            vocab_size: dims[5],
            max_seq_len: dims[6],
            rope_base: r.f64()?,
            rmsnorm_eps: r.f64()?,
        };
        config.validate().map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let adapter = if adapter { Some((r.u32()? as usize, r.f64()?)) } else { None };
        let mut tensors = Vec::new();
        while !r.done() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let code = r.u8()?;
            let t = match DType::from_code(code) {
                Some(DType::F32) => Stored::F32(Tensor::new(shape, r.floats(n)?)?),
                Some(DType::F64) => Stored::F64(Tensor::new(shape, r.floats(n)?)?),
                Some(DType::Int4) => {
                    let bs = r.u32()? as usize;
                    if bs < 2 {
                        return Err(Error::Checkpoint(format!("{name}: block size {bs}")));
                    }
                    let maxima = r.floats(n.div_ceil(bs))?;
                    let packed = r.take(n.div_ceil(2))?.to_vec();
                    Stored::Int4(QuantTensor::from_parts(shape, bs, maxima, packed)?)
                }
                None => return Err(Error::Checkpoint(format!("{name}: unknown dtype code {code}"))),
            };
            tensors.push((name, t));
        }
        Ok(Self { config, adapter, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(io_at(path))?;
        Ok(())
    }

    pub fn load(path: &Path, adapter: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_at(path))?;
        Self::from_bytes(&bytes, adapter).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn into_map(self) -> Result<(ModelConfig, Option<AdapterHeader>, Tensors)> {
        let mut map = BTreeMap::new();
        for (name, t) in self.tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        Ok((self.config, self.adapter, Tensors(map)))
    }
}

/// Adapter rank and alpha.
type AdapterHeader = (usize, f64);

struct Tensors(BTreeMap<String, Stored>);

impl Tensors {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Stored> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(extra) => Err(Error::Checkpoint(format!("unexpected tensor {extra}"))),
            None => Ok(()),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats<F: Scalar>(&mut self, n: usize) -> Result<Vec<F>> {
        let bytes = self.take(n.checked_mul(F::BYTES).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(F::BYTES).map(F::read_le).collect())
    }
}

fn model_container<F: Scalar, W: Linear<F>>(model: &Transformer<F, W>, weight: impl Fn(&W) -> Stored) -> Container {
    let tensors = model
        .named_params()
        .into_iter()
        .map(|(name, p)| {
            let t = match p {
                Param::Float(t) => Stored::float(t),
                Param::Weight(w) => weight(w),
            };
            (name, t)
        })
        .collect();
    Container { config: *model.config(), adapter: None, tensors }
}

pub fn save_model<F: Scalar>(path: &Path, model: &Transformer<F>) -> Result<()> {
    model_container(model, Stored::float).save(path)
}

/// Load a float checkpoint in precision `F`.
pub fn load_model<F: Scalar>(path: &Path) -> Result<Transformer<F>> {
    model_from(Container::load(path, false)?)
}

fn model_from<F: Scalar>(c: Container) -> Result<Transformer<F>> {
    let (config, _, mut t) = c.into_map()?;
    let cell = std::cell::RefCell::new(&mut t);
    let m = Transformer::assemble(
        config,
        |n, s| cell.borrow_mut().take(n, s)?.to_float(),
        |n, s| cell.borrow_mut().take(n, s)?.to_float(),
    )?;
    t.finish()?;
    Ok(m)
}

pub fn save_quant(path: &Path, model: &QuantModel) -> Result<()> {
    model_container(model, |q| Stored::Int4(q.clone())).save(path)
}

pub fn load_quant(path: &Path) -> Result<QuantModel> {
    quant_from(Container::load(path, false)?)
}

fn quant_from(c: Container) -> Result<QuantModel> {
    let (config, _, mut t) = c.into_map()?;
    let cell = std::cell::RefCell::new(&mut t);
    let m = Transformer::assemble(
        config,
        |n, s| cell.borrow_mut().take(n, s)?.to_float(),
        |n, s| match cell.borrow_mut().take(n, s)? {
            Stored::Int4(q) => Ok(q),
            _ => Err(Error::Checkpoint(format!("{n}: expected int4 weights"))),
        },
    )?;
    t.finish()?;
    Ok(m)
}

/// A model file of either kind.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Float(Transformer<f32>),
    Quant(QuantModel),
}

/// Load a model file, detecting int4 weights.
pub fn load_any(path: &Path) -> Result<AnyModel> {
    let c = Container::load(path, false)?;
    if c.tensors.iter().any(|(_, t)| t.dtype() == DType::Int4) {
        Ok(AnyModel::Quant(quant_from(c)?))
    } else {
        Ok(AnyModel::Float(model_from(c)?))
    }
}

pub fn save_adapter<F: Scalar>(path: &Path, config: &ModelConfig, adapter: &LoraAdapter<F>) -> Result<()> {
    adapter.check_compatible(config)?;
    let tensors = adapter
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, Stored::float(t)))
        .collect();
    Container { config: *config, adapter: Some((adapter.rank(), adapter.alpha())), tensors }.save(path)
}

/// Load an adapter and the model config it was trained against.
pub fn load_adapter<F: Scalar>(path: &Path) -> Result<(ModelConfig, LoraAdapter<F>)> {
    let (config, header, mut t) = Container::load(path, true)?.into_map()?;
    let (rank, alpha) = header.expect("adapter header");
    let d = config.d_model;
    let mut pair = |i: usize, w: &str, m: usize| -> Result<LoraPair<F>> {
        let base = format!("layers.{i}.attention.{w}");
        Ok(LoraPair {
            a: t.take(&format!("{base}.lora_a"), &[m, rank])?.to_float()?,
            b: t.take(&format!("{base}.lora_b"), &[rank, d])?.to_float()?,
        })
    };
    let layers = (0..config.n_layers)
        .map(|i| {
            Ok(LoraLayer {
                query: pair(i, "wq", config.q_dim())?,
                value: pair(i, "wv", config.kv_dim())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    t.finish()?;
    Ok((config, LoraAdapter::from_layers(rank, alpha, layers)?))
}
