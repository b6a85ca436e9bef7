use crate::numerics::Scalar;

use super::ModelConfig;

/// Per-layer keys and values for positions `[0, len)`. Append-only; cleared
/// only by [`KvCache::reset`].
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
    kv_dim: usize,
    max_len: usize,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            len: 0,
            kv_dim: config.kv_dim(),
            max_len: config.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_len
    }

    pub fn reset(&mut self) {
        self.truncate(0);
    }

    pub(crate) fn append(&mut self, layer: usize, k: &[F], v: &[F]) {
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
    }

    /// Keys and values of `layer` for the first `upto` positions.
    pub(crate) fn layer(&self, layer: usize, upto: usize) -> (&[F], &[F]) {
        let n = upto * self.kv_dim;
        (&self.keys[layer][..n], &self.values[layer][..n])
    }

    pub(crate) fn commit(&mut self, n: usize) {
        self.len += n;
        debug_assert!(self.len <= self.max_len);
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        let n = len * self.kv_dim;
        self.keys.iter_mut().for_each(|k| k.truncate(n));
        self.values.iter_mut().for_each(|v| v.truncate(n));
        self.len = len;
    }
}
