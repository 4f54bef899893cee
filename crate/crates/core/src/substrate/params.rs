//! Named trainable parameters and their gradient accumulators.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::graph::Gradients;
use super::tensor::Tensor;
use super::SubstrateError;

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub(crate) value: Arc<Tensor>,
    pub grad: Tensor,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Owns a set of parameters under unique dotted names. A frozen store still
/// feeds values into graphs but never receives gradients.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, SubstrateError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(SubstrateError::DuplicateParam(name));
        }
        let index = self.params.len();
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), index);
        self.params.push(Param { name, value: Arc::new(value), grad });
        Ok(ParamId { store: self.tag, index })
    }

    /// Matrix initialised uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId, SubstrateError> {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId, SubstrateError> {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> Result<ParamId, SubstrateError> {
        self.add(name, Tensor::filled(rows, cols, value))
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId, SubstrateError> {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    #[inline]
    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId { store: self.tag, index })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId { store: self.tag, index })
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.tag, "parameter id belongs to a different store");
        id.index
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[self.check(id)]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[self.check(id)].value
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[self.check(id)].value)
    }

    /// Mutable access to a value. Copies on write if a graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.check(id);
        Arc::make_mut(&mut self.params[i].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), SubstrateError> {
        let i = self.check(id);
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(SubstrateError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.value.shape(),
                found: value.shape(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        let tag = self.tag;
        self.params.iter().enumerate().map(move |(index, p)| (ParamId { store: tag, index }, p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds this store's share of `grads` into the accumulators. No-op when frozen.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if self.frozen {
            return;
        }
        for (id, g) in grads.param_grads() {
            if id.store == self.tag {
                self.params[id.index].grad.add_assign(g);
            }
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.scale_assign(s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values by name from `named`, validating every shape. Every
    /// parameter in the store must be present.
    pub fn load_named(&mut self, named: &HashMap<String, Tensor>) -> Result<(), SubstrateError> {
        for p in &mut self.params {
            let t = named.get(&p.name).ok_or_else(|| SubstrateError::MissingParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(SubstrateError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape(),
                    found: t.shape(),
                });
            }
            p.value = Arc::new(t.clone());
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), (*p.value).clone())).collect()
    }
}
