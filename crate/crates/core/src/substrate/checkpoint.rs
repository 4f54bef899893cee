//! Serialisable parameter arrays for checkpoint files.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::SubstrateError;

/// One named, shaped array in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn store_to_arrays(store: &ParamStore) -> Vec<NamedArray> {
    store
        .to_named()
        .into_iter()
        .map(|(name, t)| NamedArray { name, rows: t.rows(), cols: t.cols(), data: t.into_vec() })
        .collect()
}

/// Loads arrays into `store`, validating every shape and name.
pub fn load_arrays(store: &mut ParamStore, arrays: &[NamedArray]) -> Result<(), SubstrateError> {
    let mut named = HashMap::with_capacity(arrays.len());
    for a in arrays {
        if a.data.len() != a.rows * a.cols {
            return Err(SubstrateError::ShapeMismatch {
                name: a.name.clone(),
                expected: (a.rows, a.cols),
                found: (a.data.len(), 1),
            });
        }
        named.insert(a.name.clone(), Tensor::from_vec(a.rows, a.cols, a.data.clone()));
    }
    store.load_named(&named)
}
