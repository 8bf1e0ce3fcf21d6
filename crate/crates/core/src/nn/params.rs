use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable arrays in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

/// Serialized form of one parameter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` under a unique `name`.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn export(&self, prefix: &str) -> Vec<StoredArray> {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .map(|id| {
                let m = self.get(id);
                StoredArray {
                    name: self.name(id).to_string(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: m.iter().copied().collect(),
                }
            })
            .collect()
    }

    /// Overwrites registered parameters from stored arrays. Names and shapes
    /// must match exactly.
    pub fn import(&mut self, arrays: &[StoredArray]) -> Result<()> {
        for a in arrays {
            let id = self
                .id(&a.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", a.name)))?;
            let target = self.get_mut(id);
            if target.dim() != (a.rows, a.cols) || a.data.len() != a.rows * a.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint holds {}x{}",
                    a.name,
                    target.dim(),
                    a.rows,
                    a.cols
                )));
            }
            *target = Mat::from_shape_vec((a.rows, a.cols), a.data.clone())
                .expect("shape checked above");
        }
        Ok(())
    }
}

/// Uniform entries in `[-bound, bound]`.
pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// Glorot-uniform weight matrix.
pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}
