use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointSlice};
use super::{NnError, Result};

/// A named `rows x cols` region of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter and gradient storage shared by every layer of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    layout: Vec<ParamSlice>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserves a zero-filled slice and returns its offset.
    pub fn alloc(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        self.grads.resize(offset + rows * cols, 0.0);
        self.layout.push(ParamSlice { name: name.into(), offset, rows, cols });
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Values and gradients borrowed together.
    pub fn split_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `other` into the gradient buffer.
    pub fn accumulate(&mut self, other: &[f64]) {
        assert_eq!(other.len(), self.grads.len());
        self.grads.iter_mut().zip(other).for_each(|(g, o)| *g += o);
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> Option<&ParamSlice> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            slices: self
                .layout
                .iter()
                .map(|s| CheckpointSlice {
                    name: format!("{prefix}{}", s.name),
                    rows: s.rows,
                    cols: s.cols,
                    data: self.values[s.range()].to_vec(),
                })
                .collect(),
        }
    }

    /// Copies every `prefix`-namespaced slice of `ckpt` into this store.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for s in &self.layout {
            let name = format!("{prefix}{}", s.name);
            let src = ckpt.slice(&name).ok_or_else(|| NnError::MissingSlice(name.clone()))?;
            if src.rows != s.rows || src.cols != s.cols {
                return Err(NnError::BadCheckpoint(format!(
                    "{name}: shape {}x{} does not match {}x{}",
                    src.rows, src.cols, s.rows, s.cols
                )));
            }
            self.values[s.range()].copy_from_slice(&src.data);
        }
        Ok(())
    }
}
