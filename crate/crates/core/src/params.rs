//! Named flat parameter storage and its gradient counterpart.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter names and shapes, with the offset of each tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(specs: Vec<ParamSpec>) -> Self {
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.numel();
        }
        Self { specs, offsets, total }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Flat range occupied by tensor `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.specs[i].numel()
    }

    pub fn range_of(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.index_of(name).map(|i| self.range(i))
    }
}

/// Model parameters: one flat `f64` buffer partitioned by a shared [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.total()];
        Self { layout, data }
    }

    pub fn from_flat(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "parameter buffer has {} entries, layout needs {}",
                data.len(),
                layout.total()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("parameter buffer contains non-finite entries".into()));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.range_of(name).map(|r| &self.data[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.range_of(name)?;
        Some(&mut self.data[r])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Accumulated partial derivatives, congruent with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { layout: params.layout.clone(), data: vec![0.0; params.len()] }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.range_of(name).map(|r| &self.data[r])
    }

    pub fn is_congruent(&self, params: &ParamSet) -> bool {
        Arc::ptr_eq(&self.layout, &params.layout) || *self.layout == *params.layout
    }

    /// Entrywise sum; summation order is fixed by the caller.
    pub fn accumulate(&mut self, other: &GradSet) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch("gradient sets have different layouts".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}
