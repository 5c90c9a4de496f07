//! Flattened parameter gradients with a named layout.
//!
//! Every noise/covariance computation in this crate works on a single flat
//! vector over all model parameters. The layout records where each named
//! parameter lives so gradients can be mapped back onto a model.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One named parameter's slot in the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Ordered, contiguous layout of all parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl ParamLayout {
    /// Build a layout from `(name, shape)` pairs, packing contiguously.
    pub fn new(params: impl IntoIterator<Item = (String, Vec<usize>)>) -> Self {
        let mut slots = Vec::new();
        let mut offset = 0;
        for (name, shape) in params {
            let len: usize = shape.iter().product();
            slots.push(ParamSlot {
                name,
                shape,
                offset,
            });
            offset += len;
        }
        ParamLayout {
            slots,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// Flat parameter gradient (or parameter-shaped noise sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let n = layout.total_len();
        GradVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Self {
        assert_eq!(layout.total_len(), values.len());
        GradVector { layout, values }
    }

    /// A single anonymous scalar slot; convenient for scalar samplers.
    pub fn scalar(v: f64) -> Self {
        let layout = ParamLayout::new([("x".to_string(), vec![])]);
        GradVector {
            layout,
            values: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_scaled(&mut self, other: &GradVector, s: f64) {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn sub(&self, other: &GradVector) -> GradVector {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        GradVector {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// View one named parameter as a tensor.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let slot = self.layout.slot(name)?;
        let len: usize = slot.shape.iter().product();
        Some(Tensor::new(
            slot.shape.clone(),
            self.values[slot.offset..slot.offset + len].to_vec(),
        ))
    }
}
