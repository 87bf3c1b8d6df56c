use std::ops::Range;

use crate::error::{EspError, Result};

/// A named slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub range: Range<usize>,
}

/// Flat parameter storage with a registry of named layer slices.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterVector {
    values: Vec<f64>,
    registry: Vec<ParamSlice>,
}

impl ParameterVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-initialized slice and returns its range.
    pub fn register(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let range = start..start + len;
        self.registry.push(ParamSlice { name: name.into(), range: range.clone() });
        range
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

    pub fn registry(&self) -> &[ParamSlice] {
        &self.registry
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.registry.iter().find(|s| s.name == name).map(|s| &self.values[s.range.clone()])
    }

    /// Replaces all values; the length must match.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(EspError::invalid(format!(
                "parameter count mismatch: expected {}, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
