//! Trainable-network substrate: parameter store, optimizer, the
//! time-conditioned U-Net and finite-difference gradient verification.

pub mod adam;
pub mod gradcheck;
pub mod train;
pub mod unet;

pub use adam::Adam;
pub use train::TrainConfig;
pub use unet::{NetConfig, UNet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, name-addressable collection of parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; returns its stable index.
    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total scalar count over all arrays.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// In-place θ += c·d over the flattened parameter vector.
    pub fn axpy_flat(&mut self, c: f64, direction: &[f64]) {
        debug_assert_eq!(direction.len(), self.total_len());
        let mut off = 0;
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v += c * direction[off];
                off += 1;
            }
        }
    }

    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::BadCheckpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(other.params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::BadCheckpoint(format!(
                    "parameter mismatch at `{}` vs `{}`",
                    a.name, b.name
                )));
            }
        }
        Ok(())
    }
}

/// Anything that owns a parameter store; lets the gradient checker and the
/// checkpoint container treat networks uniformly.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}
