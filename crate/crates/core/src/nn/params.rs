//! Parameter storage.
//!
//! All trainable tensors live in one [`ParamStore`], addressed by [`ParamId`].
//! Each tensor carries a [`ParamGroup`] tag so the optimizer can use
//! per-group learning rates and the tape can restrict a backward pass to one
//! group (the policy loss must not move model weights).

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;

/// Which subsystem a parameter belongs to. Drives learning-rate selection
/// and gradient filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Observation encoder.
    Encoder,
    /// Dynamics, reward head, value ensemble.
    Model,
    /// Policy prior.
    Policy,
    /// Stage discriminators.
    Discriminator,
    /// Momentum copies of the value ensemble; never touched by the optimizer.
    Target,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Model => "model",
            ParamGroup::Policy => "policy",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Target => "target",
        }
    }
}

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Flat store of named parameter tensors plus their gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.rows, value.cols);
        self.tensors.push(ParamTensor { name: name.into(), group, value, grad });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copy `src`'s values into `dst` (used when refreshing target networks
    /// and when transferring pretrained weights).
    pub fn copy_values(&mut self, src: ParamId, dst: ParamId) -> Result<()> {
        let (sr, sc) = {
            let s = &self.tensors[src.0].value;
            (s.rows, s.cols)
        };
        let d = &self.tensors[dst.0].value;
        if (d.rows, d.cols) != (sr, sc) {
            return Err(Error::DimMismatch {
                context: "ParamStore::copy_values".into(),
                expected: sr * sc,
                got: d.rows * d.cols,
            });
        }
        let src_data = self.tensors[src.0].value.data.clone();
        self.tensors[dst.0].value.data.copy_from_slice(&src_data);
        Ok(())
    }

    /// `dst = tau * dst + (1 - tau) * src` elementwise (momentum update).
    pub fn lerp_values(&mut self, src: ParamId, dst: ParamId, tau: f64) {
        let src_data = self.tensors[src.0].value.data.clone();
        for (d, s) in self.tensors[dst.0].value.data.iter_mut().zip(&src_data) {
            *d = tau * *d + (1.0 - tau) * s;
        }
    }

    /// Error if any value in `group` (or any group when `None`) is non-finite.
    pub fn check_finite(&self, group: Option<ParamGroup>) -> Result<()> {
        for t in &self.tensors {
            if let Some(g) = group {
                if t.group != g {
                    continue;
                }
            }
            if !t.value.is_finite() {
                return Err(Error::NonFinite(format!("parameter {}", t.name)));
            }
        }
        Ok(())
    }
}
