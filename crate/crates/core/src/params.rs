//! Named parameter storage for one network.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a stored tensor is for. Decides initialization and whether the
/// optimizer touches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    ConvWeight,
    DenseWeight,
    Bias,
    PreluSlope,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl Role {
    pub fn trainable(self) -> bool {
        !matches!(self, Role::RunningMean | Role::RunningVar)
    }

    /// Value of every element before random initialization.
    pub fn default_fill(self) -> f64 {
        match self {
            Role::PreluSlope => crate::nn::PRELU_INIT,
            Role::BnGamma | Role::RunningVar => 1.0,
            _ => 0.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub role: Role,
}

/// Ordered map from stable names to tensors. Trainable entries are leaves
/// with `requires_grad` set; running statistics are constant leaves.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `name` filled with the role's default value.
    pub fn insert(&mut self, name: impl Into<String>, role: Role, shape: &[usize]) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n = shape.iter().product();
        let data = vec![role.default_fill(); n];
        let tensor = if role.trainable() {
            Tensor::param(shape, data)?
        } else {
            Tensor::new(shape, data)?
        };
        self.entries.insert(name, Param { tensor, role });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.entries.get(name).map(|p| p.role)
    }

    /// Replaces the values of `name`, keeping shape and role. The new tensor
    /// is a fresh leaf, so any accumulated gradient is dropped.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let shape = p.tensor.shape().to_vec();
        p.tensor = if p.role.trainable() {
            Tensor::param(&shape, data)?
        } else {
            Tensor::new(&shape, data)?
        };
        Ok(())
    }

    /// Swaps in a tensor of the same shape, e.g. a tracked leaf for
    /// gradient checks.
    pub fn replace_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "replace_tensor",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.role.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Same values with gradient tracking switched off everywhere. Forward
    /// passes over a frozen set still propagate gradients to their inputs.
    pub fn frozen(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.detach(),
                            role: p.role,
                        },
                    )
                })
                .collect(),
            version: self.version,
        }
    }

    /// Incremented once per optimizer update.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Applies running-statistics updates collected during a forward pass.
    pub fn apply_updates(&mut self, updates: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (name, data) in updates {
            self.set_data(&name, data)?;
        }
        Ok(())
    }

    /// Bitwise equality of names, roles, shapes and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.role == b.role
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// SHA-256 over names, roles, shapes and raw values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update([p.role.code()]);
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
