//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during a forward pass together
//! with whatever that operation needs for its vector-Jacobian product.
//! [`Tape::backward`] then walks the record in reverse and returns the
//! gradient of every parameter that contributed to the output.
//!
//! Network code is written once against the [`Graph`] trait and runs either
//! on a [`Tape`] (training, gradient checks) or on [`Eager`] (inference).

mod check;
mod eager;
mod tape;

pub use check::{grad_check, GradCheckReport};
pub use eager::Eager;
pub use tape::{record_forward, NodeId, Tape};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, RunningStats, Tensor};

/// Named learnable tensors plus named non-learnable buffers (batch-norm
/// running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Running statistics stored under `{prefix}.running_mean` and
    /// `{prefix}.running_var`.
    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.buffer(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.buffer(&format!("{prefix}.running_var"))?.data().to_vec(),
        })
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        for u in updates {
            let c = u.stats.mean.len();
            self.buffers.insert(
                format!("{}.running_mean", u.prefix),
                Tensor::new(&[c], u.stats.mean.clone())?,
            );
            self.buffers.insert(
                format!("{}.running_var", u.prefix),
                Tensor::new(&[c], u.stats.var.clone())?,
            );
        }
        Ok(())
    }
}

/// New running statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub prefix: String,
    pub stats: RunningStats,
}

/// Parameter name → gradient, for exactly the parameters reached by the
/// backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub(crate) fn insert(&mut self, name: String, grad: Tensor) {
        self.0.insert(name, grad);
    }
}

/// The operations network code needs, independent of whether they are
/// recorded for differentiation.
pub trait Graph {
    type Var: Clone;

    fn param(&mut self, name: &str) -> Result<Self::Var>;
    fn constant(&mut self, value: Tensor) -> Self::Var;
    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor;

    fn conv3d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: Option<&Self::Var>,
        spec: &ConvSpec,
    ) -> Result<Self::Var>;
    fn conv_transpose3d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: Option<&Self::Var>,
        spec: &ConvSpec,
    ) -> Result<Self::Var>;
    /// Batch norm with `{prefix}.gamma`/`{prefix}.beta` parameters and
    /// `{prefix}.running_*` buffers.
    fn batch_norm(&mut self, x: &Self::Var, prefix: &str) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn concat_channels(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn dropout(&mut self, x: &Self::Var, rate: f64) -> Result<Self::Var>;
    fn softmax_channels(&mut self, x: &Self::Var) -> Result<Self::Var>;
}
