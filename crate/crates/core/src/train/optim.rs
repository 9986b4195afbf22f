use std::collections::BTreeMap;

use crate::autodiff::{GradientMap, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies update number `t` (1-based) to every parameter that has a
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap, lr: f64, t: u64) -> Result<()> {
        if t == 0 {
            return Err(Error::InvalidConfig("Adam step counter starts at 1".into()));
        }
        let c1 = 1.0 - ADAM_BETA1.powf(t as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(t as f64);
        for (name, g) in grads.iter() {
            let p = store.param_mut(name)?;
            p.expect_same_shape(g)?;
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}
