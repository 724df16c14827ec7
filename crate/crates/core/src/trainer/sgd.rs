use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape};
use crate::error::Result;
use crate::model::{BoundParams, ParameterSet};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v = μ·v + g`, `θ = θ − lr·v`.
/// A fresh buffer makes the first step plain `θ − lr·g`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one step to every parameter bound in `bound`.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        bound: &BoundParams,
        tape: &Tape,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        for (name, &var) in bound.iter() {
            let g = grads.wrt(tape, var);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name)?;
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
