//! Stochastic gradient descent with momentum and per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the coupling parameters.
    pub mrf_lr_multiplier: f64,
    /// Whether weight decay also applies to the coupling parameters.
    pub mrf_weight_decay: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            mrf_lr_multiplier: 10.0,
            mrf_weight_decay: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        if !(self.mrf_lr_multiplier > 0.0 && self.mrf_lr_multiplier.is_finite()) {
            return Err(Error::InvalidArgument("learning-rate multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// A parameter and its gradient buffer.
pub struct Parameter<'a> {
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
}

pub struct ParamGroup<'a> {
    pub name: &'static str,
    pub lr_multiplier: f64,
    pub decay: bool,
    pub params: Vec<Parameter<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Velocity per group and parameter.
    velocity: Vec<Vec<Tensor>>,
}

impl SgdState {
    /// Zero velocities for groups whose parameters have the given shapes.
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, shapes: &[Vec<Vec<usize>>]) -> Self {
        SgdState {
            lr,
            momentum,
            weight_decay,
            step: 0,
            velocity: shapes
                .iter()
                .map(|g| g.iter().map(|s| Tensor::zeros(s)).collect())
                .collect(),
        }
    }

    pub fn velocity(&self, group: usize, param: usize) -> Option<&Tensor> {
        self.velocity.get(group)?.get(param)
    }
}

/// One update of every parameter:
/// `g = grad + wd * param`, `v = momentum * v + g`, `param -= lr * multiplier * v`.
/// Gradients are zeroed afterwards.
pub fn sgd_step(groups: &mut [ParamGroup<'_>], state: &mut SgdState) -> Result<()> {
    if groups.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameter groups but velocity buffers for {}",
            groups.len(),
            state.velocity.len()
        )));
    }
    for (gi, group) in groups.iter().enumerate() {
        if !(group.lr_multiplier > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "group {} has non-positive multiplier {}",
                group.name, group.lr_multiplier
            )));
        }
        if group.params.len() != state.velocity[gi].len() {
            return Err(Error::Shape(format!("missing velocity buffer in group {}", group.name)));
        }
        for (p, v) in group.params.iter().zip(&state.velocity[gi]) {
            if !p.value.same_shape(v) || !p.grad.same_shape(v) {
                return Err(Error::Shape(format!(
                    "group {}: parameter {:?}, gradient {:?}, velocity {:?}",
                    group.name,
                    p.value.shape(),
                    p.grad.shape(),
                    v.shape()
                )));
            }
        }
    }
    for (gi, group) in groups.iter_mut().enumerate() {
        let wd = if group.decay { state.weight_decay } else { 0.0 };
        let rate = state.lr * group.lr_multiplier;
        for (p, v) in group.params.iter_mut().zip(&mut state.velocity[gi]) {
            for ((x, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                let g = g + wd * *x;
                *vel = state.momentum * *vel + g;
                *x -= rate * *vel;
            }
            p.grad.fill(0.0);
        }
    }
    state.step += 1;
    Ok(())
}
