use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

use super::backward::ParamGrads;
use super::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 128,
            epochs: 100,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("grad_clip_norm must be > 0, got {}", self.grad_clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: model.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Clips the global gradient norm, then applies `v = μv + g; θ -= lr·v`.
/// Returns the pre-clipping norm.
pub fn sgd_step(model: &mut Model, grads: &ParamGrads, state: &mut SgdState, config: &TrainConfig) -> Result<f64> {
    let mut params = model.params_mut();
    if params.len() != grads.tensors.len() || params.len() != state.velocity.len() {
        return Err(dim_err!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.tensors.len(),
            state.velocity.len()
        ));
    }
    for (p, g) in params.iter().zip(&grads.tensors) {
        p.check_same_shape(g)?;
    }
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    let clip = if norm > config.grad_clip_norm {
        config.grad_clip_norm / norm
    } else {
        1.0
    };
    for ((p, g), v) in params.iter_mut().zip(&grads.tensors).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = config.momentum * *vv + clip * gv;
            *pv -= config.learning_rate * *vv;
        }
    }
    Ok(norm)
}
