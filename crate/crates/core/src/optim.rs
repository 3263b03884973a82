//! Adam with bias correction, and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            learning_rate,
        }
    }

    /// Confirms the moment buffers line up with `store`.
    pub fn check_compatible(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state has {} slots, model has {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            p.value().expect_shape(m.shape(), "AdamState (first moment)")?;
            p.value().expect_shape(v.shape(), "AdamState (second moment)")?;
        }
        Ok(())
    }
}

/// One bias-corrected Adam step on every trainable parameter.
///
/// Gradients are left in place. If any trainable gradient is non-finite the
/// step is aborted before anything is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, learning_rate: f64) -> Result<()> {
    state.check_compatible(store)?;
    for p in store.iter().filter(|p| p.trainable) {
        if p.grad().first_non_finite().is_some() {
            return Err(Error::NonFiniteGradient(p.name().to_string()));
        }
    }
    state.t += 1;
    state.learning_rate = learning_rate;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad().data().to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = p.value_mut().data_mut();
        for j in 0..value.len() {
            let g = grad[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = learning_rate * (mj / c1) / ((vj / c2).sqrt() + eps);
            value[j] = (value[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    /// Epochs without improvement before the rate is cut.
    pub patience: usize,
    pub factor: f64,
    /// Minimum decrease that counts as an improvement.
    pub min_delta: f64,
    pub floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 5,
            factor: 0.1,
            min_delta: 1e-4,
            floor: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("plateau.patience must be >= 1".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("plateau.factor must lie in (0, 1), got {}", self.factor)));
        }
        if !(self.min_delta >= 0.0) || !(self.floor >= 0.0) {
            return Err(Error::Config("plateau.min_delta and plateau.floor must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub config: PlateauConfig,
    pub best: f64,
    pub epochs_since_improvement: usize,
    pub learning_rate: f64,
}

impl PlateauSchedule {
    pub fn new(initial_rate: f64, config: PlateauConfig) -> Self {
        PlateauSchedule {
            config,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
            learning_rate: initial_rate,
        }
    }

    /// Feeds one epoch's monitored loss and returns the (possibly reduced)
    /// learning rate.
    pub fn update(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.config.min_delta {
            self.best = loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.config.patience {
                // The floor never raises a rate that started below it.
                self.learning_rate = (self.learning_rate * self.config.factor)
                    .max(self.config.floor)
                    .min(self.learning_rate);
                self.epochs_since_improvement = 0;
            }
        }
        self.learning_rate
    }
}
