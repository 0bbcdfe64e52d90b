//! SGD and Adam.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::autodiff::Gradients;
use crate::param::{Module, ParamId, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig::Sgd { learning_rate }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate } | OptimizerConfig::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::invalid("adam hyperparameters out of range"));
            }
        }
        Ok(())
    }
}

struct Moments<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Optimizer state: per-parameter Adam moments and the step counter.
pub struct Optimizer<T: Scalar> {
    config: OptimizerConfig,
    moments: HashMap<ParamId, Moments<T>>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            moments: HashMap::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its `grad`; gradients are left for
    /// the caller to zero. Fails before touching anything if a trainable gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| p.trainable && !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { learning_rate } => {
                let lr = T::from_f64(learning_rate);
                for p in params.iter_mut().filter(|p| p.trainable) {
                    let Parameter { value, grad, .. } = &mut **p;
                    for (w, &g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *w = *w - lr * g;
                    }
                }
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                let step_size = T::from_f64(learning_rate / bias1);
                let bias2_sqrt = T::from_f64(bias2.sqrt());
                let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                for p in params.iter_mut().filter(|p| p.trainable) {
                    let id = p.id();
                    let shape = p.value.shape().to_vec();
                    let st = self.moments.entry(id).or_insert_with(|| Moments {
                        m: Tensor::zeros(shape.clone()),
                        v: Tensor::zeros(shape),
                    });
                    let Parameter { value, grad, .. } = &mut **p;
                    let (m, v) = (st.m.data_mut(), st.v.data_mut());
                    for (i, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[i] = b1 * m[i] + one_b1 * g;
                        v[i] = b2 * v[i] + one_b2 * g * g;
                        let denom = v[i].sqrt() / bias2_sqrt + eps;
                        *w = *w - step_size * m[i] / denom;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Replaces every parameter's `grad` with its entry of `grads` and takes one step.
pub fn apply_gradients<T: Scalar, M: Module<T> + ?Sized>(
    model: &mut M,
    grads: &Gradients<T>,
    optimizer: &mut Optimizer<T>,
) -> Result<()> {
    let mut params = model.parameters_mut();
    for p in params.iter_mut() {
        p.zero_grad();
        p.accumulate(grads)?;
    }
    optimizer.step(&mut params)
}
