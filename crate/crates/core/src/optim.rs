//! Trainable parameters and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{CenetError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    /// Uniform initialisation in `[-bound, bound)`.
    pub fn uniform(
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Parameter::new(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        )
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds `g` into the stored gradient. Frozen parameters ignore it.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(CenetError::shape(
                "accumulate",
                self.value.shape(),
                g.shape(),
            ));
        }
        if self.frozen {
            return Ok(());
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }
}

/// Adds every gradient in `grads` to the parameter of the same name.
pub fn accumulate_all(params: &mut [&mut Parameter], grads: &Gradients) -> Result<()> {
    for p in params.iter_mut() {
        if let Some(g) = grads.get(&p.name) {
            p.accumulate(g)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily (zeroed) the first
/// time a parameter name is seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.moments
            .iter()
            .map(|(k, (m, v))| (k.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Rebuilds an optimizer from saved state.
    pub fn restore(
        config: AdamConfig,
        step: u64,
        moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> Self {
        Adam {
            config,
            step,
            moments,
        }
    }

    /// One update over `params`, then zeroes their gradients. Frozen
    /// parameters are left untouched.
    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}
