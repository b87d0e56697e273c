use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::graph::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam-family hyperparameters. `decoupled_weight_decay` selects AdamW.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            decoupled_weight_decay: true,
            ..Self::adam(lr)
        }
    }
}

/// Moment accumulators for every parameter of a store.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters without a gradient still receive
    /// decoupled weight decay and moment decay. Aborts before touching
    /// any parameter when a gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.param(id) {
                if !g.is_finite() {
                    return Err(NumError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        // Parameters registered after the state was built.
        while self.m.len() < params.len() {
            let id = params.ids().nth(self.m.len()).expect("index in range");
            let shape = params.get(id).shape().to_vec();
            self.m.push(Tensor::zeros(shape.clone()));
            self.v.push(Tensor::zeros(shape));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::c(c.lr / bc1);
        let bc2_sqrt = T::c(bc2.sqrt());
        let eps = T::c(c.eps);
        let lr = T::c(c.lr);
        let wd = T::c(c.weight_decay);
        for id in params.ids() {
            let i = id.index();
            let grad = grads.param(id);
            let p = params.get_mut(id);
            if c.decoupled_weight_decay && c.weight_decay > 0.0 {
                let f = T::one() - lr * wd;
                p.data_mut().iter_mut().for_each(|x| *x = *x * f);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let zero = T::zero();
            for k in 0..p.numel() {
                let mut gk = grad.map_or(zero, |g| g.data()[k]);
                if !c.decoupled_weight_decay && c.weight_decay > 0.0 {
                    gk = gk + wd * p.data()[k];
                }
                let mk = b1 * m.data()[k] + (T::one() - b1) * gk;
                let vk = b2 * v.data()[k] + (T::one() - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let denom = vk.sqrt() / bc2_sqrt + eps;
                p.data_mut()[k] = p.data()[k] - step_size * mk / denom;
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, used by tests as a reference update rule.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    let lr = T::c(lr);
    for id in params.ids() {
        if let Some(g) = grads.param(id) {
            if !g.is_finite() {
                return Err(NumError::NonFiniteGradient(params.name(id).to_string()));
            }
            let g = g.clone();
            let p = params.get_mut(id);
            for (x, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *x = *x - lr * gv;
            }
        }
    }
    Ok(())
}
