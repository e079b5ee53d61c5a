//! Adam and SGD-with-momentum updates over a [`ParameterStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
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
fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerConfig::Sgd { momentum } => (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers, one per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState<T: Scalar = f32> {
    Adam {
        /// Steps taken so far.
        t: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    },
    Sgd {
        velocity: Vec<Tensor<T>>,
    },
}

fn zeros_like<T: Scalar>(store: &ParameterStore<T>) -> Vec<Tensor<T>> {
    store.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(cfg: &OptimizerConfig, store: &ParameterStore<T>) -> Self {
        match cfg {
            OptimizerConfig::Adam { .. } => OptimizerState::Adam {
                t: 0,
                m: zeros_like(store),
                v: zeros_like(store),
            },
            OptimizerConfig::Sgd { .. } => OptimizerState::Sgd {
                velocity: zeros_like(store),
            },
        }
    }

    /// Applies one update with the gradients currently held by `store`.
    pub fn step(&mut self, cfg: &OptimizerConfig, store: &mut ParameterStore<T>, lr: f64) -> Result<()> {
        match (cfg, self) {
            (&OptimizerConfig::Adam { beta1, beta2, eps }, OptimizerState::Adam { t, m, v }) => {
                *t += 1;
                adam_step(store, m, v, lr, beta1, beta2, eps, *t)
            }
            (&OptimizerConfig::Sgd { momentum }, OptimizerState::Sgd { velocity }) => {
                sgd_step(store, velocity, lr, momentum)
            }
            _ => Err(Error::Config("optimizer state does not match optimizer config".into())),
        }
    }

    /// Named buffers for checkpointing.
    pub fn records(&self, store: &ParameterStore<T>) -> Vec<(String, Tensor<T>)> {
        let names: Vec<&str> = store.names().collect();
        let tagged = |prefix: &str, bufs: &[Tensor<T>]| -> Vec<(String, Tensor<T>)> {
            names
                .iter()
                .zip(bufs)
                .map(|(n, b)| (format!("{prefix}.{n}"), b.clone()))
                .collect()
        };
        match self {
            OptimizerState::Adam { m, v, .. } => {
                let mut out = tagged("adam.m", m);
                out.extend(tagged("adam.v", v));
                out
            }
            OptimizerState::Sgd { velocity } => tagged("sgd.velocity", velocity),
        }
    }
}

fn check_grads<T: Scalar>(store: &ParameterStore<T>) -> Result<()> {
    for p in store.iter() {
        p.grad.check_finite(&format!("gradient of {}", p.name))?;
    }
    Ok(())
}

/// Bias-corrected Adam update at step `t ≥ 1`, in store order.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    m: &mut [Tensor<T>],
    v: &mut [Tensor<T>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step count must be ≥ 1".into()));
    }
    if m.len() != store.len() || v.len() != store.len() {
        return Err(Error::InvalidArgument("moment buffers do not match the parameter store".into()));
    }
    check_grads(store)?;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for ((p, m), v) in store.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
        let value = p.value.data_mut();
        for (i, &g) in p.grad.data().iter().enumerate() {
            let g = g.as_f64();
            let mi = beta1 * m.data()[i].as_f64() + (1.0 - beta1) * g;
            let vi = beta2 * v.data()[i].as_f64() + (1.0 - beta2) * g * g;
            m.data_mut()[i] = T::lit(mi);
            v.data_mut()[i] = T::lit(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            value[i] = value[i] - T::lit(update);
        }
    }
    Ok(())
}

/// `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(store: &mut ParameterStore<T>, velocity: &mut [Tensor<T>], lr: f64, momentum: f64) -> Result<()> {
    if velocity.len() != store.len() {
        return Err(Error::InvalidArgument("velocity buffers do not match the parameter store".into()));
    }
    check_grads(store)?;
    for (p, vel) in store.iter_mut().zip(velocity.iter_mut()) {
        let value = p.value.data_mut();
        for (i, &g) in p.grad.data().iter().enumerate() {
            let vi = momentum * vel.data()[i].as_f64() + g.as_f64();
            vel.data_mut()[i] = T::lit(vi);
            value[i] = value[i] - T::lit(lr * vi);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParameterStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::lit(max_norm / norm);
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}
