//! Parameter updates.
//!
//! SGD with momentum is the default. AdamW is available for runs where
//! plain momentum converges too slowly for the step budget.

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        momentum: f32,
        /// Decoupled: applied as `w -= lr * weight_decay * w`.
        #[serde(default)]
        weight_decay: f32,
    },
    AdamW {
        beta1: f32,
        beta2: f32,
        eps: f32,
        #[serde(default)]
        weight_decay: f32,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn plain_sgd() -> Self {
        OptimizerConfig::Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adamw() -> Self {
        OptimizerConfig::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            OptimizerConfig::Sgd { momentum, weight_decay } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(format!("momentum must be in [0, 1), got {momentum}"));
                }
                if weight_decay < 0.0 || !weight_decay.is_finite() {
                    return Err(format!("weight_decay must be >= 0, got {weight_decay}"));
                }
            }
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(format!("betas must be in [0, 1), got ({beta1}, {beta2})"));
                }
                if eps <= 0.0 || weight_decay < 0.0 {
                    return Err("eps must be > 0 and weight_decay >= 0".into());
                }
            }
        }
        Ok(())
    }
}

/// Applies one update to every trainable parameter and resets all gradients.
///
/// Frozen parameters are skipped entirely and stay bit-identical.
pub fn optimizer_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f32,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidLearningRate(lr));
    }
    for p in params {
        if p.trainable() {
            update(p, lr, cfg);
        }
        p.zero_grad();
    }
    Ok(())
}

fn update(p: &mut Parameter, lr: f32, cfg: &OptimizerConfig) {
    let grad = p.grad().clone();
    let g = grad.data();
    let n = g.len();
    p.state.step += 1;
    let step = p.state.step;
    match *cfg {
        OptimizerConfig::Sgd { momentum, weight_decay } => {
            if momentum > 0.0 {
                if p.state.slots.is_empty() {
                    p.state.slots.push(g.to_vec());
                } else {
                    for (v, &g) in p.state.slots[0].iter_mut().zip(g) {
                        *v = momentum * *v + g;
                    }
                }
                let v = p.state.slots[0].clone();
                apply(p.value_mut(), &v, lr, weight_decay);
            } else {
                apply(p.value_mut(), g, lr, weight_decay);
            }
        }
        OptimizerConfig::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            if p.state.slots.is_empty() {
                p.state.slots = vec![vec![0.0; n], vec![0.0; n]];
            }
            let bc1 = 1.0 - (beta1 as f64).powi(step as i32);
            let bc2 = 1.0 - (beta2 as f64).powi(step as i32);
            let mut dir = vec![0.0f32; n];
            {
                let (m, v) = p.state.slots.split_at_mut(1);
                for i in 0..n {
                    m[0][i] = beta1 * m[0][i] + (1.0 - beta1) * g[i];
                    v[0][i] = beta2 * v[0][i] + (1.0 - beta2) * g[i] * g[i];
                    let mh = m[0][i] as f64 / bc1;
                    let vh = v[0][i] as f64 / bc2;
                    dir[i] = (mh / (vh.sqrt() + eps as f64)) as f32;
                }
            }
            apply(p.value_mut(), &dir, lr, weight_decay);
        }
    }
}

fn apply(w: &mut [f32], dir: &[f32], lr: f32, weight_decay: f32) {
    for (w, &d) in w.iter_mut().zip(dir) {
        if weight_decay > 0.0 {
            *w -= lr * weight_decay * *w;
        }
        *w -= lr * d;
    }
}
