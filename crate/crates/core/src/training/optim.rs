use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradMap, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.05,
        }
    }
}

/// Moments of every parameter that has received a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamW,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &BTreeMap<String, Tensor<T>>, b: &BTreeMap<String, Tensor<T>>| {
            a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
        };
        self.hyper == other.hyper && self.step == other.step && same(&self.m, &other.m) && same(&self.v, &other.v)
    }
}

/// Per-parameter learning-rate multiplier and weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroup {
    pub lr_scale: f64,
    pub weight_decay: f64,
}

/// One AdamW step applying the state's weight decay to every parameter.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let wd = state.hyper.weight_decay;
    adamw_step_grouped(params, grads, state, lr, |_, _| ParamGroup {
        lr_scale: 1.0,
        weight_decay: wd,
    })
}

/// Bias-corrected AdamW with decoupled decay `θ ← θ - lr·wd·θ`. Parameters
/// without a gradient are left alone. Nothing is modified unless every
/// gradient is finite and matches its parameter's shape.
pub fn adamw_step_grouped<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    group: impl Fn(&str, &Tensor<T>) -> ParamGroup,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adamw" });
        }
    }
    state.step += 1;
    let AdamW { beta1, beta2, eps, .. } = state.hyper;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let ParamGroup { lr_scale, weight_decay } = group(name, p);
        let lr_p = lr * lr_scale;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = T::lit(1.0 - lr_p * weight_decay);
        let (step_size, eps_t) = (T::lit(lr_p / c1), T::lit(eps));
        let rc2 = T::lit(1.0 / c2);
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            *pi = *pi * decay - step_size * *mi / ((*vi * rc2).sqrt() + eps_t);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub floor_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.floor_lr >= 0.0 && self.peak_lr >= self.floor_lr) {
            return Err(Error::Config(format!(
                "need 0 <= floor_lr <= peak_lr, got {} and {}",
                self.floor_lr, self.peak_lr
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, cosine decay to the floor at
/// `total_steps`, then constant.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return s.floor_lr;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.floor_lr + (s.peak_lr - s.floor_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// `base_lr * decay^(num_layers - layer)`, where layer 0 is the embeddings.
pub fn layerwise_lr(base_lr: f64, decay: f64, layer: usize, num_layers: usize) -> f64 {
    base_lr * decay.powi((num_layers.saturating_sub(layer)) as i32)
}

/// Global l2 norm over all gradients, accumulated in name order.
pub fn grad_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut GradMap<T>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}
