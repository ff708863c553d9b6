use serde::{Deserialize, Serialize};

use super::optim::{adamw_step_grouped, clip_gradients, layerwise_lr, lr_at, AdamW, OptimizerState, ParamGroup, Schedule};
use crate::error::{Error, Result};
use crate::model::{param_depth, GradMap, MultiwayModel};
use crate::tensor::Scalar;

/// Everything that turns a gradient into a parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateConfig {
    pub schedule: Schedule,
    #[serde(default)]
    pub adamw: AdamW,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Layer-wise learning-rate decay; 1 disables it.
    #[serde(default = "one")]
    pub layer_decay: f64,
}

fn default_clip() -> f64 {
    3.0
}

fn one() -> f64 {
    1.0
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer_decay {} outside (0, 1]", self.layer_decay)));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

/// Learning rate and pre-clip gradient norm of an applied update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    pub lr: f64,
    pub grad_norm: f64,
}

/// Clips, then takes one AdamW step at `lr_at(t)` where `t` is the step being
/// taken (1-based). Vectors (biases, norm gains, the logit scale) are not
/// decayed; each parameter's rate is scaled by its layer depth.
pub fn apply_update<T: Scalar>(
    model: &mut MultiwayModel<T>,
    state: &mut OptimizerState<T>,
    mut grads: GradMap<T>,
    update: &UpdateConfig,
) -> Result<Update> {
    let step = state.step + 1;
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step, what: "gradient" });
    }
    let grad_norm = clip_gradients(&mut grads, update.clip_norm)?;
    let lr = lr_at(step, &update.schedule);
    let num_layers = model.config.num_layers;
    let (decay, wd) = (update.layer_decay, state.hyper.weight_decay);
    adamw_step_grouped(&mut model.params, &grads, state, lr, |name, p| ParamGroup {
        lr_scale: layerwise_lr(1.0, decay, param_depth(name, num_layers), num_layers),
        weight_decay: if p.rank() <= 1 { 0.0 } else { wd },
    })?;
    Ok(Update { lr, grad_norm })
}

/// Maps a non-finite forward value to a divergence at `step`.
pub(crate) fn diverged_on_nonfinite(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, what: "activation" },
        other => other,
    }
}
