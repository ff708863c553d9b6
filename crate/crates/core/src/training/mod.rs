//! Losses, AdamW, schedules and the masked-data-modeling pretraining loop.

mod losses;
mod optim;
mod pretrain;
mod step;

pub use losses::{contrastive_loss, label_smoothed_ce, mdm_loss, mdm_losses, Scale};
pub use optim::{
    adamw_step, adamw_step_grouped, clip_gradients, grad_norm, layerwise_lr, lr_at, AdamW, OptimizerState,
    ParamGroup, Schedule,
};
pub use pretrain::{
    argmax_rows, masked_recovery, mdm_forward, pretrain_batch, pretrain_batch_grads, pretrain_layout, pretrain_loop,
    MdmOutputs, PatchImage, PretrainConfig, PretrainData, Recovery, StepMetrics,
};
pub use step::{apply_update, Update, UpdateConfig};
pub(crate) use step::diverged_on_nonfinite;
