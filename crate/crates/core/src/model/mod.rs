//! Multiway Transformer: shared self-attention with per-modality expert FFNs.

mod accounting;
mod attention_mask;
mod block;
mod config;
mod encode;
mod graph;
mod params;
mod routing;

pub use accounting::{abbreviate, count_params, with_commas, ParamBreakdown};
pub use attention_mask::{build_attention_mask, AttentionMask};
pub use block::{block_forward, shared_attention};
pub use config::{Expert, Layout, ModalityTag, MultiwayConfig};
pub use encode::{embed, encode, encode_embedded, layout_mask, Encoded, ImageInput, ModelInput};
pub use graph::{accumulate, GradMap, Graph};
pub use params::{attn_param, expert_param, init_params, param_depth, ParamStore, INIT_RANGE, INIT_TEMPERATURE};
pub use routing::{check_routing, route};

use crate::error::Result;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiwayModel<T> {
    pub config: MultiwayConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> MultiwayModel<T> {
    pub fn new(config: &MultiwayConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            params: init_params(config, seed)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

/// Builds a freshly initialized model.
pub fn init_model<T: Scalar>(config: &MultiwayConfig, seed: u64) -> Result<MultiwayModel<T>> {
    MultiwayModel::new(config, seed)
}
