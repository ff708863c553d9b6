use super::config::{Expert, Layout, ModalityTag, MultiwayConfig};
use crate::error::{Error, Result};

/// Expert per token at 1-based `layer`. Fusion-style layouts send every
/// token to the vision-language expert in the top layers; otherwise each
/// token goes to the expert of its own modality.
pub fn route(
    tags: &[ModalityTag],
    layer: usize,
    layout: Layout,
    config: &MultiwayConfig,
) -> Result<Vec<Expert>> {
    if layer == 0 || layer > config.num_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside 1..={}",
            config.num_layers
        )));
    }
    if layout.uses_vl_experts() && config.has_vl_expert(layer) {
        return Ok(vec![Expert::VisionLanguage; tags.len()]);
    }
    Ok(tags
        .iter()
        .map(|t| match t {
            ModalityTag::Vision => Expert::Vision,
            ModalityTag::Language => Expert::Language,
        })
        .collect())
}

/// Rejects routings that name an expert the layer does not own.
pub fn check_routing(routing: &[Expert], layer: usize, config: &MultiwayConfig) -> Result<()> {
    if routing.contains(&Expert::VisionLanguage) && !config.has_vl_expert(layer) {
        return Err(Error::MissingExpert { layer });
    }
    Ok(())
}
