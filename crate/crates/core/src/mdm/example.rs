//! Turns raw samples into masked model inputs with reconstruction targets.

use serde::{Deserialize, Serialize};

use super::masking::{apply_mask, plan_block_mask, plan_text_mask, SequenceKind, TokenSequence, IMAGE_MASK};
use crate::error::{Error, Result};
use crate::model::{ImageInput, ModelInput};
use crate::seed::mix_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Fraction of monomodal text tokens masked.
    pub text_ratio: f64,
    /// Fraction of text tokens masked in image-text pairs.
    pub pair_text_ratio: f64,
    /// Fraction of image patches masked, block-wise.
    pub image_ratio: f64,
    /// Also mask the image half of image-text pairs.
    pub mask_pair_images: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_ratio: 0.15,
            pair_text_ratio: 0.5,
            image_ratio: 0.4,
            mask_pair_images: true,
        }
    }
}

/// Sequence rows to predict and the ids they must recover.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Targets {
    pub rows: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample<T> {
    pub kind: SequenceKind,
    pub input: ModelInput<T>,
    /// Text rows, indexed in the full (image-then-text) sequence.
    pub text: Targets,
    /// Image rows, indexed in the full sequence (row 0 is the image CLS).
    pub image: Targets,
}

/// Masks one sample. `image` is the patch tensor with its visual token ids;
/// `text` is framed by CLS and SEP. Plan seeds are derived from `seed`.
pub fn mask_example<T: Scalar>(
    image: Option<(&Tensor<T>, &[usize])>,
    text: Option<&[usize]>,
    grid: (usize, usize),
    config: &MaskingConfig,
    seed: u64,
) -> Result<MaskedExample<T>> {
    let kind = match (image.is_some(), text.is_some()) {
        (false, true) => SequenceKind::MonoText,
        (true, false) => SequenceKind::MonoImage,
        (true, true) => SequenceKind::Pair,
        (false, false) => return Err(Error::InvalidArgument("sample has neither image nor text".into())),
    };
    let mut out = MaskedExample {
        kind,
        input: ModelInput::default(),
        text: Targets::default(),
        image: Targets::default(),
    };
    let mut offset = 0;
    if let Some((patches, visual_ids)) = image {
        if patches.shape()[0] != visual_ids.len() || visual_ids.len() != grid.0 * grid.1 {
            return Err(Error::InvalidArgument(format!(
                "{} patches and {} visual ids for a {}x{} grid",
                patches.shape()[0],
                visual_ids.len(),
                grid.0,
                grid.1
            )));
        }
        let seq = TokenSequence::image(visual_ids);
        let mut masked = vec![false; visual_ids.len()];
        if kind == SequenceKind::MonoImage || config.mask_pair_images {
            let plan = plan_block_mask(grid.0, grid.1, config.image_ratio, mix_seed(seed, "image"))?.plan;
            let m = apply_mask(&seq, &plan)?;
            for (&p, &t) in m.positions.iter().zip(&m.targets) {
                debug_assert_eq!(m.corrupted.ids[p], IMAGE_MASK);
                masked[p - 1] = true;
                out.image.rows.push(p);
                out.image.ids.push(t);
            }
        }
        offset = seq.len();
        out.input.image = Some(ImageInput {
            patches: patches.clone(),
            masked,
        });
    }
    if let Some(ids) = text {
        if ids.len() < 2 {
            return Err(Error::InvalidArgument("text must be framed by CLS and SEP".into()));
        }
        let ratio = if kind == SequenceKind::Pair {
            config.pair_text_ratio
        } else {
            config.text_ratio
        };
        let seq = TokenSequence::text(ids.to_vec());
        let plan = plan_text_mask(ids.len() - 2, ratio, mix_seed(seed, "text"))?;
        let m = apply_mask(&seq, &plan)?;
        out.text.rows = m.positions.iter().map(|p| p + offset).collect();
        out.text.ids = m.targets;
        out.input.text = Some(m.corrupted.ids);
    }
    Ok(out)
}
