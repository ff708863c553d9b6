use super::attention_mask::{build_attention_mask, AttentionMask};
use super::block::block_forward;
use super::config::{Layout, ModalityTag};
use super::graph::Graph;
use super::routing::route;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Image side of an input: flattened patches plus which cells are replaced
/// by the learned mask embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput<T> {
    /// `[num_patches, patch_dim]`
    pub patches: Tensor<T>,
    pub masked: Vec<bool>,
}

impl<T: Scalar> ImageInput<T> {
    pub fn unmasked(patches: Tensor<T>) -> Self {
        let n = patches.shape()[0];
        Self {
            patches,
            masked: vec![false; n],
        }
    }
}

/// A model input. Fusion inputs are ordered image-then-text.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelInput<T> {
    pub image: Option<ImageInput<T>>,
    /// Text ids, already framed by CLS and SEP.
    pub text: Option<Vec<usize>>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn image(image: ImageInput<T>) -> Self {
        Self {
            image: Some(image),
            text: None,
        }
    }

    pub fn text(ids: Vec<usize>) -> Self {
        Self {
            image: None,
            text: Some(ids),
        }
    }

    pub fn pair(image: ImageInput<T>, ids: Vec<usize>) -> Self {
        Self {
            image: Some(image),
            text: Some(ids),
        }
    }

    /// Image span length, counting the image CLS token.
    pub fn image_len(&self) -> usize {
        self.image.as_ref().map_or(0, |i| i.patches.shape()[0] + 1)
    }

    pub fn text_len(&self) -> usize {
        self.text.as_ref().map_or(0, Vec::len)
    }

    pub fn tags(&self) -> Vec<ModalityTag> {
        let mut tags = vec![ModalityTag::Vision; self.image_len()];
        tags.extend(std::iter::repeat_n(ModalityTag::Language, self.text_len()));
        tags
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[seq, hidden]` after the final norm.
    pub hidden: Var,
    /// `[1, hidden]`: tanh-activated projection of the first token.
    pub pooled: Var,
}

/// Token plus positional embeddings, `[seq, hidden]`.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, input: &ModelInput<T>) -> Result<Var> {
    let config = g.model().config.clone();
    let mut parts = Vec::new();
    if let Some(image) = &input.image {
        let shape = image.patches.shape();
        if shape != [config.num_patches(), config.patch_dim()] || image.masked.len() != shape[0] {
            return Err(Error::Shape {
                op: "embed",
                lhs: shape.to_vec(),
                rhs: vec![config.num_patches(), config.patch_dim()],
            });
        }
        let n = shape[0];
        let patches = g.constant(image.patches.clone())?;
        let w = g.param("embed.patch.w")?;
        let b = g.param("embed.patch.b")?;
        let mut tokens = g.tape.linear(patches, w, b)?;
        if image.masked.iter().any(|&m| m) {
            let mask_tok = g.param("embed.image_mask")?;
            let with_mask = g.tape.concat(&[tokens, mask_tok], 0)?;
            let ids = image
                .masked
                .iter()
                .enumerate()
                .map(|(i, &m)| if m { n } else { i })
                .collect();
            tokens = g.tape.gather_rows(with_mask, ids)?;
        }
        let cls = g.param("embed.image_cls")?;
        let seq = g.tape.concat(&[cls, tokens], 0)?;
        let pos = g.param("embed.image_pos")?;
        parts.push(g.tape.add(seq, pos)?);
    }
    if let Some(ids) = &input.text {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("text sequence must contain CLS and SEP".into()));
        }
        if ids.len() > config.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: config.max_seq,
            });
        }
        let table = g.param("embed.text")?;
        let tok = g.tape.gather_rows(table, ids.clone())?;
        let pos_table = g.param("embed.text_pos")?;
        let pos = if ids.len() == config.max_seq {
            pos_table
        } else {
            g.tape.slice(pos_table, 0, 0, ids.len())?
        };
        parts.push(g.tape.add(tok, pos)?);
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("input has neither image nor text".into()));
    }
    g.tape.concat(&parts, 0)
}

fn check_layout<T: Scalar>(input: &ModelInput<T>, layout: Layout) -> Result<()> {
    let (img, txt) = (input.image.is_some(), input.text.is_some());
    let ok = match layout {
        Layout::VisionEncoder => img && !txt,
        Layout::LanguageEncoder => txt && !img,
        Layout::Dual => img != txt,
        Layout::Fusion => img || txt,
        Layout::Seq2Seq => img && txt,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{layout:?} layout does not accept input with image={img} text={txt}"
        )))
    }
}

/// Runs all blocks, the final norm and the pooler over already embedded tokens.
pub fn encode_embedded<T: Scalar>(
    g: &mut Graph<'_, T>,
    embedded: Var,
    tags: &[ModalityTag],
    layout: Layout,
    mask: Option<&AttentionMask>,
) -> Result<Encoded> {
    let config = g.model().config.clone();
    let mut h = embedded;
    for layer in 1..=config.num_layers {
        let routing = route(tags, layer, layout, &config)?;
        h = block_forward(g, layer, h, mask, &routing)?;
    }
    let gain = g.param("final_norm.g")?;
    let bias = g.param("final_norm.b")?;
    let hidden = g.tape.layer_norm(h, gain, bias)?;
    let cls = g.tape.slice(hidden, 0, 0, 1)?;
    let w = g.param("pooler.w")?;
    let b = g.param("pooler.b")?;
    let pooled = g.tape.linear(cls, w, b)?;
    let pooled = g.tape.tanh(pooled)?;
    Ok(Encoded { hidden, pooled })
}

/// Attention mask implied by a layout for the given input.
pub fn layout_mask<T: Scalar>(input: &ModelInput<T>, layout: Layout) -> Option<AttentionMask> {
    (layout == Layout::Seq2Seq)
        .then(|| build_attention_mask(layout, input.image_len(), input.text_len()))
}

pub fn encode<T: Scalar>(g: &mut Graph<'_, T>, input: &ModelInput<T>, layout: Layout) -> Result<Encoded> {
    check_layout(input, layout)?;
    let embedded = embed(g, input)?;
    let mask = layout_mask(input, layout);
    encode_embedded(g, embedded, &input.tags(), layout, mask.as_ref())
}
