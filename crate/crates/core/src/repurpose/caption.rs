use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdm::{mask_count, CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use crate::model::{
    build_attention_mask, embed, encode_embedded, Graph, ImageInput, Layout, ModalityTag, ModelInput, MultiwayModel,
};
use crate::tensor::{Scalar, Tensor, Var};

/// How caption positions are chosen for masking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionMasking {
    /// Each maskable position independently with the mask probability.
    #[default]
    Iid,
    /// Exactly `round(p * n)` positions.
    Fraction,
}

/// Positions of a framed caption (`CLS w1 .. wn SEP`) to mask. Words and SEP
/// are maskable, CLS is not; at least one position is always chosen.
pub fn plan_caption_mask(caption_len: usize, mask_prob: f64, mode: CaptionMasking, seed: u64) -> Result<Vec<usize>> {
    if caption_len < 3 {
        return Err(Error::InvalidArgument("caption is empty".into()));
    }
    if !(mask_prob > 0.0 && mask_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!("mask_prob {mask_prob} outside (0, 1]")));
    }
    let maskable = caption_len - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = match mode {
        CaptionMasking::Iid => (1..caption_len).filter(|_| rng.gen::<f64>() < mask_prob).collect(),
        CaptionMasking::Fraction => rand::seq::index::sample(&mut rng, maskable, mask_count(maskable, mask_prob))
            .into_iter()
            .map(|p| p + 1)
            .collect(),
    };
    if positions.is_empty() {
        positions.push(rng.gen_range(1..caption_len));
    }
    positions.sort_unstable();
    Ok(positions)
}

/// Label-smoothed cross-entropy at masked caption rows, given the embedded
/// `image ++ caption` sequence. Attention follows the seq2seq mask.
pub fn caption_loss_embedded<T: Scalar>(
    g: &mut Graph<'_, T>,
    embedded: Var,
    image_len: usize,
    caption: &[usize],
    positions: &[usize],
    smoothing: f64,
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("no caption positions masked".into()));
    }
    let mask = build_attention_mask(Layout::Seq2Seq, image_len, caption.len());
    let mut tags = vec![ModalityTag::Vision; image_len];
    tags.extend(std::iter::repeat_n(ModalityTag::Language, caption.len()));
    let enc = encode_embedded(g, embedded, &tags, Layout::Seq2Seq, Some(&mask))?;
    let rows = g.tape.gather_rows(enc.hidden, positions.iter().map(|p| p + image_len).collect())?;
    let w = g.param("head.mlm.w")?;
    let b = g.param("head.mlm.b")?;
    let logits = g.tape.linear(rows, w, b)?;
    let targets = positions.iter().map(|&p| caption[p]).collect();
    let ce = g.tape.cross_entropy(logits, targets, T::lit(smoothing))?;
    g.tape.mean(ce)
}

/// Masked-caption loss for one (image, caption) pair at explicit positions.
pub fn caption_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    patches: &Tensor<T>,
    caption: &[usize],
    positions: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let mut corrupted = caption.to_vec();
    for &p in positions {
        if p == 0 || p >= caption.len() {
            return Err(Error::InvalidArgument(format!(
                "caption position {p} outside 1..{}",
                caption.len()
            )));
        }
        corrupted[p] = MASK_ID;
    }
    let input = ModelInput::pair(ImageInput::unmasked(patches.clone()), corrupted);
    let embedded = embed(g, &input)?;
    caption_loss_embedded(g, embedded, input.image_len(), caption, positions, smoothing)
}

/// A generated caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Generated ids after CLS; ends with SEP when `terminated`.
    pub tokens: Vec<usize>,
    pub terminated: bool,
    /// Cumulative log-probability divided by the token count.
    pub score: f64,
}

fn excluded(id: usize) -> bool {
    id == MASK_ID || id == CLS_ID || id == PAD_ID
}

/// Log-probabilities for the token after `prefix` (which starts with CLS):
/// the prefix is extended by a mask token, which the model predicts under the
/// seq2seq mask. Mask, CLS and PAD are never proposed.
pub fn next_token_logprobs<T: Scalar>(model: &MultiwayModel<T>, patches: &Tensor<T>, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut ids = prefix.to_vec();
    ids.push(MASK_ID);
    let input = ModelInput::pair(ImageInput::unmasked(patches.clone()), ids);
    let mut g = Graph::eval(model);
    let embedded = embed(&mut g, &input)?;
    let image_len = input.image_len();
    let mask = build_attention_mask(Layout::Seq2Seq, image_len, input.text_len());
    let enc = encode_embedded(&mut g, embedded, &input.tags(), Layout::Seq2Seq, Some(&mask))?;
    let row = g.tape.slice(enc.hidden, 0, image_len + prefix.len(), image_len + prefix.len() + 1)?;
    let w = g.param("head.mlm.w")?;
    let b = g.param("head.mlm.b")?;
    let logits = g.tape.linear(row, w, b)?;
    let z: Vec<f64> = g.value(logits).data().iter().map(|x| x.as_f64()).collect();
    let max = z
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + z.iter()
            .enumerate()
            .filter(|(i, _)| !excluded(*i))
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    Ok(z.iter()
        .enumerate()
        .map(|(i, &v)| if excluded(i) { f64::NEG_INFINITY } else { v - lse })
        .collect())
}

fn check_len<T: Scalar>(model: &MultiwayModel<T>, max_len: usize) -> Result<()> {
    if max_len == 0 || max_len + 1 > model.config.max_seq - 1 {
        return Err(Error::InvalidArgument(format!(
            "max_len {max_len} must be in 1..={}",
            model.config.max_seq.saturating_sub(2)
        )));
    }
    Ok(())
}

/// Most likely next token at every step (lowest id on ties) until SEP or
/// `max_len` tokens.
pub fn greedy_decode<T: Scalar>(model: &MultiwayModel<T>, patches: &Tensor<T>, max_len: usize) -> Result<Generated> {
    check_len(model, max_len)?;
    let mut prefix = vec![CLS_ID];
    let mut total = 0.0;
    for _ in 0..max_len {
        let lp = next_token_logprobs(model, patches, &prefix)?;
        let best = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        total += best.1;
        prefix.push(best.0);
        if best.0 == SEP_ID {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    Ok(Generated {
        terminated: tokens.last() == Some(&SEP_ID),
        score: total / tokens.len() as f64,
        tokens,
    })
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    logprob: f64,
}

impl Beam {
    fn normalized(&self) -> f64 {
        self.logprob / self.tokens.len() as f64
    }
}

/// Beam search over fill-the-mask steps. Each step expands every live beam,
/// keeps the `beam_size` best continuations by cumulative log-probability
/// (ties: earlier beam, then lower token id) and retires those ending in SEP.
/// Search stops once `beam_size` beams have terminated or after `max_len`
/// tokens. The best terminated beam by length-normalized score wins; without
/// one, the best live beam is returned unterminated.
pub fn caption_generate<T: Scalar>(
    model: &MultiwayModel<T>,
    patches: &Tensor<T>,
    beam_size: usize,
    max_len: usize,
) -> Result<Generated> {
    if beam_size == 0 {
        return Err(Error::InvalidArgument("beam_size must be at least 1".into()));
    }
    check_len(model, max_len)?;
    let mut live = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut done: Vec<Beam> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            let mut prefix = vec![CLS_ID];
            prefix.extend(&beam.tokens);
            let lp = next_token_logprobs(model, patches, &prefix)?;
            let mut ranked: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
            ranked.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            candidates.extend(ranked.into_iter().take(beam_size).map(|t| (beam.logprob + lp[t], bi, t)));
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        for (score, bi, t) in candidates.into_iter().take(beam_size) {
            let mut tokens = live[bi].tokens.clone();
            tokens.push(t);
            let beam = Beam { tokens, logprob: score };
            if t == SEP_ID {
                done.push(beam);
            } else {
                next.push(beam);
            }
        }
        live = next;
        if done.len() >= beam_size || live.is_empty() {
            break;
        }
    }
    let pick = |beams: &[Beam]| {
        beams
            .iter()
            .fold(None::<&Beam>, |best, b| match best {
                Some(x) if x.normalized() >= b.normalized() => Some(x),
                _ => Some(b),
            })
            .cloned()
    };
    let (beam, terminated) = match pick(&done) {
        Some(b) => (b, true),
        None => (pick(&live).expect("live beams remain when none terminated"), false),
    };
    Ok(Generated {
        score: beam.normalized(),
        tokens: beam.tokens,
        terminated,
    })
}
