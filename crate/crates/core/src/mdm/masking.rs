//! Mask planning for masked data modeling.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdm::tokenizer::MASK_ID;
use crate::model::ModalityTag;

/// Placeholder id at the image CLS position of an image token sequence.
pub const IMAGE_CLS: usize = usize::MAX - 1;
/// Marker for an image position whose input is the learned mask embedding.
pub const IMAGE_MASK: usize = usize::MAX;

/// Smallest block, in patches, sampled by block-wise masking.
pub const MIN_BLOCK_AREA: usize = 16;
pub const MIN_ASPECT: f64 = 0.3;
const BLOCK_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    MonoText,
    MonoImage,
    Pair,
}

/// Token ids with one modality tag each. Image tokens (led by the image CLS
/// position) come before text tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub tags: Vec<ModalityTag>,
    pub kind: SequenceKind,
}

impl TokenSequence {
    /// Framed text ids (`CLS ... SEP`).
    pub fn text(ids: Vec<usize>) -> Self {
        let tags = vec![ModalityTag::Language; ids.len()];
        Self {
            ids,
            tags,
            kind: SequenceKind::MonoText,
        }
    }

    /// Visual token ids of the patches; the image CLS slot is prepended.
    pub fn image(visual_ids: &[usize]) -> Self {
        let mut ids = vec![IMAGE_CLS];
        ids.extend_from_slice(visual_ids);
        let tags = vec![ModalityTag::Vision; ids.len()];
        Self {
            ids,
            tags,
            kind: SequenceKind::MonoImage,
        }
    }

    pub fn pair(visual_ids: &[usize], text_ids: Vec<usize>) -> Self {
        let mut seq = Self::image(visual_ids);
        seq.tags.extend(std::iter::repeat_n(ModalityTag::Language, text_ids.len()));
        seq.ids.extend(text_ids);
        seq.kind = SequenceKind::Pair;
        seq
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.tags.iter().take_while(|t| **t == ModalityTag::Vision).count()
    }
}

/// Positions to corrupt and the id written there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted, distinct sequence positions.
    pub positions: Vec<usize>,
    pub mask_token_id: usize,
}

impl MaskPlan {
    pub fn empty(mask_token_id: usize) -> Self {
        Self {
            positions: Vec::new(),
            mask_token_id,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Shifts every position by `offset` (e.g. past the image span of a pair).
    pub fn offset(mut self, offset: usize) -> Self {
        self.positions.iter_mut().for_each(|p| *p += offset);
        self
    }
}

/// Axis-aligned block of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

/// A block-wise image mask and the rectangles whose union produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub plan: MaskPlan,
    pub rects: Vec<Rect>,
    pub target: usize,
    pub max_overshoot: usize,
}

/// `round(len * ratio)` with halves rounded up, never below 1.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    ((len as f64 * ratio + 0.5).floor() as usize).clamp(1, len)
}

/// Masks `mask_count(len, ratio)` of the `len` non-special text positions,
/// which sit at `1..=len` (CLS at 0, SEP at `len + 1`).
pub fn plan_text_mask(len: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if len == 0 {
        return Err(Error::InvalidArgument("no maskable text positions".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = sample(&mut rng, len, mask_count(len, ratio))
        .into_iter()
        .map(|p| p + 1)
        .collect();
    positions.sort_unstable();
    Ok(MaskPlan {
        positions,
        mask_token_id: MASK_ID,
    })
}

fn aspect_ok(h: usize, w: usize) -> bool {
    let r = h as f64 / w as f64;
    (MIN_ASPECT..=1.0 / MIN_ASPECT).contains(&r)
}

/// Block-wise masking. Rectangles with area at least `min(16, cells)` and
/// aspect ratio in `[0.3, 1/0.3]` are unioned until at least
/// `floor(ratio * cells)` cells are covered. Plan positions are offset by one
/// so they index an image sequence whose CLS sits at position 0.
pub fn plan_block_mask(rows: usize, cols: usize, ratio: f64, seed: u64) -> Result<BlockMask> {
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidArgument(format!("grid {rows}x{cols} is smaller than 2x2")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let cells = rows * cols;
    let min_area = MIN_BLOCK_AREA.min(cells);
    let shapes: Vec<(usize, usize)> = (1..=rows)
        .flat_map(|h| (1..=cols).map(move |w| (h, w)))
        .filter(|&(h, w)| h * w >= min_area && aspect_ok(h, w))
        .collect();
    let smallest = shapes
        .iter()
        .map(|(h, w)| h * w)
        .min()
        .ok_or_else(|| Error::InvalidArgument(format!("no admissible block fits a {rows}x{cols} grid")))?;
    let target = ((ratio * cells as f64).floor() as usize).max(1);
    let max_overshoot = smallest - 1;
    if target + max_overshoot >= cells {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} on a {rows}x{cols} grid could mask every patch"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; cells];
    let mut count = 0;
    let mut rects = Vec::new();
    let log_lo = MIN_ASPECT.ln();
    while count < target {
        let max_area = (target - count).max(smallest);
        let mut chosen = None;
        for _ in 0..BLOCK_ATTEMPTS {
            let area = rng.gen_range(min_area as f64..=max_area as f64);
            let aspect = rng.gen_range(log_lo..=-log_lo).exp();
            let h = (area * aspect).sqrt().round() as usize;
            let w = (area / aspect).sqrt().round() as usize;
            if h == 0 || w == 0 || h > rows || w > cols || h * w < min_area || h * w > max_area || !aspect_ok(h, w) {
                continue;
            }
            let top = rng.gen_range(0..=rows - h);
            let left = rng.gen_range(0..=cols - w);
            let rect = Rect { top, left, height: h, width: w };
            if new_cells(&masked, cols, &rect) > 0 {
                chosen = Some(rect);
                break;
            }
        }
        let rect = chosen.unwrap_or_else(|| fallback_rect(&masked, rows, cols, &shapes, smallest));
        for r in rect.top..rect.top + rect.height {
            for c in rect.left..rect.left + rect.width {
                if !masked[r * cols + c] {
                    masked[r * cols + c] = true;
                    count += 1;
                }
            }
        }
        rects.push(rect);
    }
    let positions = masked
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(BlockMask {
        plan: MaskPlan {
            positions,
            mask_token_id: IMAGE_MASK,
        },
        rects,
        target,
        max_overshoot,
    })
}

fn new_cells(masked: &[bool], cols: usize, rect: &Rect) -> usize {
    (rect.top..rect.top + rect.height)
        .flat_map(|r| (rect.left..rect.left + rect.width).map(move |c| r * cols + c))
        .filter(|&i| !masked[i])
        .count()
}

/// Smallest admissible block placed over the first unmasked cell.
fn fallback_rect(masked: &[bool], rows: usize, cols: usize, shapes: &[(usize, usize)], smallest: usize) -> Rect {
    let (h, w) = *shapes
        .iter()
        .find(|(h, w)| h * w == smallest)
        .expect("smallest area comes from shapes");
    let first = masked.iter().position(|&m| !m).unwrap_or(0);
    let (r, c) = (first / cols, first % cols);
    Rect {
        top: r.min(rows - h),
        left: c.min(cols - w),
        height: h,
        width: w,
    }
}

/// A corrupted sequence with the original ids at the masked positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub corrupted: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskedSequence {
    /// Writes the targets back, recovering the original sequence.
    pub fn restore(&self) -> TokenSequence {
        let mut seq = self.corrupted.clone();
        for (&p, &t) in self.positions.iter().zip(&self.targets) {
            seq.ids[p] = t;
        }
        seq
    }
}

pub fn apply_mask(sequence: &TokenSequence, plan: &MaskPlan) -> Result<MaskedSequence> {
    let mut corrupted = sequence.clone();
    let mut targets = Vec::with_capacity(plan.len());
    for &p in &plan.positions {
        if p >= sequence.len() {
            return Err(Error::InvalidArgument(format!(
                "mask position {p} out of bounds for sequence of length {}",
                sequence.len()
            )));
        }
        targets.push(sequence.ids[p]);
        corrupted.ids[p] = plan.mask_token_id;
    }
    Ok(MaskedSequence {
        corrupted,
        positions: plan.positions.clone(),
        targets,
    })
}
