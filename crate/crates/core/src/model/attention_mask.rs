use std::sync::Arc;

use super::config::Layout;
use crate::tensor::SoftmaxMask;

/// `allowed[i][j]`: position `i` may attend to position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(size: usize) -> Self {
        Self {
            size,
            allowed: vec![true; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.allowed.chunks(self.size.max(1)).map(<[bool]>::to_vec).collect()
    }

    pub(crate) fn to_softmax_mask(&self) -> SoftmaxMask {
        SoftmaxMask {
            rows: self.size,
            cols: self.size,
            allowed: Arc::new(self.allowed.clone()),
        }
    }
}

/// Image tokens attend bidirectionally among themselves; caption token `i`
/// sees the whole image span plus caption positions up to and including `i`.
/// Every layout other than seq2seq is fully bidirectional.
pub fn build_attention_mask(layout: Layout, n_image: usize, n_caption: usize) -> AttentionMask {
    let size = n_image + n_caption;
    if layout != Layout::Seq2Seq {
        return AttentionMask::full(size);
    }
    let mut allowed = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            allowed[i * size + j] = if i < n_image {
                j < n_image
            } else {
                j < n_image || j <= i
            };
        }
    }
    AttentionMask { size, allowed }
}
