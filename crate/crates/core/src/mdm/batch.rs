//! Deterministic tri-modal batch composition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masking::SequenceKind;
use crate::error::{Error, Result};
use crate::seed::{combine, sample_seed};

/// Samples of each kind per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quotas {
    pub text: usize,
    pub image: usize,
    pub pair: usize,
}

impl Quotas {
    pub fn new(text: usize, image: usize, pair: usize) -> Self {
        Self { text, image, pair }
    }

    pub fn total(&self) -> usize {
        self.text + self.image + self.pair
    }

    pub fn get(&self, kind: SequenceKind) -> usize {
        match kind {
            SequenceKind::MonoText => self.text,
            SequenceKind::MonoImage => self.image,
            SequenceKind::Pair => self.pair,
        }
    }
}

/// Number of samples in each stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSizes {
    pub text: usize,
    pub image: usize,
    pub pair: usize,
}

impl StreamSizes {
    pub fn get(&self, kind: SequenceKind) -> usize {
        match kind {
            SequenceKind::MonoText => self.text,
            SequenceKind::MonoImage => self.image,
            SequenceKind::Pair => self.pair,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub kind: SequenceKind,
    /// Index into the stream of `kind`.
    pub index: usize,
    /// Seed for everything random about this sample (masks, drop path).
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Text samples first, then images, then pairs.
    pub samples: Vec<SampleRef>,
}

impl Batch {
    pub fn count(&self, kind: SequenceKind) -> usize {
        self.samples.iter().filter(|s| s.kind == kind).count()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

const KINDS: [SequenceKind; 3] = [SequenceKind::MonoText, SequenceKind::MonoImage, SequenceKind::Pair];

fn kind_code(kind: SequenceKind) -> u64 {
    match kind {
        SequenceKind::MonoText => 1,
        SequenceKind::MonoImage => 2,
        SequenceKind::Pair => 3,
    }
}

/// Visiting order of a stream during one pass over it.
fn pass_order(global_seed: u64, epoch: u64, kind: SequenceKind, pass: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[global_seed, epoch, kind_code(kind), pass]));
    order.shuffle(&mut rng);
    order
}

/// Batch `batch_index` of `epoch`. Each stream is walked in a seeded
/// permutation; with `repeat` the walk continues into fresh permutations,
/// otherwise running past the end of a stream is an error. The content
/// depends only on the arguments, never on the order batches are built in.
pub fn compose_batch(
    sizes: StreamSizes,
    quotas: Quotas,
    global_seed: u64,
    epoch: u64,
    batch_index: u64,
    repeat: bool,
) -> Result<Batch> {
    if quotas.total() == 0 {
        return Err(Error::InvalidArgument("batch quotas are all zero".into()));
    }
    let mut samples = Vec::with_capacity(quotas.total());
    let batch_base = batch_index * quotas.total() as u64;
    for kind in KINDS {
        let quota = quotas.get(kind);
        if quota == 0 {
            continue;
        }
        let len = sizes.get(kind);
        if len == 0 {
            return Err(Error::InvalidArgument(format!("{kind:?} stream is empty")));
        }
        let start = batch_index as usize * quota;
        if !repeat && start + quota > len {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} stream of {len} samples exhausted at batch {batch_index}"
            )));
        }
        let mut order: Option<(u64, Vec<usize>)> = None;
        for j in 0..quota {
            let pos = start + j;
            let pass = (pos / len) as u64;
            if order.as_ref().is_none_or(|(p, _)| *p != pass) {
                order = Some((pass, pass_order(global_seed, epoch, kind, pass, len)));
            }
            let index = order.as_ref().unwrap().1[pos % len];
            let sample_index = batch_base + samples.len() as u64;
            samples.push(SampleRef {
                kind,
                index,
                seed: sample_seed(global_seed, epoch, sample_index),
            });
        }
    }
    Ok(Batch { samples })
}
