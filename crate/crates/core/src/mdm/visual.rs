//! Frozen visual tokenizer: a fixed random projection followed by
//! nearest-codebook lookup. Supplies discrete targets for masked patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_PROJECTION_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualCodebook {
    size: usize,
    feature_dim: usize,
    proj_dim: usize,
    /// `[size, feature_dim]`, uniform in the patch value range.
    vectors: Vec<f64>,
    /// `[proj_dim, feature_dim]`
    projection: Vec<f64>,
    /// `[size, proj_dim]`
    projected: Vec<f64>,
    pub seed: u64,
}

impl VisualCodebook {
    pub fn new(size: usize, feature_dim: usize, proj_dim: usize, seed: u64) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!("codebook needs at least 2 entries, got {size}")));
        }
        if feature_dim == 0 || proj_dim == 0 {
            return Err(Error::InvalidArgument("codebook dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<f64> = (0..size * feature_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let projection: Vec<f64> = Tensor::<f64>::randn(&[proj_dim, feature_dim], scale, &mut rng).into_vec();
        let mut cb = Self {
            size,
            feature_dim,
            proj_dim,
            vectors,
            projection,
            projected: Vec::new(),
            seed,
        };
        cb.projected = (0..size)
            .flat_map(|k| cb.project(&cb.vectors[k * feature_dim..(k + 1) * feature_dim]))
            .collect();
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Codebook entry `k` in patch space.
    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.proj_dim)
            .map(|r| {
                self.projection[r * self.feature_dim..(r + 1) * self.feature_dim]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Nearest entry after projection; ties go to the lowest index.
    pub fn quantize(&self, patch: &[f64]) -> Result<usize> {
        if patch.len() != self.feature_dim {
            return Err(Error::Shape {
                op: "visual_tokenize",
                lhs: vec![patch.len()],
                rhs: vec![self.feature_dim],
            });
        }
        let p = self.project(patch);
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size {
            let d: f64 = self.projected[k * self.proj_dim..(k + 1) * self.proj_dim]
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best.0)
    }
}

/// Visual token id for every row of `[num_patches, feature_dim]`.
pub fn visual_tokenize<T: Scalar>(patches: &Tensor<T>, codebook: &VisualCodebook) -> Result<Vec<usize>> {
    if patches.rank() != 2 {
        return Err(Error::Shape {
            op: "visual_tokenize",
            lhs: patches.shape().to_vec(),
            rhs: vec![codebook.feature_dim],
        });
    }
    (0..patches.shape()[0])
        .map(|i| {
            let row: Vec<f64> = patches.row(i).iter().map(|v| v.as_f64()).collect();
            codebook.quantize(&row)
        })
        .collect()
}
