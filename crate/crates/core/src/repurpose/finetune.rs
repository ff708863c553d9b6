use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::caption::{caption_loss, plan_caption_mask, CaptionMasking};
use super::dual::dual_embed;
use super::heads::{fusion_logits, two_pair_logits, FusionHead};
use crate::error::{Error, Result};
use crate::model::{accumulate, GradMap, Graph, ImageInput, ModelInput, MultiwayModel};
use crate::seed::{combine, mix_seed, sample_seed};
use crate::tensor::{Scalar, Tensor, Var};
use crate::training::{
    apply_update, contrastive_loss, diverged_on_nonfinite, AdamW, OptimizerState, Scale, Schedule, UpdateConfig,
};

/// Upper bound on the learned contrastive logit scale, `ln 100`.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Linear warmup length in epochs; may be fractional.
    #[serde(default)]
    pub warmup_epochs: f64,
    #[serde(default)]
    pub floor_lr: f64,
    #[serde(default)]
    pub adamw: AdamW,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "one")]
    pub layer_decay: f64,
    /// Stochastic depth rate written into the model config for the run.
    pub drop_path: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default)]
    pub caption_masking: CaptionMasking,
    pub seed: u64,
}

fn default_clip() -> f64 {
    3.0
}

fn one() -> f64 {
    1.0
}

fn default_mask_prob() -> f64 {
    0.6
}

impl FinetuneConfig {
    /// Desk-scale defaults with the given length and peak rate.
    pub fn new(epochs: usize, batch_size: usize, peak_lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            peak_lr,
            warmup_epochs: 0.0,
            floor_lr: 0.0,
            adamw: AdamW::default(),
            clip_norm: default_clip(),
            layer_decay: 1.0,
            drop_path: 0.0,
            label_smoothing: 0.0,
            mask_prob: default_mask_prob(),
            caption_masking: CaptionMasking::Iid,
            seed,
        }
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn update_config(&self, n: usize) -> UpdateConfig {
        let per_epoch = self.batches_per_epoch(n) as u64;
        let total_steps = per_epoch * self.epochs as u64;
        UpdateConfig {
            schedule: Schedule {
                peak_lr: self.peak_lr,
                warmup_steps: ((self.warmup_epochs * per_epoch as f64).round() as u64).min(total_steps.saturating_sub(1)),
                total_steps,
                floor_lr: self.floor_lr,
            },
            adamw: self.adamw,
            clip_norm: self.clip_norm,
            layer_decay: self.layer_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::Config(format!("mask_prob {} outside (0, 1]", self.mask_prob)));
        }
        Ok(())
    }
}

/// One optimizer step of a finetuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome<T> {
    pub metrics: Vec<FinetuneMetrics>,
    pub state: OptimizerState<T>,
}

/// A batch: example indices with their per-sample seeds.
pub type BatchRefs<'a> = &'a [(usize, u64)];

/// Shuffled mini-batches per epoch, one optimizer step per batch.
/// `batch_grads` returns the batch loss and its gradients.
pub fn run_finetune<T: Scalar>(
    model: &mut MultiwayModel<T>,
    n: usize,
    config: &FinetuneConfig,
    mut batch_grads: impl FnMut(&MultiwayModel<T>, BatchRefs<'_>, u64) -> Result<(f64, GradMap<T>)>,
    mut after_step: impl FnMut(&mut MultiwayModel<T>),
) -> Result<FinetuneOutcome<T>> {
    config.validate()?;
    let mut state = OptimizerState::new(config.adamw);
    let mut metrics = Vec::new();
    if config.epochs == 0 || n == 0 {
        return Ok(FinetuneOutcome { metrics, state });
    }
    model.config.drop_path_rate = config.drop_path;
    let update = config.update_config(n);
    update.validate()?;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(combine(&[config.seed, epoch as u64])));
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<(usize, u64)> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| (i, sample_seed(config.seed, epoch as u64, (b * config.batch_size + j) as u64)))
                .collect();
            let step = state.step + 1;
            let batch_seed = combine(&[config.seed, epoch as u64, b as u64]);
            let (loss, grads) = batch_grads(model, &refs, batch_seed).map_err(|e| diverged_on_nonfinite(e, step))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, what: "loss" });
            }
            let u = apply_update(model, &mut state, grads, &update)?;
            after_step(model);
            metrics.push(FinetuneMetrics {
                step: state.step,
                epoch,
                lr: u.lr,
                loss,
                grad_norm: u.grad_norm,
            });
        }
    }
    Ok(FinetuneOutcome { metrics, state })
}

/// Sums per-sample losses (each scaled by `1/len`) computed on separate tapes.
fn per_sample<T: Scalar>(
    model: &MultiwayModel<T>,
    refs: BatchRefs<'_>,
    mut loss: impl FnMut(&mut Graph<'_, T>, usize) -> Result<Var>,
) -> Result<(f64, GradMap<T>)> {
    let mut grads = GradMap::new();
    let mut total = 0.0;
    let scale = T::lit(1.0 / refs.len() as f64);
    for &(i, seed) in refs {
        let mut g = Graph::train(model, mix_seed(seed, "drop-path"));
        let l = loss(&mut g, i)?;
        total += g.value(l).item().as_f64();
        let l = g.tape.scale(l, scale)?;
        accumulate(&mut grads, g.backward(l)?);
    }
    Ok((total / refs.len() as f64, grads))
}

fn smoothed_ce<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, label: usize, eps: f64) -> Result<Var> {
    let ce = g.tape.cross_entropy(logits, vec![label], T::lit(eps))?;
    g.tape.mean(ce)
}

/// Finetunes a single-pair fusion classifier on `(patches, text, label)`.
pub fn finetune_fusion<T: Scalar>(
    model: &mut MultiwayModel<T>,
    head: &FusionHead,
    examples: &[(Tensor<T>, Vec<usize>, usize)],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    let eps = config.label_smoothing;
    run_finetune(
        model,
        examples.len(),
        config,
        |m, refs, _| {
            per_sample(m, refs, |g, i| {
                let (patches, text, label) = &examples[i];
                let logits = fusion_logits(g, head, patches, text)?;
                smoothed_ce(g, logits, *label, eps)
            })
        },
        |_| {},
    )
}

/// One example of the two-image task, already cut into patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPairInput<T> {
    pub image_a: Tensor<T>,
    pub image_b: Tensor<T>,
    pub text: Vec<usize>,
    pub label: usize,
}

pub fn finetune_two_pair<T: Scalar>(
    model: &mut MultiwayModel<T>,
    head: &FusionHead,
    examples: &[TwoPairInput<T>],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    let eps = config.label_smoothing;
    run_finetune(
        model,
        examples.len(),
        config,
        |m, refs, _| {
            per_sample(m, refs, |g, i| {
                let ex = &examples[i];
                let logits = two_pair_logits(g, head, &ex.image_a, &ex.image_b, &ex.text)?;
                smoothed_ce(g, logits, ex.label, eps)
            })
        },
        |_| {},
    )
}

fn clamp_logit_scale<T: Scalar>(model: &mut MultiwayModel<T>) {
    if let Some(s) = model.params.get_mut("logit_scale") {
        s.data_mut()
            .iter_mut()
            .for_each(|v| *v = T::lit(v.as_f64().clamp(0.0, MAX_LOGIT_SCALE)));
    }
}

fn stack_embeddings<T: Scalar>(g: &mut Graph<'_, T>, inputs: impl Iterator<Item = ModelInput<T>>) -> Result<Var> {
    let rows = inputs.map(|x| dual_embed(g, &x)).collect::<Result<Vec<_>>>()?;
    g.tape.concat(&rows, 0)
}

/// Contrastive training of the dual encoder on matched `(patches, text)`
/// pairs with the learned logit scale, clamped to `[0, ln 100]` after each
/// step. All pairs of a batch share one tape since the loss couples them.
/// A pair whose caption already occurs earlier in the batch is left out of
/// that batch, as it would otherwise be scored as its twin's negative.
pub fn intermediate_finetune_contrastive<T: Scalar>(
    model: &mut MultiwayModel<T>,
    pairs: &[(Tensor<T>, Vec<usize>)],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    run_finetune(
        model,
        pairs.len(),
        config,
        |m, refs, seed| {
            let mut seen = HashSet::new();
            let refs: Vec<_> = refs.iter().filter(|&&(i, _)| seen.insert(&pairs[i].1)).copied().collect();
            let mut g = Graph::train(m, mix_seed(seed, "drop-path"));
            let images = stack_embeddings(
                &mut g,
                refs.iter().map(|&(i, _)| ModelInput::image(ImageInput::unmasked(pairs[i].0.clone()))),
            )?;
            let texts = stack_embeddings(&mut g, refs.iter().map(|&(i, _)| ModelInput::text(pairs[i].1.clone())))?;
            let ls = g.param("logit_scale")?;
            let loss = contrastive_loss(&mut g.tape, images, texts, Scale::LogitScale(ls))?;
            let value = g.value(loss).item().as_f64();
            Ok((value, g.backward(loss)?))
        },
        clamp_logit_scale,
    )
}

/// Trains image embeddings to match the embedding of their label text: for
/// each image, cross-entropy over its scaled similarities to every label text.
pub fn finetune_classify<T: Scalar>(
    model: &mut MultiwayModel<T>,
    examples: &[(Tensor<T>, usize)],
    label_texts: &[Vec<usize>],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    if label_texts.is_empty() {
        return Err(Error::InvalidArgument("no label texts".into()));
    }
    let eps = config.label_smoothing;
    run_finetune(
        model,
        examples.len(),
        config,
        |m, refs, seed| {
            let mut g = Graph::train(m, mix_seed(seed, "drop-path"));
            let images = stack_embeddings(
                &mut g,
                refs.iter().map(|&(i, _)| ModelInput::image(ImageInput::unmasked(examples[i].0.clone()))),
            )?;
            let labels = stack_embeddings(&mut g, label_texts.iter().map(|t| ModelInput::text(t.clone())))?;
            let lt = g.tape.transpose(labels, 0, 1)?;
            let sims = g.tape.matmul(images, lt)?;
            let (rows, cols) = (refs.len(), label_texts.len());
            let flat = g.tape.reshape(sims, vec![rows * cols, 1])?;
            let ls = g.param("logit_scale")?;
            let s = g.tape.exp(ls)?;
            let scaled = g.tape.mul(flat, s)?;
            let logits = g.tape.reshape(scaled, vec![rows, cols])?;
            let targets = refs.iter().map(|&(i, _)| examples[i].1).collect();
            let ce = g.tape.cross_entropy(logits, targets, T::lit(eps))?;
            let loss = g.tape.mean(ce)?;
            let value = g.value(loss).item().as_f64();
            Ok((value, g.backward(loss)?))
        },
        clamp_logit_scale,
    )
}

/// Masked-caption finetuning on `(patches, framed caption)` pairs under the
/// seq2seq attention mask.
pub fn finetune_caption<T: Scalar>(
    model: &mut MultiwayModel<T>,
    pairs: &[(Tensor<T>, Vec<usize>)],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    let (p, mode, eps) = (config.mask_prob, config.caption_masking, config.label_smoothing);
    run_finetune(
        model,
        pairs.len(),
        config,
        |m, refs, _| {
            let mut seeds = refs.iter().map(|&(_, s)| s);
            per_sample(m, refs, |g, i| {
                let seed = seeds.next().expect("one seed per sample");
                let (patches, caption) = &pairs[i];
                let positions = plan_caption_mask(caption.len(), p, mode, mix_seed(seed, "caption-mask"))?;
                caption_loss(g, patches, caption, &positions, eps)
            })
        },
        |_| {},
    )
}

/// One masked-caption update on a single pair; returns the loss before the
/// update.
pub fn caption_finetune_step<T: Scalar>(
    model: &mut MultiwayModel<T>,
    state: &mut OptimizerState<T>,
    patches: &Tensor<T>,
    caption: &[usize],
    config: &FinetuneConfig,
    update: &UpdateConfig,
    seed: u64,
) -> Result<f64> {
    let positions = plan_caption_mask(caption.len(), config.mask_prob, config.caption_masking, seed)?;
    let (loss, grads) = {
        let mut g = Graph::train(model, mix_seed(seed, "drop-path"));
        let loss = caption_loss(&mut g, patches, caption, &positions, config.label_smoothing)?;
        (g.value(loss).item().as_f64(), g.backward(loss)?)
    };
    apply_update(model, state, grads, update)?;
    Ok(loss)
}
