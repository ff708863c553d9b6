use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::step::{apply_update, diverged_on_nonfinite, UpdateConfig};
use crate::error::{Error, Result};
use crate::mdm::{
    compose_batch, mask_example, visual_tokenize, MaskedExample, MaskingConfig, Quotas, RasterImage, SequenceKind,
    StreamSizes, Targets, VisualCodebook,
};
use crate::model::{accumulate, encode, GradMap, Graph, Layout, MultiwayConfig, MultiwayModel};
use crate::seed::{mix_seed, sample_seed};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub quotas: Quotas,
    pub seed: u64,
    pub update: UpdateConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    /// Record wall-clock time per step; off by default so metrics files are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

/// An image cut into patches, with the visual token of every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage<T> {
    pub patches: Tensor<T>,
    pub visual_ids: Vec<usize>,
}

impl<T: Scalar> PatchImage<T> {
    pub fn new(image: &RasterImage, config: &MultiwayConfig, codebook: &VisualCodebook) -> Result<Self> {
        if image.width != config.image_size || image.height != config.image_size {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, model expects {}x{}",
                image.width, image.height, config.image_size, config.image_size
            )));
        }
        let patches = image.patches::<T>(config.patch_size, config.channels)?;
        let visual_ids = visual_tokenize(&patches, codebook)?;
        Ok(Self { patches, visual_ids })
    }
}

/// Tokenized streams: framed text ids, images, and (image, framed caption) pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainData<T> {
    pub texts: Vec<Vec<usize>>,
    pub images: Vec<PatchImage<T>>,
    pub pairs: Vec<(PatchImage<T>, Vec<usize>)>,
}

impl<T: Scalar> PretrainData<T> {
    pub fn sizes(&self) -> StreamSizes {
        StreamSizes {
            text: self.texts.len(),
            image: self.images.len(),
            pair: self.pairs.len(),
        }
    }

    /// Masked version of sample `index` of `kind`.
    pub fn example(
        &self,
        kind: SequenceKind,
        index: usize,
        config: &MultiwayConfig,
        masking: &MaskingConfig,
        seed: u64,
    ) -> Result<MaskedExample<T>> {
        let grid = config.grid();
        match kind {
            SequenceKind::MonoText => mask_example(None, Some(&self.texts[index]), grid, masking, seed),
            SequenceKind::MonoImage => {
                let img = &self.images[index];
                mask_example(Some((&img.patches, &img.visual_ids)), None, grid, masking, seed)
            }
            SequenceKind::Pair => {
                let (img, text) = &self.pairs[index];
                mask_example(Some((&img.patches, &img.visual_ids)), Some(text), grid, masking, seed)
            }
        }
    }
}

/// Layout used to encode each kind of pretraining sample.
pub fn pretrain_layout(kind: SequenceKind) -> Layout {
    match kind {
        SequenceKind::MonoText => Layout::LanguageEncoder,
        SequenceKind::MonoImage => Layout::VisionEncoder,
        SequenceKind::Pair => Layout::Fusion,
    }
}

/// Prediction heads over the masked rows of one example.
#[derive(Debug, Clone, Copy)]
pub struct MdmOutputs {
    /// `[n_text, text_vocab]`
    pub text_logits: Option<Var>,
    /// `[n_image, visual_vocab]`
    pub image_logits: Option<Var>,
}

fn head_logits<T: Scalar>(g: &mut Graph<'_, T>, hidden: Var, targets: &Targets, head: &str) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let rows = g.tape.gather_rows(hidden, targets.rows.clone())?;
    let w = g.param(&format!("{head}.w"))?;
    let b = g.param(&format!("{head}.b"))?;
    g.tape.linear(rows, w, b).map(Some)
}

pub fn mdm_forward<T: Scalar>(g: &mut Graph<'_, T>, ex: &MaskedExample<T>) -> Result<MdmOutputs> {
    let enc = encode(g, &ex.input, pretrain_layout(ex.kind))?;
    Ok(MdmOutputs {
        text_logits: head_logits(g, enc.hidden, &ex.text, "head.mlm")?,
        image_logits: head_logits(g, enc.hidden, &ex.image, "head.mim")?,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_text: Option<f64>,
    pub loss_image: Option<f64>,
    pub loss_pair: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl StepMetrics {
    /// Sum of the per-kind losses present in the batch.
    pub fn total_loss(&self) -> f64 {
        [self.loss_text, self.loss_image, self.loss_pair].iter().flatten().sum()
    }
}

fn kind_slot(kind: SequenceKind) -> usize {
    match kind {
        SequenceKind::MonoText => 0,
        SequenceKind::MonoImage => 1,
        SequenceKind::Pair => 2,
    }
}

/// Masked-data-modeling loss and gradients of one batch. Each kind
/// contributes the mean cross-entropy over all its masked tokens; the kinds
/// are summed. Samples run on separate tapes and gradients are added in batch
/// order, so the result does not depend on scheduling.
pub fn pretrain_batch_grads<T: Scalar>(
    model: &MultiwayModel<T>,
    examples: &[(MaskedExample<T>, u64)],
) -> Result<([Option<f64>; 3], GradMap<T>)> {
    let mut counts = [0usize; 3];
    for (ex, _) in examples {
        counts[kind_slot(ex.kind)] += ex.text.len() + ex.image.len();
    }
    let mut sums = [0.0f64; 3];
    let mut grads = GradMap::new();
    for (ex, seed) in examples {
        let slot = kind_slot(ex.kind);
        let mut g = Graph::train(model, mix_seed(*seed, "drop-path"));
        let out = mdm_forward(&mut g, ex)?;
        let mut total = None;
        for (logits, targets) in [(out.text_logits, &ex.text), (out.image_logits, &ex.image)] {
            if let Some(logits) = logits {
                let ce = g.tape.cross_entropy(logits, targets.ids.clone(), T::zero())?;
                let s = g.tape.sum(ce)?;
                total = Some(match total {
                    Some(t) => g.tape.add(t, s)?,
                    None => s,
                });
            }
        }
        let total = total.ok_or_else(|| Error::invalid("mdm-loss", "sample has no masked positions"))?;
        sums[slot] += g.value(total).item().as_f64();
        let loss = g.tape.scale(total, T::lit(1.0 / counts[slot] as f64))?;
        accumulate(&mut grads, g.backward(loss)?);
    }
    let losses = [0, 1, 2].map(|k| (counts[k] > 0).then(|| sums[k] / counts[k] as f64));
    Ok((losses, grads))
}

/// Masked examples of batch `step` (0-based), with their sample seeds.
pub fn pretrain_batch<T: Scalar>(
    config: &MultiwayConfig,
    data: &PretrainData<T>,
    run: &PretrainConfig,
    step: u64,
) -> Result<Vec<(MaskedExample<T>, u64)>> {
    let batch = compose_batch(data.sizes(), run.quotas, run.seed, 0, step, true)?;
    batch
        .samples
        .iter()
        .map(|s| Ok((data.example(s.kind, s.index, config, &run.masking, s.seed)?, s.seed)))
        .collect()
}

/// Runs `run.steps` optimizer steps, calling `on_step` after each. On a
/// non-finite loss or gradient the loop stops with [`Error::Diverged`]; the
/// model and optimizer keep the state of the last completed step.
pub fn pretrain_loop<T: Scalar>(
    model: &mut MultiwayModel<T>,
    state: &mut OptimizerState<T>,
    data: &PretrainData<T>,
    run: &PretrainConfig,
    mut on_step: impl FnMut(&StepMetrics, &MultiwayModel<T>, &OptimizerState<T>) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    run.update.validate()?;
    let mut log = Vec::with_capacity(run.steps as usize);
    let start_step = state.step;
    for i in 0..run.steps {
        let step = start_step + i;
        let t0 = Instant::now();
        let examples = pretrain_batch(&model.config, data, run, step)?;
        let (losses, grads) =
            pretrain_batch_grads(model, &examples).map_err(|e| diverged_on_nonfinite(e, step + 1))?;
        if losses.iter().flatten().any(|l| !l.is_finite()) {
            return Err(Error::Diverged { step: step + 1, what: "loss" });
        }
        let update = apply_update(model, state, grads, &run.update)?;
        let metrics = StepMetrics {
            step: state.step,
            lr: update.lr,
            loss_text: losses[0],
            loss_image: losses[1],
            loss_pair: losses[2],
            grad_norm: update.grad_norm,
            wall_ms: if run.record_wall_time { t0.elapsed().as_millis() as u64 } else { 0 },
        };
        on_step(&metrics, model, state)?;
        log.push(metrics);
    }
    Ok(log)
}

/// Top-1 recovery of masked tokens in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Recovery {
    pub text_correct: usize,
    pub text_total: usize,
    pub image_correct: usize,
    pub image_total: usize,
}

impl Recovery {
    pub fn text_accuracy(&self) -> f64 {
        self.text_correct as f64 / self.text_total.max(1) as f64
    }

    pub fn image_accuracy(&self) -> f64 {
        self.image_correct as f64 / self.image_total.max(1) as f64
    }
}

/// Index of the largest entry of each row, lowest index on ties.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Masks `per_kind` samples of each stream with seeds derived from `seed`
/// and counts correctly recovered tokens.
pub fn masked_recovery<T: Scalar>(
    model: &MultiwayModel<T>,
    data: &PretrainData<T>,
    masking: &MaskingConfig,
    per_kind: usize,
    seed: u64,
) -> Result<Recovery> {
    let mut r = Recovery::default();
    let sizes = data.sizes();
    for (k, kind) in [SequenceKind::MonoText, SequenceKind::MonoImage, SequenceKind::Pair].into_iter().enumerate() {
        let n = sizes.get(kind).min(per_kind);
        for i in 0..n {
            let ex = data.example(kind, i, &model.config, masking, sample_seed(seed, k as u64, i as u64))?;
            let mut g = Graph::eval(model);
            let out = mdm_forward(&mut g, &ex)?;
            if let Some(l) = out.text_logits {
                let pred = argmax_rows(g.value(l));
                r.text_correct += pred.iter().zip(&ex.text.ids).filter(|(p, t)| p == t).count();
                r.text_total += pred.len();
            }
            if let Some(l) = out.image_logits {
                let pred = argmax_rows(g.value(l));
                r.image_correct += pred.iter().zip(&ex.image.ids).filter(|(p, t)| p == t).count();
                r.image_total += pred.len();
            }
        }
    }
    Ok(r)
}
