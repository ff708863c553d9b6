use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{encode, Graph, ImageInput, Layout, ModelInput, MultiwayModel, INIT_RANGE};
use crate::seed::mix_seed;
use crate::tensor::{Scalar, Tensor, Var};

/// Classifier over pooled fusion outputs, stored in the model under
/// `task.<name>.*`: `fc1 → layer norm → gelu → fc2`, hidden width `2H`.
/// Two-pair heads read the concatenation of two pooled vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionHead {
    pub name: String,
    /// Number of pooled vectors concatenated at the input (1 or 2).
    pub pairs: usize,
    pub num_labels: usize,
}

fn param(name: &str, part: &str) -> String {
    format!("task.{name}.{part}")
}

impl FusionHead {
    /// Adds freshly initialized head parameters to `model`. The output layer
    /// starts at zero, so an untrained head predicts the uniform distribution.
    pub fn attach<T: Scalar>(
        model: &mut MultiwayModel<T>,
        name: &str,
        pairs: usize,
        num_labels: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(1..=2).contains(&pairs) || num_labels == 0 {
            return Err(Error::InvalidArgument(format!(
                "head needs 1 or 2 inputs and at least one label, got {pairs} and {num_labels}"
            )));
        }
        let h = model.config.hidden;
        let (input, inner) = (pairs * h, 2 * h);
        let p = &mut model.params;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &param(name, "fc1.w")));
        p.insert(param(name, "fc1.w"), Tensor::uniform(&[input, inner], INIT_RANGE, &mut rng));
        p.insert(param(name, "fc1.b"), Tensor::zeros(&[inner]));
        p.insert(param(name, "ln.g"), Tensor::ones(&[inner]));
        p.insert(param(name, "ln.b"), Tensor::zeros(&[inner]));
        p.insert(param(name, "fc2.w"), Tensor::zeros(&[inner, num_labels]));
        p.insert(param(name, "fc2.b"), Tensor::zeros(&[num_labels]));
        Ok(Self {
            name: name.to_string(),
            pairs,
            num_labels,
        })
    }

    /// Reads the head dimensions back from a model that carries it.
    pub fn from_model<T: Scalar>(model: &MultiwayModel<T>, name: &str) -> Result<Self> {
        let w1 = model.params.get(&param(name, "fc1.w"))?;
        let w2 = model.params.get(&param(name, "fc2.w"))?;
        let h = model.config.hidden;
        if w1.shape()[0] % h != 0 {
            return Err(Error::Config(format!(
                "head {name}: input width {} is not a multiple of hidden {h}",
                w1.shape()[0]
            )));
        }
        Ok(Self {
            name: name.to_string(),
            pairs: w1.shape()[0] / h,
            num_labels: w2.shape()[1],
        })
    }

    /// `[1, num_labels]` logits of `features` (`[1, pairs * H]`).
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let w2 = g.param(&param(&self.name, "fc2.w"))?;
        let labels = g.tape.shape(w2)[1];
        if labels != self.num_labels {
            return Err(Error::InvalidArgument(format!(
                "head {} has {labels} outputs, expected {} labels",
                self.name, self.num_labels
            )));
        }
        let w1 = g.param(&param(&self.name, "fc1.w"))?;
        let b1 = g.param(&param(&self.name, "fc1.b"))?;
        let x = g.tape.linear(features, w1, b1)?;
        let gain = g.param(&param(&self.name, "ln.g"))?;
        let bias = g.param(&param(&self.name, "ln.b"))?;
        let x = g.tape.layer_norm(x, gain, bias)?;
        let x = g.tape.gelu(x)?;
        let b2 = g.param(&param(&self.name, "fc2.b"))?;
        g.tape.linear(x, w2, b2)
    }
}

/// Pooled fusion output of an (image, text) pair, `[1, H]`.
pub fn fusion_pooled<T: Scalar>(g: &mut Graph<'_, T>, patches: &Tensor<T>, text: &[usize]) -> Result<Var> {
    let input = ModelInput::pair(ImageInput::unmasked(patches.clone()), text.to_vec());
    Ok(encode(g, &input, Layout::Fusion)?.pooled)
}

/// Head logits for a single pair.
pub fn fusion_logits<T: Scalar>(
    g: &mut Graph<'_, T>,
    head: &FusionHead,
    patches: &Tensor<T>,
    text: &[usize],
) -> Result<Var> {
    if head.pairs != 1 {
        return Err(Error::InvalidArgument(format!("head {} expects {} pairs", head.name, head.pairs)));
    }
    let pooled = fusion_pooled(g, patches, text)?;
    head.logits(g, pooled)
}

/// Head logits for the two pairs `(image_a, text)` and `(image_b, text)`,
/// whose pooled outputs are concatenated in that order.
pub fn two_pair_logits<T: Scalar>(
    g: &mut Graph<'_, T>,
    head: &FusionHead,
    image_a: &Tensor<T>,
    image_b: &Tensor<T>,
    text: &[usize],
) -> Result<Var> {
    if head.pairs != 2 {
        return Err(Error::InvalidArgument(format!("head {} expects {} pairs", head.name, head.pairs)));
    }
    let a = fusion_pooled(g, image_a, text)?;
    let b = fusion_pooled(g, image_b, text)?;
    let features = g.tape.concat(&[a, b], 1)?;
    head.logits(g, features)
}

/// Softmax of a `[1, n]` logit row, computed in f64.
pub fn softmax_row<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let v: Vec<f64> = logits.data().iter().map(|x| x.as_f64()).collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Label distribution for an (image, text) pair, in eval mode.
pub fn fusion_classify<T: Scalar>(
    model: &MultiwayModel<T>,
    patches: &Tensor<T>,
    text: &[usize],
    head: &FusionHead,
) -> Result<Vec<f64>> {
    let mut g = Graph::eval(model);
    let logits = fusion_logits(&mut g, head, patches, text)?;
    Ok(softmax_row(g.value(logits)))
}

pub fn two_pair_classify<T: Scalar>(
    model: &MultiwayModel<T>,
    image_a: &Tensor<T>,
    image_b: &Tensor<T>,
    text: &[usize],
    head: &FusionHead,
) -> Result<Vec<f64>> {
    let mut g = Graph::eval(model);
    let logits = two_pair_logits(&mut g, head, image_a, image_b, text)?;
    Ok(softmax_row(g.value(logits)))
}

/// Index of the largest value, first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
