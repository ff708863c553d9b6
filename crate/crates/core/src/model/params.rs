use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Expert, MultiwayConfig};
use crate::error::{Error, Result};
use crate::seed::mix_seed;
use crate::tensor::{Scalar, Tensor};

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.02;

/// Initial contrastive temperature; stored as the log of its inverse.
pub const INIT_TEMPERATURE: f64 = 0.07;

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

pub fn attn_param(layer: usize, proj: &str, part: &str) -> String {
    format!("layers.{layer}.attn.{proj}.{part}")
}

pub fn expert_param(layer: usize, expert: Expert, rest: &str) -> String {
    format!("layers.{layer}.{}.{rest}", expert.key())
}

/// Depth index used for layer-wise learning-rate decay: 0 for embeddings,
/// `l` for block `l`, `num_layers` for everything above the blocks.
pub fn param_depth(name: &str, num_layers: usize) -> usize {
    if name.starts_with("embed.") {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("layers.") {
        if let Some(l) = rest.split('.').next().and_then(|s| s.parse().ok()) {
            return l;
        }
    }
    num_layers
}

struct Init<'a, T> {
    seed: u64,
    store: &'a mut ParamStore<T>,
}

impl<T: Scalar> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &name));
        let mut t = Tensor::<T>::uniform(shape, INIT_RANGE, &mut rng);
        if scale != 1.0 {
            let s = T::lit(scale);
            t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
        self.store.insert(name, t);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, scale: f64) {
        self.uniform(format!("{prefix}.w"), &[fan_in, fan_out], scale);
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.store.insert(format!("{prefix}.g"), Tensor::ones(&[dim]));
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
    }
}

/// Draws every weight uniformly in `[-0.02, 0.02]`, then multiplies the last
/// projection of each sublayer in layer `l` by `1/sqrt(2l)`. Biases start at
/// zero and layer-norm gains at one.
pub fn init_params<T: Scalar>(config: &MultiwayConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let h = config.hidden;
    let mut init = Init {
        seed,
        store: &mut store,
    };
    init.uniform("embed.text".into(), &[config.text_vocab, h], 1.0);
    init.uniform("embed.text_pos".into(), &[config.max_seq, h], 1.0);
    init.linear("embed.patch", config.patch_dim(), h, 1.0);
    init.uniform("embed.image_cls".into(), &[1, h], 1.0);
    init.uniform("embed.image_mask".into(), &[1, h], 1.0);
    init.uniform("embed.image_pos".into(), &[config.num_patches() + 1, h], 1.0);
    for l in 1..=config.num_layers {
        let rescale = 1.0 / ((2 * l) as f64).sqrt();
        for proj in ["q", "k", "v"] {
            init.linear(&format!("layers.{l}.attn.{proj}"), h, h, 1.0);
        }
        init.linear(&format!("layers.{l}.attn.o"), h, h, rescale);
        for expert in Expert::ALL {
            if expert == Expert::VisionLanguage && !config.has_vl_expert(l) {
                continue;
            }
            init.norm(&expert_param(l, expert, "ln_attn"), h);
            init.norm(&expert_param(l, expert, "ln_ffn"), h);
            init.linear(&expert_param(l, expert, "fc1"), h, config.ffn_inner, 1.0);
            init.linear(&expert_param(l, expert, "fc2"), config.ffn_inner, h, rescale);
        }
    }
    init.norm("final_norm", h);
    init.linear("pooler", h, h, 1.0);
    init.linear("head.mlm", h, config.text_vocab, 1.0);
    init.linear("head.mim", h, config.visual_vocab, 1.0);
    init.linear("proj.image", h, h, 1.0);
    init.linear("proj.text", h, h, 1.0);
    store.insert(
        "logit_scale",
        Tensor::from_vec(vec![T::lit((1.0 / INIT_TEMPERATURE).ln())]),
    );
    Ok(store)
}
