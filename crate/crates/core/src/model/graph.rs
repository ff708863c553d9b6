use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MultiwayModel;
use crate::error::Result;
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Adds `other` into `acc`, in sorted-name order.
pub fn accumulate<T: Scalar>(acc: &mut GradMap<T>, other: GradMap<T>) {
    for (name, g) in other {
        match acc.get_mut(&name) {
            Some(slot) => slot
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// One forward pass over a model: a fresh tape, lazily bound parameters and
/// the stochastic-depth source (present only in training mode).
pub struct Graph<'a, T: Scalar> {
    pub tape: Tape<T>,
    model: &'a MultiwayModel<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    drop_rng: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Inference: no parameter gradients, every residual branch kept.
    pub fn eval(model: &'a MultiwayModel<T>) -> Self {
        Self::new(model, false, None)
    }

    /// Training: parameter gradients and stochastic depth seeded by `seed`.
    pub fn train(model: &'a MultiwayModel<T>, seed: u64) -> Self {
        Self::new(model, true, Some(seed))
    }

    pub fn new(model: &'a MultiwayModel<T>, trainable: bool, drop_seed: Option<u64>) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: BTreeMap::new(),
            trainable,
            drop_rng: drop_seed.map(ChaCha8Rng::seed_from_u64),
        }
    }

    pub fn model(&self) -> &'a MultiwayModel<T> {
        self.model
    }

    pub fn is_training(&self) -> bool {
        self.drop_rng.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.model.params.get(name)?.clone();
        let v = self.tape.leaf(t, self.trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Whether to skip a residual branch with drop probability `p`.
    pub(crate) fn drop_branch(&mut self, p: f64) -> bool {
        match &mut self.drop_rng {
            Some(rng) if p > 0.0 => rng.gen::<f64>() < p,
            _ => false,
        }
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    fn named(&self, grads: Gradients<T>) -> GradMap<T> {
        self.bound
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn backward(&mut self, loss: Var) -> Result<GradMap<T>> {
        let grads = self.tape.backward(loss)?;
        Ok(self.named(grads))
    }

    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<GradMap<T>> {
        let grads = self.tape.backward_seeded(seeds)?;
        Ok(self.named(grads))
    }
}
