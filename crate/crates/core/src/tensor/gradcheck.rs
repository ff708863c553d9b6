//! Central finite-difference gradient checking at `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Relative error floor used in the denominator.
const REL_FLOOR: f64 = 1e-8;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between the tape gradient of a single op and central
/// differences. The op output is contracted against fixed pseudo-random
/// weights so that invariant directions (softmax, layer-norm) still carry signal.
pub fn grad_check(op: &Op<f64>, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    if matches!(op, Op::Leaf) {
        return Err(Error::invalid("grad_check", "unsupported op kind leaf"));
    }
    check_eps(eps)?;
    let build = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.leaf(x.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = tape.apply(op.clone(), &vars)?;
        let loss = project(&mut tape, out, 0x5eed)?;
        Ok((tape, loss, vars))
    };
    check_gradients(inputs, eps, None, build)
}

/// Contracts `out` with seeded weights in `[-1, 1]` into a scalar.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng))?;
    let prod = tape.mul(out, weights)?;
    tape.sum(prod)
}

/// Generic checker. `build` records a scalar loss from `inputs` and returns the
/// tape, the loss node and one leaf node per input. With `sample = Some((k, seed))`
/// only `k` random coordinates of each input are perturbed.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    eps: f64,
    sample_coords: Option<(usize, u64)>,
    build: F,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)>,
{
    check_eps(eps)?;
    let (mut tape, loss, vars) = build(inputs)?;
    if vars.len() != inputs.len() {
        return Err(Error::invalid("grad_check", "one leaf per input is required"));
    }
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, loss, _) = build(xs)?;
        Ok(tape.value(loss).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sample_coords.map(|s| s.1).unwrap_or(0));
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match sample_coords {
            Some((k, _)) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}
