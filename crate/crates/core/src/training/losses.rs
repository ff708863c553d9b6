use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Tolerance on row norms accepted as unit length.
const NORM_TOL: f64 = 1e-4;

/// Mean cross-entropy of `logits[positions[i]]` against `targets[i]`.
pub fn mdm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], positions: &[usize]) -> Result<Var> {
    let rows = mdm_losses(tape, logits, targets, positions)?;
    tape.mean(rows)
}

/// Per-position cross-entropies, shape `[positions.len()]`.
pub fn mdm_losses<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], positions: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::invalid("mdm-loss", "no masked positions to supervise"));
    }
    if positions.len() != targets.len() {
        return Err(Error::invalid(
            "mdm-loss",
            format!("{} positions but {} targets", positions.len(), targets.len()),
        ));
    }
    let picked = tape.gather_rows(logits, positions.to_vec())?;
    tape.cross_entropy(picked, targets.to_vec(), T::zero())
}

/// `(1 - eps) * CE(target) + eps * mean over the vocabulary of CE(v)`,
/// averaged over rows.
pub fn label_smoothed_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid("label-smoothed-ce", format!("smoothing {eps} outside [0, 1)")));
    }
    let rows = tape.cross_entropy(logits, targets.to_vec(), T::lit(eps))?;
    tape.mean(rows)
}

fn check_normalized<T: Scalar>(tape: &Tape<T>, v: Var, which: &str) -> Result<()> {
    let t = tape.value(v);
    let d = *t.shape().last().unwrap_or(&0);
    for (i, row) in t.data().chunks(d.max(1)).enumerate() {
        let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::invalid(
                "contrastive-loss",
                format!("{which} embedding {i} has norm {norm}, expected 1"),
            ));
        }
    }
    Ok(())
}

/// Multiplier applied to cosine similarities: a fixed `1/τ`, or `exp` of a
/// learned `[1]` logit scale.
pub enum Scale<T> {
    Temperature(T),
    LogitScale(Var),
}

/// Symmetric InfoNCE over the `[B, B]` matrix of scaled cosine similarities
/// with matched pairs on the diagonal. Rows must already be unit length.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, image: Var, text: Var, scale: Scale<T>) -> Result<Var> {
    let (si, st) = (tape.shape(image).to_vec(), tape.shape(text).to_vec());
    if si.len() != 2 || si != st {
        return Err(Error::Shape {
            op: "contrastive-loss",
            lhs: si,
            rhs: st,
        });
    }
    let b = si[0];
    check_normalized(tape, image, "image")?;
    check_normalized(tape, text, "text")?;
    let tt = tape.transpose(text, 0, 1)?;
    let sims = tape.matmul(image, tt)?;
    let logits = match scale {
        Scale::Temperature(tau) => {
            if tau <= T::zero() {
                return Err(Error::invalid("contrastive-loss", "temperature must be positive"));
            }
            tape.scale(sims, T::one() / tau)?
        }
        Scale::LogitScale(ls) => {
            let s = tape.exp(ls)?;
            let flat = tape.reshape(sims, vec![b * b, 1])?;
            let scaled = tape.mul(flat, s)?;
            tape.reshape(scaled, vec![b, b])?
        }
    };
    let diag: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy(logits, diag.clone(), T::zero())?;
    let i2t = tape.mean(i2t)?;
    let lt = tape.transpose(logits, 0, 1)?;
    let t2i = tape.cross_entropy(lt, diag, T::zero())?;
    let t2i = tape.mean(t2i)?;
    let both = tape.add(i2t, t2i)?;
    tape.scale(both, T::lit(0.5))
}
