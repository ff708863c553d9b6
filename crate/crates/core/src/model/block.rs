use super::attention_mask::AttentionMask;
use super::config::Expert;
use super::graph::Graph;
use super::params::{attn_param, expert_param};
use super::routing::check_routing;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Token indices per expert, in expert order.
fn group_tokens(routing: &[Expert]) -> Vec<(Expert, Vec<usize>)> {
    Expert::ALL
        .iter()
        .filter_map(|&e| {
            let idx: Vec<usize> = routing
                .iter()
                .enumerate()
                .filter(|(_, &r)| r == e)
                .map(|(i, _)| i)
                .collect();
            (!idx.is_empty()).then_some((e, idx))
        })
        .collect()
}

/// Applies `f` to the rows owned by each expert and reassembles the rows in
/// sequence order. A routing with a single expert skips the gather entirely.
fn per_expert<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    groups: &[(Expert, Vec<usize>)],
    mut f: impl FnMut(&mut Graph<'_, T>, Expert, Var) -> Result<Var>,
) -> Result<Var> {
    if let [(expert, _)] = groups {
        return f(g, *expert, x);
    }
    let mut outs = Vec::with_capacity(groups.len());
    let mut order = Vec::new();
    for (expert, idx) in groups {
        let rows = g.tape.gather_rows(x, idx.clone())?;
        outs.push(f(g, *expert, rows)?);
        order.extend_from_slice(idx);
    }
    let stacked = g.tape.concat(&outs, 0)?;
    let mut inverse = vec![0; order.len()];
    for (pos, &tok) in order.iter().enumerate() {
        inverse[tok] = pos;
    }
    g.tape.gather_rows(stacked, inverse)
}

fn expert_norm<T: Scalar>(g: &mut Graph<'_, T>, layer: usize, expert: Expert, which: &str, x: Var) -> Result<Var> {
    let gain = g.param(&expert_param(layer, expert, &format!("{which}.g")))?;
    let bias = g.param(&expert_param(layer, expert, &format!("{which}.b")))?;
    g.tape.layer_norm(x, gain, bias)
}

fn expert_ffn<T: Scalar>(g: &mut Graph<'_, T>, layer: usize, expert: Expert, x: Var) -> Result<Var> {
    let w1 = g.param(&expert_param(layer, expert, "fc1.w"))?;
    let b1 = g.param(&expert_param(layer, expert, "fc1.b"))?;
    let w2 = g.param(&expert_param(layer, expert, "fc2.w"))?;
    let b2 = g.param(&expert_param(layer, expert, "fc2.b"))?;
    let h = g.tape.linear(x, w1, b1)?;
    let h = g.tape.gelu(h)?;
    g.tape.linear(h, w2, b2)
}

/// Multi-head self-attention with weights shared across modalities.
/// Disallowed positions get zero probability, equivalent to a `-inf` logit.
pub fn shared_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: usize,
    x: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let config = &g.model().config;
    let (heads, dh, hidden) = (config.num_heads, config.head_dim(), config.hidden);
    let seq = g.tape.shape(x)[0];
    let proj = |g: &mut Graph<'_, T>, name: &str| -> Result<Var> {
        let w = g.param(&attn_param(layer, name, "w"))?;
        let b = g.param(&attn_param(layer, name, "b"))?;
        let y = g.tape.linear(x, w, b)?;
        let y = g.tape.reshape(y, vec![seq, heads, dh])?;
        g.tape.transpose(y, 0, 1)
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let kt = g.tape.transpose(k, 1, 2)?;
    let scores = g.tape.matmul(q, kt)?;
    let scores = g.tape.scale(scores, T::one() / T::lit(dh as f64).sqrt())?;
    let probs = match mask {
        Some(m) if !m.is_full() => g.tape.masked_softmax(scores, m.to_softmax_mask())?,
        _ => g.tape.softmax(scores, 2)?,
    };
    let ctx = g.tape.matmul(probs, v)?;
    let ctx = g.tape.transpose(ctx, 0, 1)?;
    let ctx = g.tape.reshape(ctx, vec![seq, hidden])?;
    let wo = g.param(&attn_param(layer, "o", "w"))?;
    let bo = g.param(&attn_param(layer, "o", "b"))?;
    g.tape.linear(ctx, wo, bo)
}

/// Residual connection with stochastic depth: in training mode the branch is
/// skipped with probability `p` and rescaled by `1/(1-p)` when kept.
fn residual<T: Scalar>(g: &mut Graph<'_, T>, h: Var, branch: impl FnOnce(&mut Graph<'_, T>) -> Result<Var>, p: f64) -> Result<Var> {
    if g.drop_branch(p) {
        return Ok(h);
    }
    let mut out = branch(g)?;
    if g.is_training() && p > 0.0 {
        out = g.tape.scale(out, T::lit(1.0 / (1.0 - p)))?;
    }
    g.tape.add(h, out)
}

/// Pre-norm Multiway block at 1-based `layer`:
/// `h += Attn(LN_e(h))`, then `h_t += FFN_e(LN_e(h_t))` with `e` the routed expert of token `t`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: usize,
    hidden: Var,
    mask: Option<&AttentionMask>,
    routing: &[Expert],
) -> Result<Var> {
    let config = g.model().config.clone();
    let shape = g.tape.shape(hidden).to_vec();
    if shape.len() != 2 || shape[1] != config.hidden || shape[0] != routing.len() {
        return Err(Error::Shape {
            op: "block",
            lhs: shape,
            rhs: vec![routing.len(), config.hidden],
        });
    }
    if let Some(m) = mask {
        if m.size() != routing.len() {
            return Err(Error::Shape {
                op: "block",
                lhs: vec![routing.len()],
                rhs: vec![m.size(), m.size()],
            });
        }
    }
    if layer == 0 || layer > config.num_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} outside 1..={}", config.num_layers)));
    }
    check_routing(routing, layer, &config)?;
    let groups = group_tokens(routing);
    let p = config.drop_prob(layer);

    let h = residual(
        g,
        hidden,
        |g| {
            let normed = per_expert(g, hidden, &groups, |g, e, x| expert_norm(g, layer, e, "ln_attn", x))?;
            shared_attention(g, layer, normed, mask)
        },
        p,
    )?;
    residual(
        g,
        h,
        |g| {
            per_expert(g, h, &groups, |g, e, x| {
                let n = expert_norm(g, layer, e, "ln_ffn", x)?;
                expert_ffn(g, layer, e, n)
            })
        },
        p,
    )
}
