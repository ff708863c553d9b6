use serde::Serialize;

use super::config::MultiwayConfig;

/// Parameter totals by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub v_ffn: u64,
    pub l_ffn: u64,
    pub vl_ffn: u64,
    pub shared_attention: u64,
    /// Embeddings, layer norms, pooler, pretraining heads, retrieval projections.
    pub other: u64,
    pub total: u64,
}

/// A linear map `a×b` with bias holds `ab + b` parameters.
fn linear(a: u64, b: u64) -> u64 {
    a * b + b
}

/// Closed-form count that matches what `init_params` allocates.
pub fn count_params(config: &MultiwayConfig) -> ParamBreakdown {
    let l = config.num_layers as u64;
    let k = config.vl_expert_layers as u64;
    let h = config.hidden as u64;
    let m = config.ffn_inner as u64;
    let ffn = linear(h, m) + linear(m, h);
    let v_ffn = l * ffn;
    let vl_ffn = k * ffn;
    let shared_attention = l * 4 * linear(h, h);

    let cells = config.num_patches() as u64;
    let embeddings = config.text_vocab as u64 * h
        + config.max_seq as u64 * h
        + linear(config.patch_dim() as u64, h)
        + 2 * h
        + (cells + 1) * h;
    // two norms (gain + bias) per expert
    let norms = (2 * l + k) * 4 * h + 2 * h;
    let heads = linear(h, h)
        + linear(h, config.text_vocab as u64)
        + linear(h, config.visual_vocab as u64)
        + 2 * linear(h, h)
        + 1;
    let other = embeddings + norms + heads;
    ParamBreakdown {
        v_ffn,
        l_ffn: v_ffn,
        vl_ffn,
        shared_attention,
        other,
        total: 2 * v_ffn + vl_ffn + shared_attention + other,
    }
}

/// `1234567` → `"1,234,567"`.
pub fn with_commas(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Rounded human form: `692M`, `1.9B`.
pub fn abbreviate(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.1}B", n as f64 / 1e9)
    } else if n >= 1_000_000 {
        format!("{}M", (n as f64 / 1e6).round() as u64)
    } else if n >= 1_000 {
        format!("{}K", (n as f64 / 1e3).round() as u64)
    } else {
        n.to_string()
    }
}

impl std::fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let rows = [
            ("V-FFN", self.v_ffn),
            ("L-FFN", self.l_ffn),
            ("VL-FFN", self.vl_ffn),
            ("Shared attention", self.shared_attention),
            ("Other", self.other),
            ("Total", self.total),
        ];
        for (name, n) in rows {
            writeln!(f, "{name} {} (~{})", with_commas(n), abbreviate(n))?;
        }
        Ok(())
    }
}
