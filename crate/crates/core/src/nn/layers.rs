//! Parameter registration and forward code for the shared transformer pieces.

use rand::Rng;

use super::{Graph, Mode, ParamStore, Var};
use crate::error::{Error, Result};

pub fn register_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.ones(&format!("{prefix}.gain"), 1, d);
    store.zeros(&format!("{prefix}.bias"), 1, d);
}

pub fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param_named(&format!("{prefix}.gain"))?;
    let bias = g.param_named(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Query/key/value/output projections, each `d×d`. Heads own contiguous
/// column blocks of width `d / heads`.
pub fn register_attention<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.uniform(&format!("{prefix}.{w}"), d, d, d, rng);
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `queries×keys` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention of `queries` over `keys_values`.
/// Scores are divided by `sqrt(d)` for the full model width `d`.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    queries: Var,
    keys_values: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<AttentionOutput> {
    let d = g.shape(queries).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let wq = g.param_named(&format!("{prefix}.wq"))?;
    let wk = g.param_named(&format!("{prefix}.wk"))?;
    let wv = g.param_named(&format!("{prefix}.wv"))?;
    let wo = g.param_named(&format!("{prefix}.wo"))?;
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys_values, wk)?;
    let v = g.matmul(keys_values, wv)?;
    let width = d / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * width, width)?;
        let kh = g.slice_cols(k, h * width, width)?;
        let vh = g.slice_cols(v, h * width, width)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores, causal);
        weights.push(attn);
        outs.push(g.matmul_order_free(attn, vh)?);
    }
    let concat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = g.matmul(concat, wo)?;
    Ok(AttentionOutput { output, weights })
}

/// Two-layer position-wise feed-forward block with a rectified-linear hidden layer.
pub fn register_feed_forward<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut R) {
    store.uniform(&format!("{prefix}.w1"), d, hidden, d, rng);
    store.zeros(&format!("{prefix}.b1"), 1, hidden);
    store.uniform(&format!("{prefix}.w2"), hidden, d, hidden, rng);
    store.zeros(&format!("{prefix}.b2"), 1, d);
}

pub fn feed_forward(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w1 = g.param_named(&format!("{prefix}.w1"))?;
    let b1 = g.param_named(&format!("{prefix}.b1"))?;
    let w2 = g.param_named(&format!("{prefix}.w2"))?;
    let b2 = g.param_named(&format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// `x + dropout(sublayer(LayerNorm(x)))`
pub fn pre_norm_residual(
    g: &mut Graph<'_>,
    x: Var,
    ln_prefix: &str,
    mode: &mut Mode,
    sublayer: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
) -> Result<Var> {
    let normed = layer_norm(g, x, ln_prefix)?;
    let out = sublayer(g, normed)?;
    let out = mode.dropout(g, out);
    g.add(x, out)
}
