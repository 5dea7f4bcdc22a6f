//! Point-wise and sequence-wise decoding heads, label smoothing and losses.
//!
//! Every head projects onto the shared item-embedding table (tied output
//! weights). Sequence decoders read `(START, b_M, …, b_1)` and are trained
//! against `(b_M, …, b_1, END)`; their output space is the `|I| + 1` classes
//! made of every item plus END.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoders::EncodedExposure;
use crate::error::{Error, Result};
use crate::nn::layers::{self, multi_head_attention};
use crate::nn::{Graph, Mode, ParamStore, Var};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    Pointwise,
    Lstm,
    Gru,
    Transformer,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [DecoderKind::Pointwise, DecoderKind::Lstm, DecoderKind::Gru, DecoderKind::Transformer];

    pub fn is_sequential(self) -> bool {
        self != DecoderKind::Pointwise
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Pointwise => "pointwise",
            DecoderKind::Lstm => "lstm",
            DecoderKind::Gru => "gru",
            DecoderKind::Transformer => "transformer",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pointwise" | "point-wise" => Ok(DecoderKind::Pointwise),
            "lstm" => Ok(DecoderKind::Lstm),
            "gru" => Ok(DecoderKind::Gru),
            "transformer" | "trm" => Ok(DecoderKind::Transformer),
            other => Err(Error::Config(format!(
                "unknown decoder `{other}` (expected pointwise, lstm, gru or transformer)"
            ))),
        }
    }
}

/// Activation applied to the point-wise logits before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn register_pointwise(store: &mut ParamStore, n_items: usize) {
    store.zeros("pw.bias", 1, n_items);
}

/// Point-wise logits `σ(c·W_d + b)` over the `|I|` items, with `W_d` the
/// transposed item rows of `table`. Apply a softmax for `q`.
pub fn pointwise_logits(g: &mut Graph<'_>, c: Var, table: Var, n_items: usize, activation: Activation) -> Result<Var> {
    let items = g.slice_rows(table, 0, n_items)?;
    let bias = g.param_named("pw.bias")?;
    let z = g.matmul_t(c, items)?;
    let z = g.add_row(z, bias)?;
    Ok(match activation {
        Activation::Tanh => g.tanh(z),
        Activation::Identity => z,
    })
}

/// Label-smoothed target: `(1-ε)/K` on each of the `K` distinct behavior
/// items and `ε/(|I|-K)` elsewhere (`K = M` for duplicate-free behavior).
pub fn smooth_labels(behavior: &[usize], epsilon: f64, n_items: usize) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("label smoothing ε = {epsilon} outside (0, 1)")));
    }
    let mut y = vec![0.0; n_items];
    let mut k = 0;
    for &b in behavior {
        if b >= n_items {
            return Err(Error::IndexOutOfRange { index: b, len: n_items });
        }
        if y[b] == 0.0 {
            y[b] = 1.0;
            k += 1;
        }
    }
    if k == 0 || k >= n_items {
        return Err(Error::Config(format!("behavior of {k} distinct items needs 0 < M < |I| = {n_items}")));
    }
    let on = (1.0 - epsilon) / k as f64;
    let off = epsilon / (n_items - k) as f64;
    for v in &mut y {
        *v = if *v == 1.0 { on } else { off };
    }
    Ok(y)
}

fn guarded_log(q: f64) -> f64 {
    if q < LOG_FLOOR {
        log::warn!("probability {q:e} below {LOG_FLOOR:e}; clamping inside log");
        LOG_FLOOR.ln()
    } else {
        q.ln()
    }
}

/// `-Σ_j y_j log q_j`
pub fn pointwise_loss(y: &[f64], q: &[f64]) -> Result<f64> {
    if y.len() != q.len() {
        return Err(Error::Shape(format!("target length {} vs probability length {}", y.len(), q.len())));
    }
    Ok(-y.iter().zip(q).filter(|(&yj, _)| yj != 0.0).map(|(&yj, &qj)| yj * guarded_log(qj)).sum::<f64>())
}

/// `-Σ_m log q_{m, target_m}` over one-hot targets.
pub fn sequence_loss(q: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if q.len() != targets.len() {
        return Err(Error::Shape(format!("{} probability rows vs {} targets", q.len(), targets.len())));
    }
    let mut loss = 0.0;
    for (row, &t) in q.iter().zip(targets) {
        let p = *row.get(t).ok_or(Error::IndexOutOfRange { index: t, len: row.len() })?;
        loss -= guarded_log(p);
    }
    Ok(loss)
}

pub fn register_sequence_decoder<R: Rng>(store: &mut ParamStore, kind: DecoderKind, d: usize, max_len: usize, n_classes: usize, rng: &mut R) {
    match kind {
        DecoderKind::Pointwise => {}
        DecoderKind::Lstm => {
            for gate in ["i", "f", "g", "o"] {
                store.uniform(&format!("lstm.w_{gate}"), 2 * d, d, d, rng);
                store.zeros(&format!("lstm.p_{gate}"), 1, d);
            }
            register_output_ffn(store, d, rng);
        }
        DecoderKind::Gru => {
            for gate in ["z", "r", "h"] {
                store.uniform(&format!("gru.w_{gate}"), 2 * d, d, d, rng);
                store.zeros(&format!("gru.p_{gate}"), 1, d);
            }
            register_output_ffn(store, d, rng);
        }
        DecoderKind::Transformer => {
            store.uniform("dec.pos", max_len, d, d, rng);
            layers::register_layer_norm(store, "dec.ln1", d);
            layers::register_attention(store, "dec.self", d, rng);
            layers::register_layer_norm(store, "dec.ln2", d);
            layers::register_attention(store, "dec.cross", d, rng);
            layers::register_layer_norm(store, "dec.ln3", d);
            layers::register_feed_forward(store, "dec.ffn", d, d, rng);
            layers::register_layer_norm(store, "dec.lnf", d);
        }
    }
    if kind.is_sequential() {
        store.zeros("out.bias", 1, n_classes);
    }
}

fn register_output_ffn<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) {
    store.uniform("out.w", d, d, d, rng);
    store.zeros("out.b", 1, d);
}

/// Logits of a sequence decoder, one row per input position.
pub struct SequenceLogits {
    pub logits: Var,
    /// Per-head masked self-attention weights (transformer only).
    pub self_attention: Vec<Var>,
    /// Per-head cross-attention weights onto the encoder output (transformer only).
    pub cross_attention: Vec<Var>,
}

/// Runs a sequence decoder over `inputs` (token indices starting with START).
pub fn decode_sequence(
    g: &mut Graph<'_>,
    kind: DecoderKind,
    encoded: &EncodedExposure,
    table: Var,
    inputs: &[usize],
    n_classes: usize,
    heads: usize,
    mode: &mut Mode,
) -> Result<SequenceLogits> {
    if inputs.is_empty() {
        return Err(Error::Shape("decoder input must contain at least START".into()));
    }
    let out_table = g.slice_rows(table, 0, n_classes)?;
    match kind {
        DecoderKind::Pointwise => Err(Error::Config("point-wise decoding has no sequence form".into())),
        DecoderKind::Lstm => {
            let h = lstm_states(g, encoded.summary, table, inputs)?;
            let logits = recurrent_output(g, h, out_table, mode)?;
            Ok(SequenceLogits { logits, self_attention: Vec::new(), cross_attention: Vec::new() })
        }
        DecoderKind::Gru => {
            let h = gru_states(g, encoded.summary, table, inputs)?;
            let logits = recurrent_output(g, h, out_table, mode)?;
            Ok(SequenceLogits { logits, self_attention: Vec::new(), cross_attention: Vec::new() })
        }
        DecoderKind::Transformer => transformer(g, encoded.full, table, out_table, inputs, heads, mode),
    }
}

fn gate(g: &mut Graph<'_>, input: Var, w: &str, p: &str) -> Result<Var> {
    let w = g.param_named(w)?;
    let p = g.param_named(p)?;
    let z = g.matmul(input, w)?;
    g.add_row(z, p)
}

/// Hidden states `h_1..h_T` stacked as a `T×d` matrix. `h_0` and the cell
/// `g_0` both start from the encoder summary.
fn lstm_states(g: &mut Graph<'_>, init: Var, table: Var, inputs: &[usize]) -> Result<Var> {
    let mut h = init;
    let mut cell = init;
    let mut states = Vec::with_capacity(inputs.len());
    for &tok in inputs {
        let x = g.gather(table, &[tok])?;
        let hx = g.concat_cols(&[h, x])?;
        let i = gate(g, hx, "lstm.w_i", "lstm.p_i")?;
        let i = g.sigmoid(i);
        let f = gate(g, hx, "lstm.w_f", "lstm.p_f")?;
        let f = g.sigmoid(f);
        let cand = gate(g, hx, "lstm.w_g", "lstm.p_g")?;
        let cand = g.tanh(cand);
        let o = gate(g, hx, "lstm.w_o", "lstm.p_o")?;
        let o = g.sigmoid(o);
        let write = g.mul(i, cand)?;
        let keep = g.mul(f, cell)?;
        cell = g.add(write, keep)?;
        let squashed = g.tanh(cell);
        h = g.mul(o, squashed)?;
        states.push(h);
    }
    g.concat_rows(&states)
}

fn gru_states(g: &mut Graph<'_>, init: Var, table: Var, inputs: &[usize]) -> Result<Var> {
    let mut h = init;
    let mut states = Vec::with_capacity(inputs.len());
    for &tok in inputs {
        let x = g.gather(table, &[tok])?;
        let hx = g.concat_cols(&[h, x])?;
        let z = gate(g, hx, "gru.w_z", "gru.p_z")?;
        let z = g.sigmoid(z);
        let r = gate(g, hx, "gru.w_r", "gru.p_r")?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let rhx = g.concat_cols(&[rh, x])?;
        let cand = gate(g, rhx, "gru.w_h", "gru.p_h")?;
        let cand = g.tanh(cand);
        let carry_gate = g.affine(z, -1.0, 1.0);
        let carry = g.mul(carry_gate, h)?;
        let update = g.mul(z, cand)?;
        h = g.add(carry, update)?;
        states.push(h);
    }
    g.concat_rows(&states)
}

/// `FFN(h_t)` followed by the tied projection onto the output table.
fn recurrent_output(g: &mut Graph<'_>, h: Var, out_table: Var, mode: &mut Mode) -> Result<Var> {
    let h = mode.dropout(g, h);
    let w = g.param_named("out.w")?;
    let b = g.param_named("out.b")?;
    let proj = g.matmul(h, w)?;
    let proj = g.add_row(proj, b)?;
    tied_logits(g, proj, out_table)
}

fn tied_logits(g: &mut Graph<'_>, x: Var, out_table: Var) -> Result<Var> {
    let bias = g.param_named("out.bias")?;
    let logits = g.matmul_t(x, out_table)?;
    g.add_row(logits, bias)
}

fn transformer(
    g: &mut Graph<'_>,
    memory: Var,
    table: Var,
    out_table: Var,
    inputs: &[usize],
    heads: usize,
    mode: &mut Mode,
) -> Result<SequenceLogits> {
    let t = inputs.len();
    let pos_all = g.param_named("dec.pos")?;
    if t > g.shape(pos_all).0 {
        return Err(Error::Shape(format!("decoder input of length {t} exceeds {} positions", g.shape(pos_all).0)));
    }
    let emb = g.gather(table, inputs)?;
    let pos = g.slice_rows(pos_all, 0, t)?;
    let x = g.add(emb, pos)?;
    let x = mode.dropout(g, x);

    let mut self_attention = Vec::new();
    let x = layers::pre_norm_residual(g, x, "dec.ln1", mode, |g, h| {
        let out = multi_head_attention(g, h, h, "dec.self", heads, true)?;
        self_attention = out.weights;
        Ok(out.output)
    })?;
    let mut cross_attention = Vec::new();
    let x = layers::pre_norm_residual(g, x, "dec.ln2", mode, |g, h| {
        let out = multi_head_attention(g, h, memory, "dec.cross", heads, false)?;
        cross_attention = out.weights;
        Ok(out.output)
    })?;
    let x = layers::pre_norm_residual(g, x, "dec.ln3", mode, |g, h| layers::feed_forward(g, h, "dec.ffn"))?;
    let x = layers::layer_norm(g, x, "dec.lnf")?;
    let logits = tied_logits(g, x, out_table)?;
    Ok(SequenceLogits { logits, self_attention, cross_attention })
}
