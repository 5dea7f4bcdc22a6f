//! Slate encoders: mean pooling, max pooling, and a single position-free
//! pre-norm self-attention block read out through a CLS row.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::datamodel::ExposureSlate;
use crate::error::{Error, Result};
use crate::nn::layers::{self, multi_head_attention};
use crate::nn::{Graph, Mode, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Mean,
    Max,
    Attention,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Mean, EncoderKind::Max, EncoderKind::Attention];
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Mean => "mean",
            EncoderKind::Max => "max",
            EncoderKind::Attention => "attention",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(EncoderKind::Mean),
            "max" => Ok(EncoderKind::Max),
            "attention" | "att" | "self-attention" => Ok(EncoderKind::Attention),
            other => Err(Error::Config(format!("unknown encoder `{other}` (expected mean, max or attention)"))),
        }
    }
}

/// Item embedding matrix, one row per vocabulary index (special tokens included).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable(Tensor);

impl EmbeddingTable {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(Self(matrix))
    }

    pub fn lookup(&self, index: usize) -> Result<&[f64]> {
        if index >= self.0.rows() {
            return Err(Error::IndexOutOfRange { index, len: self.0.rows() });
        }
        Ok(self.0.row(index))
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

/// Stacks the embeddings of the slate items into an `N×d` matrix.
pub fn embed_slate(slate: &ExposureSlate, table: &EmbeddingTable) -> Result<Tensor> {
    let rows = slate.items.iter().map(|&i| table.lookup(i).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, table.dim()));
    }
    Tensor::from_rows(&rows)
}

/// Latent slate representation. `summary` is `1×d`; `full` is the matrix
/// a sequence decoder cross-attends to (the non-CLS rows for the attention
/// encoder, the summary itself for the pooling encoders).
#[derive(Clone, Debug)]
pub struct EncodedExposure {
    pub summary: Var,
    pub full: Var,
    /// Per-head attention weights, present for the attention encoder.
    pub attention: Vec<Var>,
}

pub fn encode_mean(g: &mut Graph<'_>, e: Var) -> Result<Var> {
    if g.shape(e).0 == 0 {
        return Err(Error::EmptyDataset("cannot mean-pool an empty slate".into()));
    }
    g.mean_rows(e)
}

pub fn encode_max(g: &mut Graph<'_>, e: Var) -> Result<Var> {
    if g.shape(e).0 == 0 {
        return Err(Error::EmptyDataset("cannot max-pool an empty slate".into()));
    }
    g.max_rows(e)
}

pub fn register_attention_encoder<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) {
    layers::register_layer_norm(store, "enc.ln1", d);
    layers::register_attention(store, "enc.mha", d, rng);
    layers::register_layer_norm(store, "enc.ln2", d);
    layers::register_feed_forward(store, "enc.ffn", d, d, rng);
}

/// `Ẽ = X + dropout(MHA(LN(X)))`, `C = Ẽ + dropout(FFN(LN(Ẽ)))` with
/// `X = [cls; E]` and no positional signal.
pub fn encode_self_attention(g: &mut Graph<'_>, e: Var, cls: Var, heads: usize, mode: &mut Mode) -> Result<EncodedExposure> {
    let (n, d) = g.shape(e);
    if n == 0 {
        return Err(Error::EmptyDataset("cannot encode an empty slate".into()));
    }
    if g.shape(cls) != (1, d) {
        return Err(Error::Shape(format!("CLS row {:?} does not match width {d}", g.shape(cls))));
    }
    let x = g.concat_rows(&[cls, e])?;
    let mut attention = Vec::new();
    let x = layers::pre_norm_residual(g, x, "enc.ln1", mode, |g, h| {
        let out = multi_head_attention(g, h, h, "enc.mha", heads, false)?;
        attention = out.weights;
        Ok(out.output)
    })?;
    let c = layers::pre_norm_residual(g, x, "enc.ln2", mode, |g, h| layers::feed_forward(g, h, "enc.ffn"))?;
    if !g.value(c).is_finite() {
        return Err(Error::NonFinite("self-attention encoder output".into()));
    }
    let summary = g.slice_rows(c, 0, 1)?;
    let full = g.slice_rows(c, 1, n)?;
    Ok(EncodedExposure { summary, full, attention })
}

/// Embeds the slate from `table` (a `|vocab|×d` node) and encodes it.
pub fn encode(
    g: &mut Graph<'_>,
    kind: EncoderKind,
    table: Var,
    slate: &[usize],
    cls_index: usize,
    heads: usize,
    mode: &mut Mode,
) -> Result<EncodedExposure> {
    let e = g.gather(table, slate)?;
    match kind {
        EncoderKind::Mean => {
            let c = encode_mean(g, e)?;
            Ok(EncodedExposure { summary: c, full: c, attention: Vec::new() })
        }
        EncoderKind::Max => {
            let c = encode_max(g, e)?;
            Ok(EncodedExposure { summary: c, full: c, attention: Vec::new() })
        }
        EncoderKind::Attention => {
            let cls = g.gather(table, &[cls_index])?;
            encode_self_attention(g, e, cls, heads, mode)
        }
    }
}
