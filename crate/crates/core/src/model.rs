//! The encoder–decoder attack model: parameters, losses, greedy inference,
//! checkpoints and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::datamodel::{AttackExample, Vocabulary, NUM_SPECIAL_TOKENS};
use crate::decoders::{self, Activation, DecoderKind};
use crate::encoders::{self, EmbeddingTable, EncodedExposure, EncoderKind};
use crate::error::{Error, Result};
use crate::metrics::{top_k, RankedInference};
use crate::nn::{softmax, Graph, Mode, ParamStore, Tensor, Var};

pub const EMBEDDING: &str = "emb";
const CHECKPOINT_MAGIC: &[u8; 4] = b"LKCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture and loss settings; everything needed to rebuild the
/// parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub n_items: usize,
    /// Behavior length `M`.
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Label-smoothing mass for point-wise targets.
    pub epsilon: f64,
    /// Also smooth the one-hot sequence targets with `epsilon`.
    pub sequence_smoothing: bool,
}

impl ModelSpec {
    pub fn new(encoder: EncoderKind, decoder: DecoderKind, n_items: usize, m: usize, d: usize) -> Self {
        Self {
            encoder,
            decoder,
            n_items,
            m,
            d,
            heads: 2,
            dropout: 0.1,
            activation: Activation::Tanh,
            epsilon: 1.0 / n_items.max(1) as f64,
            sequence_smoothing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items <= self.m {
            return Err(Error::Config(format!("|I| = {} must exceed M = {}", self.n_items, self.m)));
        }
        if self.m == 0 || self.d == 0 {
            return Err(Error::Config("M and d must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} not divisible by {} heads", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        Ok(())
    }

    pub fn end_token(&self) -> usize {
        self.n_items
    }

    pub fn start_token(&self) -> usize {
        self.n_items + 1
    }

    pub fn cls_token(&self) -> usize {
        self.n_items + 2
    }

    /// Output classes of the sequence decoders: items plus END.
    pub fn n_classes(&self) -> usize {
        self.n_items + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    spec: ModelSpec,
    params: ParamStore,
}

/// Teacher-forced per-position probabilities, `(M+1)×(|I|+1)` for sequence
/// decoders and `1×|I|` for the point-wise head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub probs: Tensor,
}

impl AttackModel {
    /// Fresh parameters: uniform in `±1/sqrt(fan-in)` for matrices, zero
    /// biases, unit layer-norm gains.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.uniform(EMBEDDING, spec.n_items + NUM_SPECIAL_TOKENS, spec.d, spec.d, &mut rng);
        if spec.encoder == EncoderKind::Attention {
            encoders::register_attention_encoder(&mut params, spec.d, &mut rng);
        }
        match spec.decoder {
            DecoderKind::Pointwise => decoders::register_pointwise(&mut params, spec.n_items),
            kind => decoders::register_sequence_decoder(&mut params, kind, spec.d, spec.m + 1, spec.n_classes(), &mut rng),
        }
        Ok(Self { spec, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let reference = Self::new(spec.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in reference.params.iter() {
            let got = params.by_name(name).map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Item rows of the shared embedding table.
    pub fn item_embeddings(&self) -> EmbeddingTable {
        let table = self.params.by_name(EMBEDDING).expect("embedding registered");
        let data = table.data()[..self.spec.n_items * self.spec.d].to_vec();
        EmbeddingTable::new(Tensor::from_vec(self.spec.n_items, self.spec.d, data).expect("sized"))
            .expect("finite embeddings")
    }

    fn check_slate(&self, slate: &[usize]) -> Result<()> {
        if slate.is_empty() {
            return Err(Error::EmptyDataset("empty exposure slate".into()));
        }
        if let Some(&bad) = slate.iter().find(|&&i| i >= self.spec.n_items) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.spec.n_items });
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<'_>, slate: &[usize], mode: &mut Mode) -> Result<EncodedExposure> {
        self.check_slate(slate)?;
        let table = g.param_named(EMBEDDING)?;
        encoders::encode(g, self.spec.encoder, table, slate, self.spec.cls_token(), self.spec.heads, mode)
    }

    /// `(START, b_M, …, b_1)` and `(b_M, …, b_1, END)`.
    pub fn sequence_io(&self, behavior: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = vec![self.spec.start_token()];
        inputs.extend(behavior.iter().rev());
        let mut targets: Vec<usize> = behavior.iter().rev().copied().collect();
        targets.push(self.spec.end_token());
        (inputs, targets)
    }

    fn sequence_targets(&self, targets: &[usize]) -> Tensor {
        let c = self.spec.n_classes();
        let mut y = Tensor::zeros(targets.len(), c);
        for (r, &t) in targets.iter().enumerate() {
            if self.spec.sequence_smoothing {
                let off = self.spec.epsilon / (c - 1) as f64;
                y.row_mut(r).fill(off);
                y.set(r, t, 1.0 - self.spec.epsilon);
            } else {
                y.set(r, t, 1.0);
            }
        }
        y
    }

    /// Output logits of the decoder for one example (teacher forcing).
    pub fn logits(&self, g: &mut Graph<'_>, example: &AttackExample, mode: &mut Mode) -> Result<Var> {
        let behavior = &example.behavior.items;
        if behavior.len() != self.spec.m {
            return Err(Error::Shape(format!("behavior has {} items, model expects M = {}", behavior.len(), self.spec.m)));
        }
        if let Some(&bad) = behavior.iter().find(|&&i| i >= self.spec.n_items) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.spec.n_items });
        }
        let encoded = self.encode(g, &example.exposure.items, mode)?;
        let table = g.param_named(EMBEDDING)?;
        match self.spec.decoder {
            DecoderKind::Pointwise => {
                let c = mode.dropout(g, encoded.summary);
                decoders::pointwise_logits(g, c, table, self.spec.n_items, self.spec.activation)
            }
            kind => {
                let (inputs, _) = self.sequence_io(behavior);
                let out = decoders::decode_sequence(g, kind, &encoded, table, &inputs, self.spec.n_classes(), self.spec.heads, mode)?;
                Ok(out.logits)
            }
        }
    }

    /// Builds the training loss of one example on `g`.
    pub fn loss(&self, g: &mut Graph<'_>, example: &AttackExample, mode: &mut Mode) -> Result<Var> {
        let logits = self.logits(g, example, mode)?;
        let targets = match self.spec.decoder {
            DecoderKind::Pointwise => {
                let y = decoders::smooth_labels(&example.behavior.items, self.spec.epsilon, self.spec.n_items)?;
                Tensor::row_vector(y)
            }
            _ => {
                let (_, targets) = self.sequence_io(&example.behavior.items);
                self.sequence_targets(&targets)
            }
        };
        g.softmax_cross_entropy(logits, targets)
    }

    /// Loss with dropout off.
    pub fn eval_loss(&self, example: &AttackExample) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let loss = self.loss(&mut g, example, &mut Mode::eval())?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Teacher-forced probabilities with dropout off.
    pub fn decode(&self, example: &AttackExample) -> Result<DecodeOutput> {
        let mut g = Graph::new(&self.params);
        let logits = self.logits(&mut g, example, &mut Mode::eval())?;
        let l = g.value(logits);
        let rows: Vec<Vec<f64>> = (0..l.rows()).map(|r| softmax(l.row(r))).collect();
        Ok(DecodeOutput { probs: Tensor::from_rows(&rows)? })
    }

    /// Attack inference on one slate. Sequence decoders run `M` greedy steps,
    /// each fed the previous step's best item; END and the other special
    /// tokens are never candidates.
    pub fn infer(&self, slate: &[usize]) -> Result<RankedInference> {
        let mut g = Graph::new(&self.params);
        let mut mode = Mode::eval();
        let encoded = self.encode(&mut g, slate, &mut mode)?;
        let table = g.param_named(EMBEDDING)?;
        let n_items = self.spec.n_items;
        match self.spec.decoder {
            DecoderKind::Pointwise => {
                let logits = decoders::pointwise_logits(&mut g, encoded.summary, table, n_items, self.spec.activation)?;
                Ok(RankedInference::Pointwise(softmax(g.value(logits).data())))
            }
            kind => {
                let mut inputs = vec![self.spec.start_token()];
                let mut steps = Vec::with_capacity(self.spec.m);
                for _ in 0..self.spec.m {
                    let out = decoders::decode_sequence(&mut g, kind, &encoded, table, &inputs, self.spec.n_classes(), self.spec.heads, &mut mode)?;
                    let logits = g.value(out.logits);
                    let probs = softmax(logits.row(logits.rows() - 1));
                    let scores = probs[..n_items].to_vec();
                    if scores.iter().any(|s| !s.is_finite()) {
                        return Err(Error::NonFinite("decoder output".into()));
                    }
                    inputs.push(top_k(&scores, 1)[0]);
                    steps.push(scores);
                }
                Ok(RankedInference::Sequencewise(steps))
            }
        }
    }

    pub fn save(&self, dir: &Path, vocab_fingerprint: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut ckpt = Vec::new();
        write_checkpoint(&mut ckpt, &self.params)?;
        fs::write(dir.join("model.ckpt"), ckpt)?;
        fs::write(dir.join("manifest.txt"), self.manifest(vocab_fingerprint))?;
        Ok(())
    }

    pub fn manifest(&self, vocab_fingerprint: &str) -> String {
        let s = &self.spec;
        format!(
            "encoder = {}\ndecoder = {}\nn_items = {}\nm = {}\nd = {}\nheads = {}\ndropout = {}\nactivation = {}\nepsilon = {}\nsequence_smoothing = {}\nvocab_sha256 = {}\n",
            s.encoder, s.decoder, s.n_items, s.m, s.d, s.heads, s.dropout, s.activation, s.epsilon, s.sequence_smoothing, vocab_fingerprint
        )
    }

    /// Loads a saved model and returns it with the recorded vocabulary fingerprint.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let kv = parse_key_values(&manifest)?;
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}` in manifest"))) };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}` in manifest"))) };
        let spec = ModelSpec {
            encoder: get("encoder")?.parse()?,
            decoder: get("decoder")?.parse()?,
            n_items: num("n_items")?,
            m: num("m")?,
            d: num("d")?,
            heads: num("heads")?,
            dropout: float("dropout")?,
            activation: get("activation")?.parse()?,
            epsilon: float("epsilon")?,
            sequence_smoothing: get("sequence_smoothing")? == "true",
        };
        let mut bytes = Vec::new();
        fs::File::open(dir.join("model.ckpt"))?.read_to_end(&mut bytes)?;
        let params = read_checkpoint(&bytes[..])?;
        Ok((Self::from_parts(spec, params)?, get("vocab_sha256")?))
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Binary checkpoint: magic `LKCK`, version, parameter count, then per
/// parameter its name, `rows`, `cols` and the values as little-endian `f32`.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32_of(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_of(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32_of(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = u32_of(&mut r)? as usize;
        let cols = u32_of(&mut r)? as usize;
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        store.insert(&name, Tensor::from_vec(rows, cols, data)?);
    }
    Ok(store)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn vocabulary_fingerprint(vocab: &Vocabulary) -> String {
    let mut buf = Vec::new();
    vocab.write(&mut buf).expect("in-memory write");
    sha256_hex(&buf)
}

/// SHA-256 of the serialized parameters.
pub fn checkpoint_hash(params: &ParamStore) -> String {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params).expect("in-memory write");
    sha256_hex(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BehaviorSequence, ExposureSlate};

    fn example() -> AttackExample {
        AttackExample {
            user: "u".into(),
            behavior: BehaviorSequence { items: vec![1, 2, 3], timestamps: None },
            exposure: ExposureSlate { items: vec![4, 5, 6, 7], timestamp: 0 },
        }
    }

    #[test]
    fn sequence_io_reverses_behavior() {
        let m = AttackModel::new(ModelSpec::new(EncoderKind::Mean, DecoderKind::Gru, 20, 3, 8), 0).unwrap();
        let (inputs, targets) = m.sequence_io(&[1, 2, 3]);
        assert_eq!(inputs, vec![21, 3, 2, 1]);
        assert_eq!(targets, vec![3, 2, 1, 20]);
    }

    #[test]
    fn every_combination_builds_and_runs() {
        for enc in EncoderKind::ALL {
            for dec in DecoderKind::ALL {
                let m = AttackModel::new(ModelSpec::new(enc, dec, 20, 3, 8), 1).unwrap();
                assert!(m.eval_loss(&example()).unwrap() > 0.0);
                let out = m.decode(&example()).unwrap();
                let rows = if dec.is_sequential() { 4 } else { 1 };
                assert_eq!(out.probs.rows(), rows);
                match m.infer(&[4, 5, 6, 7]).unwrap() {
                    RankedInference::Pointwise(s) => assert_eq!(s.len(), 20),
                    RankedInference::Sequencewise(rows) => {
                        assert_eq!(rows.len(), 3);
                        assert!(rows.iter().all(|r| r.len() == 20));
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_slate_is_rejected() {
        let m = AttackModel::new(ModelSpec::new(EncoderKind::Mean, DecoderKind::Pointwise, 20, 3, 8), 0).unwrap();
        assert!(matches!(m.infer(&[25]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let mut m = AttackModel::new(ModelSpec::new(EncoderKind::Attention, DecoderKind::Transformer, 20, 3, 8), 3).unwrap();
        m.params_mut().round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "abc").unwrap();
        let (back, fp) = AttackModel::load(dir.path()).unwrap();
        assert_eq!(fp, "abc");
        assert_eq!(back, m);
    }

    #[test]
    fn from_parts_checks_layout() {
        let a = AttackModel::new(ModelSpec::new(EncoderKind::Mean, DecoderKind::Lstm, 20, 3, 8), 0).unwrap();
        let other = ModelSpec::new(EncoderKind::Mean, DecoderKind::Gru, 20, 3, 8);
        assert!(AttackModel::from_parts(other, a.params().clone()).is_err());
    }
}
