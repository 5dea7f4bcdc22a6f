//! Vocabulary, behavior/exposure records, example windowing and the
//! user-disjoint split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingestion::{EventKind, InteractionLog};

/// Number of reserved token rows that follow the item rows.
pub const NUM_SPECIAL_TOKENS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialToken {
    Start,
    End,
    Cls,
    Pad,
}

impl SpecialToken {
    fn offset(self) -> usize {
        match self {
            SpecialToken::End => 0,
            SpecialToken::Start => 1,
            SpecialToken::Cls => 2,
            SpecialToken::Pad => 3,
        }
    }
}

/// Dense item indexing. Items occupy `[0, |I|)`; END, START, CLS and PAD
/// take the four indices after the last item, so items plus END form the
/// contiguous prefix `[0, |I|]` used as the sequence decoders' output space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    items: IndexSet<String>,
}

impl Vocabulary {
    pub fn from_items<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let items: IndexSet<String> = items.into_iter().map(Into::into).collect();
        if items.is_empty() {
            return Err(Error::EmptyDataset("vocabulary has no items".into()));
        }
        Ok(Self { items })
    }

    /// Number of items `|I|`, excluding special tokens.
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Rows needed in an embedding table: items plus special tokens.
    pub fn size_with_specials(&self) -> usize {
        self.items.len() + NUM_SPECIAL_TOKENS
    }

    pub fn index_of(&self, item: &str) -> Option<usize> {
        self.items.get_index_of(item)
    }

    pub fn item(&self, index: usize) -> Option<&str> {
        self.items.get_index(index).map(String::as_str)
    }

    pub fn token(&self, token: SpecialToken) -> usize {
        self.items.len() + token.offset()
    }

    pub fn is_item(&self, index: usize) -> bool {
        index < self.items.len()
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }

    /// One identifier per line, in index order.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for item in &self.items {
            writeln!(w, "{item}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut items = IndexSet::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if !items.insert(line.clone()) {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate item `{line}`") });
            }
        }
        Self::from_items(items)
    }
}

/// Maps every clicked or impressed item to a dense index in order of first
/// appearance (users in id order, events in time order).
pub fn build_vocabulary(log: &InteractionLog) -> Result<Vocabulary> {
    if log.is_empty() {
        return Err(Error::EmptyDataset("interaction log has no events".into()));
    }
    let mut items = IndexSet::new();
    for (_, events) in log.users() {
        for e in events {
            match &e.kind {
                EventKind::Click(i) => {
                    items.insert(i.clone());
                }
                EventKind::Slate(slate) => {
                    for i in slate {
                        items.insert(i.clone());
                    }
                }
            }
        }
    }
    Vocabulary::from_items(items)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorSequence {
    /// Oldest first, most recent last.
    pub items: Vec<usize>,
    pub timestamps: Option<Vec<i64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExposureSlate {
    pub items: Vec<usize>,
    pub timestamp: i64,
}

/// A paired record: the exposure slate an adversary observes and the past
/// clicks it tries to recover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackExample {
    pub user: String,
    pub behavior: BehaviorSequence,
    pub exposure: ExposureSlate,
}

/// Emits one example per impression slate: the `m` most recent clicks
/// strictly before the slate time, and the first `n` impressions from that
/// slate onward (following slates fill a short one). Anchors with too little
/// history or too few impressions are skipped; windows of the same user may
/// overlap.
pub fn build_examples(log: &InteractionLog, vocab: &Vocabulary, m: usize, n: usize) -> Result<Vec<AttackExample>> {
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("M and N must be positive (got M={m}, N={n})")));
    }
    let lookup = |item: &str| {
        vocab
            .index_of(item)
            .ok_or_else(|| Error::VocabularyMismatch(format!("item `{item}` missing from vocabulary")))
    };
    let mut out = Vec::new();
    for (user, events) in log.users() {
        let mut clicks: Vec<(i64, usize)> = Vec::new();
        let mut slates: Vec<(i64, Vec<usize>)> = Vec::new();
        for e in events {
            match &e.kind {
                EventKind::Click(i) => clicks.push((e.timestamp, lookup(i)?)),
                EventKind::Slate(items) => {
                    slates.push((e.timestamp, items.iter().map(|i| lookup(i)).collect::<Result<_>>()?))
                }
            }
        }
        for (s, (t, _)) in slates.iter().enumerate() {
            let before = clicks.partition_point(|(ct, _)| ct < t);
            if before < m {
                continue;
            }
            let window = &clicks[before - m..before];
            let exposure: Vec<usize> = slates[s..].iter().flat_map(|(_, items)| items.iter().copied()).take(n).collect();
            if exposure.len() < n {
                continue;
            }
            out.push(AttackExample {
                user: user.to_string(),
                behavior: BehaviorSequence {
                    items: window.iter().map(|&(_, i)| i).collect(),
                    timestamps: Some(window.iter().map(|&(ts, _)| ts).collect()),
                },
                exposure: ExposureSlate { items: exposure, timestamp: *t },
            });
        }
    }
    Ok(out)
}

/// Every clicked item per user, in time order.
pub fn user_histories(log: &InteractionLog, vocab: &Vocabulary) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (user, events) in log.users() {
        let mut clicks = Vec::new();
        for e in events {
            if let EventKind::Click(i) = &e.kind {
                clicks.push(
                    vocab
                        .index_of(i)
                        .ok_or_else(|| Error::VocabularyMismatch(format!("item `{i}` missing from vocabulary")))?,
                );
            }
        }
        out.insert(user.to_string(), clicks);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<AttackExample>,
    pub valid: Vec<AttackExample>,
    pub test: Vec<AttackExample>,
    pub user_assignment: BTreeMap<String, Partition>,
}

/// Shuffles the distinct users with `seed` and cuts them by `ratios`
/// (train, valid, test). Each partition gets at least one user; examples
/// follow their user and keep their input order.
pub fn split_by_user(examples: Vec<AttackExample>, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let users: BTreeSet<&str> = examples.iter().map(|e| e.user.as_str()).collect();
    let n = users.len();
    if n < 3 {
        return Err(Error::EmptyDataset(format!("{n} user(s) cannot fill three partitions")));
    }
    let mut users: Vec<String> = users.into_iter().map(str::to_string).collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_valid = ((n as f64 * rv).round() as usize).max(1);
    let n_test = ((n as f64 * rs).round() as usize).max(1);
    let n_train = n.saturating_sub(n_valid + n_test);
    if n_train == 0 {
        return Err(Error::EmptyDataset(format!("{n} users leave no training users")));
    }
    let mut assignment = BTreeMap::new();
    for (i, u) in users.into_iter().enumerate() {
        let p = if i < n_train {
            Partition::Train
        } else if i < n_train + n_valid {
            Partition::Valid
        } else {
            Partition::Test
        };
        assignment.insert(u, p);
    }
    let mut split = DatasetSplit { train: Vec::new(), valid: Vec::new(), test: Vec::new(), user_assignment: BTreeMap::new() };
    for e in examples {
        match assignment[&e.user] {
            Partition::Train => split.train.push(e),
            Partition::Valid => split.valid.push(e),
            Partition::Test => split.test.push(e),
        }
    }
    split.user_assignment = assignment;
    Ok(split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub heads: usize,
    /// Label-smoothing mass; `None` means `1/|I|`.
    pub epsilon: Option<f64>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { m: 5, n: 10, d: 128, batch_size: 400, learning_rate: 0.001, dropout: 0.1, heads: 2, epsilon: None, seed: 0 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.m == 0 {
            problems.push("M must be >= 1".to_string());
        }
        if self.n == 0 {
            problems.push("N must be >= 1".to_string());
        }
        if self.d == 0 {
            problems.push("d must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push("dropout must lie in [0, 1)".to_string());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            problems.push(format!("d ({}) must be divisible by heads ({})", self.d, self.heads));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                problems.push("epsilon must lie in (0, 1)".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn epsilon_for(&self, n_items: usize) -> f64 {
        self.epsilon.unwrap_or(1.0 / n_items as f64)
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_indices(s: &str, line: usize) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse().map_err(|_| Error::Parse { line, msg: format!("bad index `{v}`") }))
        .collect()
}

/// `user TAB behavior(oldest→newest) TAB exposure TAB anchor_ts`, one per line.
pub fn write_examples<W: Write>(mut w: W, examples: &[AttackExample]) -> Result<()> {
    for e in examples {
        writeln!(w, "{}\t{}\t{}\t{}", e.user, join(&e.behavior.items), join(&e.exposure.items), e.exposure.timestamp)?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<AttackExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 4 fields, found {}", f.len()) });
        }
        let ts = f[3].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad anchor timestamp".into() })?;
        out.push(AttackExample {
            user: f[0].to_string(),
            behavior: BehaviorSequence { items: parse_indices(f[1], lineno)?, timestamps: None },
            exposure: ExposureSlate { items: parse_indices(f[2], lineno)?, timestamp: ts },
        });
    }
    Ok(out)
}

/// `user TAB comma-separated click indices`, one user per line.
pub fn write_histories<W: Write>(mut w: W, histories: &BTreeMap<String, Vec<usize>>) -> Result<()> {
    for (u, items) in histories {
        writeln!(w, "{u}\t{}", join(items))?;
    }
    Ok(())
}

pub fn read_histories<R: BufRead>(r: R) -> Result<HashMap<String, Vec<usize>>> {
    let mut out = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (u, items) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected user TAB items".into() })?;
        out.insert(u.to_string(), parse_indices(items, i + 1)?);
    }
    Ok(out)
}
