//! Exposure perturbation: choose `m = ⌈N·L⌉` slate positions, overwrite them
//! with sampled items, and measure what the attack still recovers and how
//! many exposed items the user actually clicked.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::io::BufRead;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::datamodel::{AttackExample, Vocabulary};
use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::{score_inference, MetricsReport, MrrMode, MERGE_ORDER};
use crate::model::AttackModel;
use crate::nn::dot;
use crate::seeds;

/// Guard on the cosine denominator.
pub const OMEGA: f64 = 1e-8;

/// Slack absorbing float error in `N·L` before the ceiling, so that a grid
/// value such as `3.0 * 0.2` still gives `⌈10 · 0.6⌉ = 6`.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SelectionKind {
    Random,
    /// Weights `1 − s(u,i)`: dissimilar positions go first.
    Similarity,
    /// Weights `s(u,i)`: similar positions go first.
    SimilarityInverted,
}

impl SelectionKind {
    pub const ALL: [SelectionKind; 3] = [SelectionKind::Random, SelectionKind::Similarity, SelectionKind::SimilarityInverted];
}

impl fmt::Display for SelectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionKind::Random => "random",
            SelectionKind::Similarity => "similarity",
            SelectionKind::SimilarityInverted => "similarity-inverted",
        })
    }
}

impl FromStr for SelectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(SelectionKind::Random),
            "similarity" | "dissimilar" => Ok(SelectionKind::Similarity),
            "similarity-inverted" | "similar" => Ok(SelectionKind::SimilarityInverted),
            other => Err(Error::Config(format!("unknown selection `{other}` (expected random, similarity or similarity-inverted)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReplacementKind {
    Uniform,
    OverallPopularity,
    InBatchPopularity,
}

impl ReplacementKind {
    pub const ALL: [ReplacementKind; 3] = [ReplacementKind::Uniform, ReplacementKind::OverallPopularity, ReplacementKind::InBatchPopularity];
}

impl fmt::Display for ReplacementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplacementKind::Uniform => "uniform",
            ReplacementKind::OverallPopularity => "popularity",
            ReplacementKind::InBatchPopularity => "in-batch-popularity",
        })
    }
}

impl FromStr for ReplacementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(ReplacementKind::Uniform),
            "popularity" | "overall" | "overall-popularity" => Ok(ReplacementKind::OverallPopularity),
            "in-batch-popularity" | "in-batch" | "in_batch" => Ok(ReplacementKind::InBatchPopularity),
            other => Err(Error::Config(format!("unknown replacement `{other}` (expected uniform, popularity or in-batch-popularity)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionPlan {
    pub l: f64,
    pub m: usize,
    pub positions: Vec<usize>,
    pub selection: SelectionKind,
    pub replacement: ReplacementKind,
}

/// `⌈N·L⌉`.
pub fn replacement_count(n: usize, l: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::Config(format!("replacement proportion {l} outside [0, 1]")));
    }
    Ok(((n as f64 * l - CEIL_SLACK).ceil().max(0.0) as usize).min(n))
}

/// Draws `m` distinct indices without replacement, each draw proportional to
/// the remaining weights (Efraimidis–Spirakis keys `u^(1/w)`, top `m`).
/// Zero-weight indices are only taken once every positive weight is used,
/// in uniformly random order.
pub fn weighted_sample_without_replacement<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m > weights.len() {
        return Err(Error::Config(format!("cannot draw {m} of {} positions", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Config(format!("invalid sampling weight {w}")));
    }
    // Keys compared as (positive weight first, log(u)/w descending).
    let mut keyed: Vec<(bool, f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            if w > 0.0 {
                (true, u.ln() / w, i)
            } else {
                (false, u.ln(), i)
            }
        })
        .collect();
    keyed.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    Ok(keyed.into_iter().take(m).map(|k| k.2).collect())
}

/// `⌈N·L⌉` positions uniformly without replacement.
pub fn select_positions_random<R: Rng + ?Sized>(n: usize, l: f64, rng: &mut R) -> Result<Vec<usize>> {
    let m = replacement_count(n, l)?;
    weighted_sample_without_replacement(&vec![1.0; n], m, rng)
}

/// `⌈N·L⌉` positions drawn with weights `1 − s` (or `s` when `invert`).
pub fn select_positions_similarity<R: Rng + ?Sized>(scores: &SimilarityScores, l: f64, invert: bool, rng: &mut R) -> Result<Vec<usize>> {
    let n = scores.s.len();
    let m = replacement_count(n, l)?;
    if m > 0 && n == 0 {
        return Err(Error::EmptyDataset("similarity selection on an empty slate".into()));
    }
    let weights: Vec<f64> = scores.s.iter().map(|&s| if invert { s } else { (1.0 - s).max(0.0) }).collect();
    weighted_sample_without_replacement(&weights, m, rng)
}

/// Item embeddings used to judge similarity.
pub trait EmbeddingProvider {
    fn n_items(&self) -> usize;
    fn dim(&self) -> usize;
    fn embedding(&self, item: usize) -> Result<&[f64]>;
    fn provenance(&self) -> &str;
}

impl EmbeddingProvider for EmbeddingTable {
    fn n_items(&self) -> usize {
        self.rows()
    }

    fn dim(&self) -> usize {
        EmbeddingTable::dim(self)
    }

    fn embedding(&self, item: usize) -> Result<&[f64]> {
        self.lookup(item)
    }

    fn provenance(&self) -> &str {
        "attack-model"
    }
}

/// Embeddings read from a text file of `item_id v1 … vd` rows (whitespace
/// separated), e.g. exported from a separately trained recommender.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalEmbeddings {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl ExternalEmbeddings {
    pub fn read<R: BufRead>(reader: R, vocab: &Vocabulary) -> Result<Self> {
        let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(id) = fields.next() else { continue };
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad number `{f}`") }))
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse { line: i + 1, msg: "expected finite embedding values".into() });
            }
            if *dim.get_or_insert(values.len()) != values.len() {
                return Err(Error::Parse { line: i + 1, msg: format!("row has {} values, expected {}", values.len(), dim.unwrap_or(0)) });
            }
            if let Some(idx) = vocab.index_of(id) {
                found.insert(idx, values);
            }
        }
        let dim = dim.ok_or_else(|| Error::EmptyDataset("embedding file has no rows".into()))?;
        let rows = (0..vocab.n_items())
            .map(|i| {
                found
                    .remove(&i)
                    .ok_or_else(|| Error::VocabularyMismatch(format!("no embedding for item `{}`", vocab.item(i).unwrap_or("?"))))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, dim })
    }
}

impl EmbeddingProvider for ExternalEmbeddings {
    fn n_items(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embedding(&self, item: usize) -> Result<&[f64]> {
        self.rows.get(item).map(Vec::as_slice).ok_or(Error::IndexOutOfRange { index: item, len: self.rows.len() })
    }

    fn provenance(&self) -> &str {
        "external-file"
    }
}

/// Mean embedding of the user's behavior items.
pub fn user_preference_vector(history: &[usize], provider: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::EmptyDataset("empty behavior history".into()));
    }
    let mut b = vec![0.0; provider.dim()];
    for &item in history {
        for (acc, v) in b.iter_mut().zip(provider.embedding(item)?) {
            *acc += v;
        }
    }
    let n = history.len() as f64;
    b.iter_mut().for_each(|x| *x /= n);
    Ok(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScores {
    pub b_u: Vec<f64>,
    /// Softmax over slate positions of the guarded cosine similarity.
    pub s: Vec<f64>,
    pub omega: f64,
}

pub fn similarity_scores(b_u: &[f64], slate: &[usize], provider: &dyn EmbeddingProvider, omega: f64) -> Result<SimilarityScores> {
    if !(omega > 0.0) {
        return Err(Error::Config(format!("omega must be positive, got {omega}")));
    }
    let b_norm = dot(b_u, b_u).sqrt();
    let cos = slate
        .iter()
        .map(|&i| {
            let e = provider.embedding(i)?;
            Ok(dot(e, b_u) / (dot(e, e).sqrt() * b_norm).max(omega))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SimilarityScores { b_u: b_u.to_vec(), s: crate::nn::softmax(&cos), omega })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PopularityMode {
    Overall,
    InBatch,
}

/// Impression counts per item.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityModel {
    overall: Vec<u64>,
}

impl PopularityModel {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { overall: counts }
    }

    /// Counts every slate item of `examples` (the training partition).
    pub fn from_examples(examples: &[AttackExample], n_items: usize) -> Result<Self> {
        Ok(Self { overall: count_items(examples.iter().flat_map(|e| e.exposure.items.iter().copied()), n_items)? })
    }

    pub fn counts(&self) -> &[u64] {
        &self.overall
    }

    pub fn n_items(&self) -> usize {
        self.overall.len()
    }

    /// Sampling law for `mode`; `batch` is the item multiset of the current
    /// inference batch and is only read in [`PopularityMode::InBatch`].
    pub fn distribution(&self, mode: PopularityMode, batch: &[usize]) -> Result<WeightedIndex<u64>> {
        let counts = match mode {
            PopularityMode::Overall => self.overall.clone(),
            PopularityMode::InBatch => count_items(batch.iter().copied(), self.overall.len())?,
        };
        WeightedIndex::new(&counts).map_err(|e| Error::Config(format!("popularity counts unusable: {e}")))
    }
}

fn count_items(items: impl Iterator<Item = usize>, n_items: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; n_items];
    for i in items {
        *counts.get_mut(i).ok_or(Error::IndexOutOfRange { index: i, len: n_items })? += 1;
    }
    Ok(counts)
}

fn check_positions(slate: &[usize], positions: &[usize]) -> Result<()> {
    let mut seen = HashSet::new();
    for &p in positions {
        if p >= slate.len() {
            return Err(Error::IndexOutOfRange { index: p, len: slate.len() });
        }
        if !seen.insert(p) {
            return Err(Error::Config(format!("position {p} selected twice")));
        }
    }
    Ok(())
}

/// Independent uniform draws from `[0, n_items)` at `positions`.
pub fn replace_uniform<R: Rng + ?Sized>(slate: &[usize], positions: &[usize], n_items: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_positions(slate, positions)?;
    if n_items == 0 && !positions.is_empty() {
        return Err(Error::EmptyDataset("no items to draw replacements from".into()));
    }
    let mut out = slate.to_vec();
    for &p in positions {
        out[p] = rng.gen_range(0..n_items);
    }
    Ok(out)
}

/// Popularity-proportional draws at `positions`.
pub fn replace_popularity<R: Rng + ?Sized>(
    slate: &[usize],
    positions: &[usize],
    popularity: &PopularityModel,
    mode: PopularityMode,
    batch: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_positions(slate, positions)?;
    if positions.is_empty() {
        return Ok(slate.to_vec());
    }
    let dist = popularity.distribution(mode, batch)?;
    let mut out = slate.to_vec();
    for &p in positions {
        out[p] = dist.sample(rng);
    }
    Ok(out)
}

/// Share of slate positions holding an item from `behavior`.
pub fn recommendation_accuracy(slate: &[usize], behavior: &[usize]) -> Result<f64> {
    if slate.is_empty() {
        return Err(Error::EmptyDataset("empty exposure".into()));
    }
    let set: HashSet<usize> = behavior.iter().copied().collect();
    Ok(slate.iter().filter(|i| set.contains(i)).count() as f64 / slate.len() as f64)
}

/// Which clicks count as "actually clicked" for the accuracy, and which feed
/// the preference vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AccuracyScope {
    /// Every click the user made, from the full history.
    #[default]
    FullHistory,
    /// Only the example's behavior window.
    Window,
}

#[derive(Clone, Debug)]
pub struct ProtectionSettings {
    pub l_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `k` of the reported Recall*/NDCG*/MRR*.
    pub k: usize,
    /// Examples per inference batch, which bounds in-batch popularity.
    pub batch_size: usize,
    pub omega: f64,
    pub scope: AccuracyScope,
    pub mrr: MrrMode,
}

impl Default for ProtectionSettings {
    fn default() -> Self {
        Self {
            l_grid: (0..=5).map(|i| i as f64 * 0.2).collect(),
            seeds: vec![0, 1, 2],
            k: 10,
            batch_size: 400,
            omega: OMEGA,
            scope: AccuracyScope::FullHistory,
            mrr: MrrMode::PerItem,
        }
    }
}

/// What the defender knows for one evaluation run.
pub struct ProtectionContext<'a> {
    pub model: &'a AttackModel,
    pub examples: &'a [AttackExample],
    /// Full click history per user, as vocabulary indices.
    pub histories: &'a HashMap<String, Vec<usize>>,
    pub popularity: &'a PopularityModel,
    pub provider: &'a dyn EmbeddingProvider,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionRow {
    pub selection: SelectionKind,
    pub replacement: ReplacementKind,
    pub l: f64,
    pub seed: u64,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionReport {
    pub k: usize,
    pub rows: Vec<ProtectionRow>,
}

impl ProtectionReport {
    pub const CSV_HEADER: &'static str = "selection,replacement,L,seed,recall*,ndcg*,mrr*,acc*";

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# k={} merge={} selection_law=efraimidis-spirakis weights=1-s omega={}\n{}\n",
            self.k,
            MERGE_ORDER,
            OMEGA,
            Self::CSV_HEADER
        );
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.selection, r.replacement, r.l, r.seed, r.recall, r.ndcg, r.mrr, r.accuracy);
        }
        s
    }

    /// Seed-averaged `(recall, ndcg, mrr, acc)` for one grid cell.
    pub fn mean_over_seeds(&self, selection: SelectionKind, replacement: ReplacementKind, l: f64) -> Option<(f64, f64, f64, f64)> {
        let rows: Vec<&ProtectionRow> = self
            .rows
            .iter()
            .filter(|r| r.selection == selection && r.replacement == replacement && (r.l - l).abs() < 1e-9)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let sum = |f: fn(&ProtectionRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Some((sum(|r| r.recall), sum(|r| r.ndcg), sum(|r| r.mrr), sum(|r| r.accuracy)))
    }

    /// Mean over seeds of every `(selection, replacement, L)` cell, in grid order.
    pub fn seed_means(&self) -> Vec<ProtectionRow> {
        let mut cells: BTreeMap<(SelectionKind, ReplacementKind, u64), ProtectionRow> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.selection, r.replacement, r.l.to_bits());
            cells.entry(key).or_insert_with(|| {
                let (recall, ndcg, mrr, accuracy) = self.mean_over_seeds(r.selection, r.replacement, r.l).expect("row exists");
                ProtectionRow { seed: 0, recall, ndcg, mrr, accuracy, ..r.clone() }
            });
        }
        let mut out: Vec<ProtectionRow> = cells.into_values().collect();
        out.sort_by(|a, b| (a.selection, a.replacement).cmp(&(b.selection, b.replacement)).then(a.l.total_cmp(&b.l)));
        out
    }
}

impl ProtectionContext<'_> {
    fn accuracy_target<'e>(&'e self, ex: &'e AttackExample, scope: AccuracyScope) -> &'e [usize] {
        match scope {
            AccuracyScope::FullHistory => self.histories.get(&ex.user).map_or(&ex.behavior.items[..], Vec::as_slice),
            AccuracyScope::Window => &ex.behavior.items,
        }
    }

    /// Positions for example `index`, drawn from its own seeded stream so
    /// that every selection kind sees the same randomness.
    pub fn plan(&self, index: usize, selection: SelectionKind, replacement: ReplacementKind, l: f64, seed: u64, settings: &ProtectionSettings) -> Result<ProtectionPlan> {
        let ex = &self.examples[index];
        let n = ex.exposure.items.len();
        let m = replacement_count(n, l)?;
        let mut rng = seeds::stream(seed, &[10, index as u64]);
        let positions = match selection {
            SelectionKind::Random => select_positions_random(n, l, &mut rng)?,
            SelectionKind::Similarity | SelectionKind::SimilarityInverted => {
                match user_preference_vector(&ex.behavior.items, self.provider) {
                    Ok(b_u) => {
                        let scores = similarity_scores(&b_u, &ex.exposure.items, self.provider, settings.omega)?;
                        select_positions_similarity(&scores, l, selection == SelectionKind::SimilarityInverted, &mut rng)?
                    }
                    Err(Error::EmptyDataset(_)) => {
                        log::warn!("user {} has no behavior; falling back to random selection", ex.user);
                        select_positions_random(n, l, &mut rng)?
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        Ok(ProtectionPlan { l, m, positions, selection, replacement })
    }

    /// Protected slates `E*` for every example, in order.
    pub fn protect_all(&self, selection: SelectionKind, replacement: ReplacementKind, l: f64, seed: u64, settings: &ProtectionSettings) -> Result<Vec<Vec<usize>>> {
        if settings.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let n_items = self.model.spec().n_items;
        let mut out = Vec::with_capacity(self.examples.len());
        for (b, batch) in self.examples.chunks(settings.batch_size).enumerate() {
            let batch_items: Vec<usize> = batch.iter().flat_map(|e| e.exposure.items.iter().copied()).collect();
            for j in 0..batch.len() {
                let index = b * settings.batch_size + j;
                let plan = self.plan(index, selection, replacement, l, seed, settings)?;
                let slate = &self.examples[index].exposure.items;
                let mut rng = seeds::stream(seed, &[11, index as u64]);
                let protected = match replacement {
                    ReplacementKind::Uniform => replace_uniform(slate, &plan.positions, n_items, &mut rng)?,
                    ReplacementKind::OverallPopularity => {
                        replace_popularity(slate, &plan.positions, self.popularity, PopularityMode::Overall, &batch_items, &mut rng)?
                    }
                    ReplacementKind::InBatchPopularity => {
                        replace_popularity(slate, &plan.positions, self.popularity, PopularityMode::InBatch, &batch_items, &mut rng)?
                    }
                };
                out.push(protected);
            }
        }
        Ok(out)
    }

    /// Attack metrics at `k` and per-user-averaged accuracy on `slates`.
    pub fn score(&self, slates: &[Vec<usize>], settings: &ProtectionSettings) -> Result<(MetricsReport, f64)> {
        if slates.len() != self.examples.len() {
            return Err(Error::Shape(format!("{} slates for {} examples", slates.len(), self.examples.len())));
        }
        let m = self.model.spec().m;
        let mut per_example = Vec::with_capacity(slates.len());
        let mut per_user: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for (ex, slate) in self.examples.iter().zip(slates) {
            let inference = self.model.infer(slate)?;
            per_example.push(score_inference(&inference, &ex.behavior.items, m, &[settings.k], settings.mrr)?);
            let acc = recommendation_accuracy(slate, self.accuracy_target(ex, settings.scope))?;
            let e = per_user.entry(&ex.user).or_default();
            e.0 += acc;
            e.1 += 1;
        }
        let spec = self.model.spec();
        let report = MetricsReport::from_per_example(&spec.encoder.to_string(), &spec.decoder.to_string(), &[settings.k], per_example)?;
        let accuracy = per_user.values().map(|(s, c)| s / *c as f64).sum::<f64>() / per_user.len() as f64;
        Ok((report, accuracy))
    }

    /// Unprotected attack metrics and accuracy.
    pub fn baseline(&self, settings: &ProtectionSettings) -> Result<(MetricsReport, f64)> {
        let slates: Vec<Vec<usize>> = self.examples.iter().map(|e| e.exposure.items.clone()).collect();
        self.score(&slates, settings)
    }
}

/// Sweeps the grid for every requested selection × replacement pair.
pub fn evaluate_protection(
    ctx: &ProtectionContext<'_>,
    selections: &[SelectionKind],
    replacements: &[ReplacementKind],
    settings: &ProtectionSettings,
) -> Result<ProtectionReport> {
    if ctx.examples.is_empty() {
        return Err(Error::EmptyDataset("no test examples to protect".into()));
    }
    if ctx.provider.n_items() < ctx.model.spec().n_items {
        return Err(Error::VocabularyMismatch(format!(
            "embedding provider covers {} items, model has {}",
            ctx.provider.n_items(),
            ctx.model.spec().n_items
        )));
    }
    let mut rows = Vec::new();
    for &selection in selections {
        for &replacement in replacements {
            for &l in &settings.l_grid {
                for &seed in &settings.seeds {
                    let slates = ctx.protect_all(selection, replacement, l, seed, settings)?;
                    let (report, accuracy) = ctx.score(&slates, settings)?;
                    let row = &report.rows[0];
                    log::info!("{selection}/{replacement} L={l} seed={seed}: recall*={:.4} acc*={accuracy:.4}", row.recall);
                    rows.push(ProtectionRow { selection, replacement, l, seed, recall: row.recall, ndcg: row.ndcg, mrr: row.mrr, accuracy });
                }
            }
        }
    }
    Ok(ProtectionReport { k: settings.k, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn counts_follow_the_ceiling() {
        assert_eq!(replacement_count(10, 0.2).unwrap(), 2);
        assert_eq!(replacement_count(10, 3.0 * 0.2).unwrap(), 6);
        assert_eq!(replacement_count(10, 0.25).unwrap(), 3);
        assert_eq!(replacement_count(10, 0.0).unwrap(), 0);
        assert_eq!(replacement_count(10, 1.0).unwrap(), 10);
        assert!(replacement_count(10, 1.5).is_err());
    }

    #[test]
    fn random_selection_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(select_positions_random(10, 0.0, &mut rng).unwrap().is_empty());
        let mut all = select_positions_random(10, 1.0, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_weights_come_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = weighted_sample_without_replacement(&[0.0, 1.0, 2.0], 2, &mut rng).unwrap();
            assert!(!p.contains(&0));
        }
    }

    #[test]
    fn preference_vector_is_the_mean() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(user_preference_vector(&[0, 1], &t).unwrap(), vec![0.5, 0.5]);
        assert_eq!(user_preference_vector(&[1], &t).unwrap(), vec![0.0, 1.0]);
        assert!(user_preference_vector(&[], &t).is_err());
    }

    #[test]
    fn similarity_guards_zero_vectors() {
        let t = table(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let s = similarity_scores(&[1.0, 0.0], &[0, 1], &t, OMEGA).unwrap();
        assert!(s.s.iter().all(|v| v.is_finite()));
        let e = std::f64::consts::E;
        assert!((s.s[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        let u = similarity_scores(&[1.0, 0.0], &[1, 1, 1], &t, OMEGA).unwrap();
        assert!(u.s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn replacement_keeps_other_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let slate = vec![1, 2, 3, 4];
        assert_eq!(replace_uniform(&slate, &[], 50, &mut rng).unwrap(), slate);
        let out = replace_uniform(&slate, &[1, 3], 50, &mut rng).unwrap();
        assert_eq!((out[0], out[2]), (1, 3));
        assert!(replace_uniform(&slate, &[4], 50, &mut rng).is_err());
        assert!(replace_uniform(&slate, &[1, 1], 50, &mut rng).is_err());
    }

    #[test]
    fn in_batch_support_is_restricted() {
        let pop = PopularityModel::from_counts(vec![5; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let out = replace_popularity(&[0, 0, 0], &[0, 1, 2], &pop, PopularityMode::InBatch, &[7, 8, 8], &mut rng).unwrap();
            assert!(out.iter().all(|i| *i == 7 || *i == 8));
        }
        let zero = PopularityModel::from_counts(vec![0; 3]);
        assert!(replace_popularity(&[0], &[0], &zero, PopularityMode::Overall, &[], &mut rng).is_err());
    }

    #[test]
    fn accuracy_counts_positions() {
        let slate: Vec<usize> = (0..10).collect();
        assert!((recommendation_accuracy(&slate, &[1, 4, 7, 99]).unwrap() - 0.3).abs() < 1e-15);
        assert!(recommendation_accuracy(&[], &[1]).is_err());
    }

    #[test]
    fn external_embeddings_must_cover_the_vocabulary() {
        let vocab = Vocabulary::from_items(["a", "b"]).unwrap();
        let ok = ExternalEmbeddings::read("a 1 0\nb 0 1\nzzz 3 3\n".as_bytes(), &vocab).unwrap();
        assert_eq!(ok.embedding(1).unwrap(), &[0.0, 1.0]);
        assert_eq!(ok.provenance(), "external-file");
        assert!(matches!(ExternalEmbeddings::read("a 1 0\n".as_bytes(), &vocab), Err(Error::VocabularyMismatch(_))));
        assert!(ExternalEmbeddings::read("a 1 0\nb 1\n".as_bytes(), &vocab).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for s in SelectionKind::ALL {
            assert_eq!(s.to_string().parse::<SelectionKind>().unwrap(), s);
        }
        for r in ReplacementKind::ALL {
            assert_eq!(r.to_string().parse::<ReplacementKind>().unwrap(), r);
        }
    }
}
