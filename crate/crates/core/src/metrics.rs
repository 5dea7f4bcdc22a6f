//! Ranked inference lists and Recall / NDCG / MRR at k.
//!
//! A point-wise inference contributes its top `k·M` items. A sequence-wise
//! inference contributes the top `k` items of each of its `M` positions,
//! merged round-robin by rank (rank 1 of every position, then rank 2, …)
//! and de-duplicated keeping the first occurrence. Ties in score go to the
//! lower item index.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use crate::datamodel::AttackExample;
use crate::error::{Error, Result};
use crate::model::AttackModel;

/// Name of the sequence-wise merge rule, recorded in every report.
pub const MERGE_ORDER: &str = "round-robin-by-rank";

/// Scores over items `[0, |I|)`; special tokens are never candidates.
#[derive(Clone, Debug, PartialEq)]
pub enum RankedInference {
    Pointwise(Vec<f64>),
    /// One score vector per inferred position, most recent behavior first.
    Sequencewise(Vec<Vec<f64>>),
}

impl RankedInference {
    pub fn n_items(&self) -> usize {
        match self {
            RankedInference::Pointwise(s) => s.len(),
            RankedInference::Sequencewise(rows) => rows.first().map_or(0, Vec::len),
        }
    }
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` highest scores, best first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = by_score_then_index(scores);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

pub fn ranked_list(inference: &RankedInference, k: usize, m: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    match inference {
        RankedInference::Pointwise(scores) => Ok(top_k(scores, k * m)),
        RankedInference::Sequencewise(rows) => {
            let tops: Vec<Vec<usize>> = rows.iter().map(|r| top_k(r, k)).collect();
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(k * rows.len());
            for rank in 0..k {
                for top in &tops {
                    if let Some(&item) = top.get(rank) {
                        if seen.insert(item) {
                            out.push(item);
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Fraction of the `m` behavior positions whose item appears in `list`.
pub fn recall_at_k(list: &[usize], behavior: &[usize], m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let set: HashSet<usize> = list.iter().copied().collect();
    behavior.iter().filter(|b| set.contains(b)).count() as f64 / m as f64
}

/// Binary-relevance DCG with gain `1/log2(rank+1)`, normalised by the DCG
/// of `min(distinct behavior items, |list|)` hits at the top.
pub fn ndcg_at_k(list: &[usize], behavior: &[usize], _m: usize) -> f64 {
    let relevant: HashSet<usize> = behavior.iter().copied().collect();
    let dcg: f64 = list
        .iter()
        .enumerate()
        .filter(|(_, item)| relevant.contains(item))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal_hits = relevant.len().min(list.len());
    let idcg: f64 = (0..ideal_hits).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Mean over the `m` behavior positions of `1/rank` (0 when absent).
pub fn mrr_at_k(list: &[usize], behavior: &[usize], m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let total: f64 = behavior
        .iter()
        .map(|b| list.iter().position(|x| x == b).map_or(0.0, |r| 1.0 / (r + 1) as f64))
        .sum();
    total / m as f64
}

/// Reciprocal rank of the first relevant list entry.
pub fn mrr_first_hit_at_k(list: &[usize], behavior: &[usize]) -> f64 {
    list.iter()
        .position(|x| behavior.contains(x))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MrrMode {
    #[default]
    PerItem,
    FirstHit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// All three metrics of one inference for each `k`.
pub fn score_inference(inference: &RankedInference, behavior: &[usize], m: usize, ks: &[usize], mrr: MrrMode) -> Result<Vec<ExampleMetrics>> {
    ks.iter()
        .map(|&k| {
            let list = ranked_list(inference, k, m)?;
            Ok(ExampleMetrics {
                k,
                recall: recall_at_k(&list, behavior, m),
                ndcg: ndcg_at_k(&list, behavior, m),
                mrr: match mrr {
                    MrrMode::PerItem => mrr_at_k(&list, behavior, m),
                    MrrMode::FirstHit => mrr_first_hit_at_k(&list, behavior),
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub n_examples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub encoder: String,
    pub decoder: String,
    pub rows: Vec<MetricRow>,
    /// Per-example metrics, outer index = example, inner = k.
    pub per_example: Vec<Vec<ExampleMetrics>>,
}

impl MetricsReport {
    /// Averages per-example metrics for every `k`.
    pub fn from_per_example(encoder: &str, decoder: &str, ks: &[usize], per_example: Vec<Vec<ExampleMetrics>>) -> Result<Self> {
        if per_example.is_empty() {
            return Err(Error::EmptyDataset("no examples to evaluate".into()));
        }
        let n = per_example.len();
        let rows = ks
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let (mut r, mut g, mut m) = (0.0, 0.0, 0.0);
                for ex in &per_example {
                    r += ex[j].recall;
                    g += ex[j].ndcg;
                    m += ex[j].mrr;
                }
                MetricRow { k, recall: r / n as f64, ndcg: g / n as f64, mrr: m / n as f64, n_examples: n }
            })
            .collect();
        Ok(Self { encoder: encoder.to_string(), decoder: decoder.to_string(), rows, per_example })
    }

    pub fn row(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub const CSV_HEADER: &'static str = "encoder,decoder,k,recall,ndcg,mrr,n_examples";

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", self.encoder, self.decoder, r.k, r.recall, r.ndcg, r.mrr, r.n_examples);
        }
        s
    }

    /// `example,k,recall,ndcg,mrr` rows for offline re-aggregation.
    pub fn per_example_csv(&self) -> String {
        let mut s = String::from("example,k,recall,ndcg,mrr\n");
        for (i, ex) in self.per_example.iter().enumerate() {
            for e in ex {
                let _ = writeln!(s, "{i},{},{},{},{}", e.k, e.recall, e.ndcg, e.mrr);
            }
        }
        s
    }
}

/// Runs attack inference on every example and averages the metrics.
pub fn evaluate(model: &AttackModel, examples: &[AttackExample], ks: &[usize], mrr: MrrMode) -> Result<MetricsReport> {
    let m = model.spec().m;
    let per_example = examples
        .iter()
        .map(|ex| score_inference(&model.infer(&ex.exposure.items)?, &ex.behavior.items, m, ks, mrr))
        .collect::<Result<Vec<_>>>()?;
    let spec = model.spec();
    MetricsReport::from_per_example(&spec.encoder.to_string(), &spec.decoder.to_string(), ks, per_example)
}

/// Recall of uniform guessing: a list of `k·M` random items out of `|I|`.
pub fn chance_recall(k: usize, m: usize, n_items: usize) -> f64 {
    (k * m) as f64 / n_items as f64
}
