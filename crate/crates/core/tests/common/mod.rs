//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the library code it checks.

#![allow(dead_code)]

use std::collections::HashSet;

use leakaudit::datamodel::{AttackExample, BehaviorSequence, DatasetSplit, ExposureSlate};
use leakaudit::nn::{Graph, Mode};
use leakaudit::{AttackModel, DecoderKind, EncoderKind, ModelSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ranked list built by a plain stable sort: score descending, index ascending.
pub fn brute_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx
}

pub fn brute_pointwise_list(scores: &[f64], k: usize, m: usize) -> Vec<usize> {
    brute_top(scores, k * m)
}

/// Round robin over positions, rank by rank, first occurrence kept.
pub fn brute_sequence_list(rows: &[Vec<f64>], k: usize) -> Vec<usize> {
    let tops: Vec<Vec<usize>> = rows.iter().map(|r| brute_top(r, k)).collect();
    let mut out: Vec<usize> = Vec::new();
    for rank in 0..k {
        for t in &tops {
            if rank < t.len() && !out.contains(&t[rank]) {
                out.push(t[rank]);
            }
        }
    }
    out
}

pub fn brute_recall(list: &[usize], behavior: &[usize], m: usize) -> f64 {
    let mut hits = 0;
    for b in behavior {
        if list.iter().any(|x| x == b) {
            hits += 1;
        }
    }
    hits as f64 / m as f64
}

pub fn brute_ndcg(list: &[usize], behavior: &[usize]) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in list.iter().enumerate() {
        if behavior.contains(item) {
            dcg += 1.0 / (2.0 + pos as f64).log2();
        }
    }
    let distinct: HashSet<&usize> = behavior.iter().collect();
    let mut idcg = 0.0;
    for pos in 0..distinct.len().min(list.len()) {
        idcg += 1.0 / (2.0 + pos as f64).log2();
    }
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

pub fn brute_mrr(list: &[usize], behavior: &[usize], m: usize) -> f64 {
    let mut total = 0.0;
    for b in behavior {
        for (pos, x) in list.iter().enumerate() {
            if x == b {
                total += 1.0 / (pos + 1) as f64;
                break;
            }
        }
    }
    total / m as f64
}

pub fn example(behavior: Vec<usize>, exposure: Vec<usize>) -> AttackExample {
    AttackExample {
        user: "u".into(),
        behavior: BehaviorSequence { items: behavior, timestamps: None },
        exposure: ExposureSlate { items: exposure, timestamp: 0 },
    }
}

/// A random instance with distinct behavior items and a slate of `n` items.
pub fn random_example(rng: &mut ChaCha8Rng, n_items: usize, m: usize, n: usize) -> AttackExample {
    let mut pool: Vec<usize> = (0..n_items).collect();
    pool.shuffle(rng);
    let behavior = pool[..m].to_vec();
    let exposure = (0..n).map(|_| rng.gen_range(0..n_items)).collect();
    example(behavior, exposure)
}

pub fn small_spec(encoder: EncoderKind, decoder: DecoderKind) -> ModelSpec {
    let mut spec = ModelSpec::new(encoder, decoder, 20, 3, 8);
    spec.dropout = 0.0;
    spec
}

/// Loss with dropout off, as a plain function of the current parameters.
pub fn loss_of(model: &AttackModel, ex: &AttackExample) -> f64 {
    let mut g = Graph::new(model.params());
    let l = model.loss(&mut g, ex, &mut Mode::eval()).unwrap();
    g.value(l).get(0, 0)
}

/// Worst relative error between backprop and central differences over all
/// parameter values. The five-point stencil at `h` is used unless it
/// disagrees with a two-point stencil at `h / 100`, which means a ReLU kink
/// lies inside the wide stencil; the narrow estimate is used there. Pairs
/// where both gradients are below `floor` are compared absolutely instead.
pub fn gradient_check(model: &mut AttackModel, ex: &AttackExample, h: f64, floor: f64) -> (f64, String) {
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(model.params());
        let l = model.loss(&mut g, ex, &mut Mode::eval()).unwrap();
        let grads = g.backward(l);
        model
            .params()
            .iter()
            .map(|(id, _, t)| grads.param(id).map_or(vec![0.0; t.len()], |g| g.data().to_vec()))
            .collect()
    };
    let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
    let mut worst = (0.0, String::new());
    for (p, name) in names.iter().enumerate() {
        let len = model.params().iter().nth(p).map_or(0, |(_, _, t)| t.len());
        for j in 0..len {
            let orig = model.params_mut().tensors_mut()[p].data()[j];
            let mut at = |delta: f64| {
                model.params_mut().tensors_mut()[p].data_mut()[j] = orig + delta;
                loss_of(model, ex)
            };
            let wide = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let narrow = (at(h / 100.0) - at(-h / 100.0)) / (h / 50.0);
            let numeric = if (wide - narrow).abs() > 1e-5 * wide.abs().max(narrow.abs()) + 1e-8 { narrow } else { wide };
            model.params_mut().tensors_mut()[p].data_mut()[j] = orig;
            let a = analytic[p][j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < floor { (a - numeric).abs() / floor } else { (a - numeric).abs() / scale };
            if err > worst.0 {
                worst = (err, format!("{name}[{j}]: analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// Synthetic corpus windowed and split, ready for training.
pub fn synthetic_split(cfg: &leakaudit::ingestion::SyntheticConfig, split_seed: u64) -> (leakaudit::Vocabulary, DatasetSplit, leakaudit::ingestion::SyntheticCorpus) {
    let corpus = leakaudit::ingestion::generate_synthetic(cfg).unwrap();
    let vocab = leakaudit::datamodel::build_vocabulary(&corpus.log).unwrap();
    let examples = leakaudit::datamodel::build_examples(&corpus.log, &vocab, cfg.m, cfg.n).unwrap();
    let split = leakaudit::datamodel::split_by_user(examples, (0.8, 0.1, 0.1), split_seed).unwrap();
    (vocab, split, corpus)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
