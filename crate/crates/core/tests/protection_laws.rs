//! Sampling laws of the protection stages, checked by Monte Carlo.

mod common;

use common::rng;
use leakaudit::protection::{
    replace_popularity, select_positions_random, select_positions_similarity, PopularityMode, PopularityModel, SimilarityScores,
};

#[test]
fn random_selection_marginals_are_uniform() {
    let mut r = rng(1);
    let draws = 100_000;
    let mut hits = [0usize; 5];
    for _ in 0..draws {
        let p = select_positions_random(5, 0.2, &mut r).unwrap();
        assert_eq!(p.len(), 1);
        hits[p[0]] += 1;
    }
    for h in hits {
        assert!((h as f64 / draws as f64 - 0.2).abs() < 0.01, "{hits:?}");
    }
}

#[test]
fn high_similarity_position_is_kept_longest() {
    let s = SimilarityScores { b_u: vec![], s: vec![0.91, 0.03, 0.03, 0.03], omega: 1e-8 };
    let mut r = rng(2);
    let mut picked = [0usize; 4];
    for _ in 0..20_000 {
        for p in select_positions_similarity(&s, 0.75, false, &mut r).unwrap() {
            picked[p] += 1;
        }
    }
    assert!(picked[0] < picked[1] && picked[0] < picked[2] && picked[0] < picked[3], "{picked:?}");
}

#[test]
fn inverted_weights_prefer_similar_positions() {
    let s = SimilarityScores { b_u: vec![], s: vec![0.7, 0.1, 0.1, 0.1], omega: 1e-8 };
    let mut r = rng(3);
    let draws = 100_000;
    let first = (0..draws).filter(|_| select_positions_similarity(&s, 0.25, true, &mut r).unwrap() == vec![0]).count();
    assert!((first as f64 / draws as f64 - 0.7).abs() < 0.01);
}

#[test]
fn uniform_scores_select_like_random() {
    let s = SimilarityScores { b_u: vec![], s: vec![0.25; 4], omega: 1e-8 };
    let mut r = rng(4);
    let draws = 100_000;
    let mut hits = [0usize; 4];
    for _ in 0..draws {
        hits[select_positions_similarity(&s, 0.25, false, &mut r).unwrap()[0]] += 1;
    }
    for h in hits {
        assert!((h as f64 / draws as f64 - 0.25).abs() < 0.01, "{hits:?}");
    }
}

#[test]
fn popularity_three_to_one() {
    let pop = PopularityModel::from_counts(vec![3, 1]);
    let mut r = rng(5);
    let draws = 100_000;
    let mut a = 0;
    for _ in 0..draws {
        if replace_popularity(&[1], &[0], &pop, PopularityMode::Overall, &[], &mut r).unwrap()[0] == 0 {
            a += 1;
        }
    }
    assert!((a as f64 / draws as f64 - 0.75).abs() < 0.01);
    assert_eq!(replace_popularity(&[1, 0], &[], &pop, PopularityMode::Overall, &[], &mut r).unwrap(), vec![1, 0]);
}
