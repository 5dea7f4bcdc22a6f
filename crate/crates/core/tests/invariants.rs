//! Structural properties: normalised outputs, causality, and slate-order
//! symmetry of the encoders.

mod common;

use common::*;
use leakaudit::decoders;
use leakaudit::model::EMBEDDING;
use leakaudit::nn::{Graph, Mode};
use leakaudit::{AttackModel, DecoderKind, EncoderKind};

#[test]
fn decoder_rows_are_distributions() {
    for enc in EncoderKind::ALL {
        for dec in DecoderKind::ALL {
            let model = AttackModel::new(small_spec(enc, dec), 11).unwrap();
            for s in 0..5 {
                let ex = random_example(&mut rng(s), 20, 3, 4);
                let out = model.decode(&ex).unwrap();
                let expected_rows = if dec.is_sequential() { 4 } else { 1 };
                assert_eq!(out.probs.rows(), expected_rows);
                for r in 0..out.probs.rows() {
                    let sum: f64 = out.probs.row(r).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "{enc}/{dec} row {r} sums to {sum}");
                    assert!(out.probs.row(r).iter().all(|p| *p >= 0.0));
                }
            }
        }
    }
}

#[test]
fn attention_weights_are_distributions() {
    let model = AttackModel::new(small_spec(EncoderKind::Attention, DecoderKind::Transformer), 4).unwrap();
    let mut g = Graph::new(model.params());
    let enc = model.encode(&mut g, &[1, 5, 9, 2], &mut Mode::eval()).unwrap();
    assert_eq!(enc.attention.len(), 2);
    for &w in &enc.attention {
        let w = g.value(w);
        for r in 0..w.rows() {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn sequence_logits(model: &AttackModel, slate: &[usize], inputs: &[usize]) -> Vec<Vec<f64>> {
    let mut g = Graph::new(model.params());
    let mut mode = Mode::eval();
    let enc = model.encode(&mut g, slate, &mut mode).unwrap();
    let table = g.param_named(EMBEDDING).unwrap();
    let spec = model.spec();
    let out = decoders::decode_sequence(&mut g, spec.decoder, &enc, table, inputs, spec.n_classes(), spec.heads, &mut mode).unwrap();
    let l = g.value(out.logits);
    (0..l.rows()).map(|r| l.row(r).to_vec()).collect()
}

#[test]
fn later_inputs_never_change_earlier_outputs() {
    for enc in EncoderKind::ALL {
        for dec in [DecoderKind::Lstm, DecoderKind::Gru, DecoderKind::Transformer] {
            let model = AttackModel::new(small_spec(enc, dec), 21).unwrap();
            let start = model.spec().start_token();
            let slate = [3, 8, 8, 14];
            let base = sequence_logits(&model, &slate, &[start, 4, 7, 1]);
            for t in 1..4 {
                let mut changed = vec![start, 4, 7, 1];
                changed[t] = 19 - changed[t];
                let other = sequence_logits(&model, &slate, &changed);
                for r in 0..t {
                    let same = base[r].iter().zip(&other[r]).all(|(a, b)| a.to_bits() == b.to_bits());
                    assert!(same, "{enc}/{dec}: output {r} moved when input {t} changed");
                }
                assert_ne!(base[t], other[t], "{enc}/{dec}: input {t} had no effect");
            }
        }
    }
}

#[test]
fn causal_attention_matrix_is_lower_triangular() {
    let model = AttackModel::new(small_spec(EncoderKind::Mean, DecoderKind::Transformer), 2).unwrap();
    let mut g = Graph::new(model.params());
    let mut mode = Mode::eval();
    let enc = model.encode(&mut g, &[1, 2, 3, 4], &mut mode).unwrap();
    let table = g.param_named(EMBEDDING).unwrap();
    let spec = model.spec();
    let out = decoders::decode_sequence(&mut g, DecoderKind::Transformer, &enc, table, &[21, 5, 6, 7], spec.n_classes(), spec.heads, &mut mode).unwrap();
    for &w in &out.self_attention {
        let w = g.value(w);
        for i in 0..w.rows() {
            for j in i + 1..w.cols() {
                assert_eq!(w.get(i, j), 0.0);
            }
        }
    }
}

fn encode_rows(model: &AttackModel, slate: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::new(model.params());
    let enc = model.encode(&mut g, slate, &mut Mode::eval()).unwrap();
    let full = g.value(enc.full);
    (g.value(enc.summary).data().to_vec(), (0..full.rows()).map(|r| full.row(r).to_vec()).collect())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn encoders_are_permutation_equivariant_bit_for_bit() {
    let perms: [[usize; 6]; 4] = [[5, 4, 3, 2, 1, 0], [1, 0, 3, 2, 5, 4], [2, 5, 0, 4, 1, 3], [3, 1, 4, 0, 5, 2]];
    for enc in EncoderKind::ALL {
        let mut spec = small_spec(enc, DecoderKind::Transformer);
        spec.dropout = 0.1;
        for seed in 0..4 {
            let model = AttackModel::new(spec.clone(), seed).unwrap();
            let slate = [2, 17, 9, 9, 11, 0];
            let (summary, full) = encode_rows(&model, &slate);
            for p in &perms {
                let permuted: Vec<usize> = p.iter().map(|&i| slate[i]).collect();
                let (s2, f2) = encode_rows(&model, &permuted);
                assert_eq!(bits(&summary), bits(&s2), "{enc}: summary changed under permutation");
                if enc == EncoderKind::Attention {
                    for (row, &src) in p.iter().enumerate() {
                        assert_eq!(bits(&f2[row]), bits(&full[src]), "{enc}: row {row} is not row {src} of the original");
                    }
                }
            }
        }
    }
}

#[test]
fn inference_is_pure() {
    let model = AttackModel::new(small_spec(EncoderKind::Attention, DecoderKind::Gru), 8).unwrap();
    let before = model.clone();
    let a = model.infer(&[1, 2, 3, 4]).unwrap();
    let b = model.infer(&[1, 2, 3, 4]).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
}
