//! Attention against a direct per-row softmax, and mask opacity.

mod common;

use std::sync::Arc;

use common::*;
use ffdc::nn::kernels::masked_attention;
use ffdc::nn::{BoolMask, Tape, Tensor2D};
use proptest::prelude::*;

/// Per-head scaled dot-product attention written as plain loops.
fn naive_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, mask: &BoolMask, heads: usize) -> Tensor2D {
    let (n, width) = q.shape();
    let hd = width / heads;
    let mut out = Tensor2D::zeros(n, width);
    for i in 0..n {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let logits: Vec<Option<f64>> = (0..n)
                .map(|j| mask.get(i, j).then(|| cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (hd as f64).sqrt()))
                .collect();
            let max = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - max).exp())).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                let y: f64 = (0..n).map(|j| weights[j] / total * v.get(j, c)).sum();
                out.set(i, c, y);
            }
        }
    }
    out
}

#[test]
fn six_tokens_match_naive_loops() {
    let mut rng = rng(5);
    for _ in 0..20 {
        let (q, k, v) = (random_tensor(&mut rng, 6, 8), random_tensor(&mut rng, 6, 8), random_tensor(&mut rng, 6, 8));
        let mask = random_mask(&mut rng, 6);
        let fast = masked_attention(&q, &k, &v, &mask, 2);
        assert!(fast.max_abs_diff(&naive_attention(&q, &k, &v, &mask, 2)) < 1e-12);
    }
}

#[test]
fn single_key_returns_its_value() {
    let mut rng = rng(6);
    let (q, k, v) = (random_tensor(&mut rng, 1, 4), random_tensor(&mut rng, 1, 4), random_tensor(&mut rng, 1, 4));
    let out = masked_attention(&q, &k, &v, &BoolMask::full(1), 2);
    assert!(out.max_abs_diff(&v) < 1e-15);
}

#[test]
fn taped_attention_equals_kernel() {
    let mut rng = rng(7);
    let (q, k, v) = (random_tensor(&mut rng, 12, 6), random_tensor(&mut rng, 12, 6), random_tensor(&mut rng, 12, 6));
    let mask = random_mask(&mut rng, 6);
    let mut tape = Tape::new();
    let (a, b, c) = (tape.input(q.clone()), tape.input(k.clone()), tape.input(v.clone()));
    let y = tape.attention(a, b, c, Arc::new(mask.clone()), 3).unwrap();
    assert_eq!(tape.value(y), &masked_attention(&q, &k, &v, &mask, 3));
}

proptest! {
    /// A token no query may see can carry any key and value content.
    #[test]
    fn hidden_token_is_opaque(seed in 0u64..1000, n in 2usize..8, hidden in 0usize..8, bump in -5.0f64..5.0) {
        let hidden = hidden % n;
        let mut rng = rng(seed);
        let mut mask = random_mask(&mut rng, n);
        for i in 0..n {
            mask.set(i, hidden, false);
        }
        // The hidden token's own row still needs a key.
        mask.set(hidden, (hidden + 1) % n, true);
        let (q, k, v) = (random_tensor(&mut rng, n, 4), random_tensor(&mut rng, n, 4), random_tensor(&mut rng, n, 4));
        let base = masked_attention(&q, &k, &v, &mask, 2);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        k2.row_mut(hidden).iter_mut().for_each(|x| *x += bump);
        v2.row_mut(hidden).iter_mut().for_each(|x| *x -= bump);
        prop_assert_eq!(base, masked_attention(&q, &k2, &v2, &mask, 2));
    }
}
