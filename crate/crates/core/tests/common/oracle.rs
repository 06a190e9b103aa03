//! Naive all-pairs reference for margin scoring and mining, and random store
//! generation.

use std::collections::{BTreeMap, BTreeSet};

use musr_core::mining::EmbeddingStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad::normal;

/// Full cosine table. Products are rounded to 32 bits and summed in 64, the
/// same arithmetic the store uses, so both sides compare exactly.
pub fn cosine_table(a: &EmbeddingStore, b: &EmbeddingStore) -> Vec<Vec<f64>> {
    (0..a.len())
        .map(|i| {
            (0..b.len())
                .map(|j| a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| f64::from(x * y)).sum())
                .collect()
        })
        .collect()
}

fn top_k_mean(mut v: Vec<f64>, k: usize) -> f64 {
    v.sort_by(|x, y| y.total_cmp(x));
    v[..k].iter().sum::<f64>() / k as f64
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub struct OracleMining {
    pub scores: Vec<Vec<f64>>,
    /// Candidate `(i, j)` pairs mapped to their score.
    pub candidates: BTreeMap<(usize, usize), f64>,
}

pub fn oracle(a: &EmbeddingStore, b: &EmbeddingStore, k: usize) -> OracleMining {
    let c = cosine_table(a, b);
    let col = |j: usize| (0..a.len()).map(|i| c[i][j]).collect::<Vec<_>>();
    let ra: Vec<f64> = c.iter().map(|r| top_k_mean(r.clone(), k)).collect();
    let rb: Vec<f64> = (0..b.len()).map(|j| top_k_mean(col(j), k)).collect();
    let scores: Vec<Vec<f64>> =
        (0..a.len()).map(|i| (0..b.len()).map(|j| c[i][j] / (ra[i] / 2.0 + rb[j] / 2.0)).collect()).collect();
    let mut pairs = BTreeSet::new();
    for (i, row) in c.iter().enumerate() {
        pairs.insert((i, argmax(row)));
    }
    for j in 0..b.len() {
        pairs.insert((argmax(&col(j)), j));
    }
    let candidates = pairs.into_iter().map(|(i, j)| ((i, j), scores[i][j])).collect();
    OracleMining { scores, candidates }
}

/// Random stores: `b` rows are noisy copies of a random subset of `a` rows
/// mixed with unrelated rows, like a mining scenario.
pub fn random_store_pair(seed: u64) -> (EmbeddingStore, EmbeddingStore, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=32);
    let na = rng.gen_range(2..=200);
    let nb = rng.gen_range(2..=200);
    let a_rows: Vec<Vec<f32>> = (0..na).map(|_| normal(&mut rng, dim).iter().map(|&x| x as f32).collect()).collect();
    let b_rows: Vec<Vec<f32>> = (0..nb)
        .map(|_| {
            let noise: Vec<f32> = normal(&mut rng, dim).iter().map(|&x| x as f32).collect();
            if rng.gen_bool(0.5) {
                let src = &a_rows[rng.gen_range(0..na)];
                src.iter().zip(&noise).map(|(s, n)| s + 0.3 * n).collect()
            } else {
                noise
            }
        })
        .collect();
    let a = EmbeddingStore::from_rows("aa", (0..na).map(|i| format!("a{i}")).collect(), &a_rows).unwrap();
    let b = EmbeddingStore::from_rows("bb", (0..nb).map(|i| format!("b{i}")).collect(), &b_rows).unwrap();
    let k = rng.gen_range(1..=na.min(nb).min(8));
    (a, b, k)
}
