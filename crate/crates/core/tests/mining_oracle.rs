mod common;

use std::collections::BTreeSet;

use common::oracle::{cosine_table, oracle, random_store_pair};
use musr_core::mining::{
    margin_score, mine, score_candidates, similarity_search_accuracy, EmbeddingStore, MarginScorer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn margin_scores_match_the_all_pairs_oracle() {
    for seed in 0..10 {
        let (a, b, k) = random_store_pair(seed);
        let o = oracle(&a, &b, k);
        let scorer = MarginScorer::new(&a, &b, k).unwrap();
        for i in 0..a.len() {
            for j in 0..b.len() {
                assert!((scorer.score_rows(i, j).unwrap() - o.scores[i][j]).abs() <= 1e-6);
            }
        }
        let (i, j) = (seed as usize % a.len(), seed as usize % b.len());
        let direct = margin_score(&a.ids()[i], &b.ids()[j], &a, &b, k).unwrap();
        assert!((direct - o.scores[i][j]).abs() <= 1e-6);
    }
}

#[test]
fn mined_sets_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 100..120 {
        let (a, b, k) = random_store_pair(seed);
        let o = oracle(&a, &b, k);
        let scores: Vec<f64> = o.candidates.values().copied().collect();
        let threshold = scores[rng.gen_range(0..scores.len())];
        let mined = mine(&a, &b, k, threshold).unwrap();
        let got: BTreeSet<(String, String)> = mined.iter().map(|p| (p.src_id.clone(), p.tgt_id.clone())).collect();
        let want: BTreeSet<(String, String)> = o
            .candidates
            .iter()
            .filter(|(_, &s)| s >= threshold)
            .map(|(&(i, j), _)| (a.ids()[i].clone(), b.ids()[j].clone()))
            .collect();
        assert_eq!(got, want);
        for p in &mined {
            let (i, j) = (a.index_of(&p.src_id).unwrap(), b.index_of(&p.tgt_id).unwrap());
            assert!((p.margin_score - o.scores[i][j]).abs() <= 1e-6);
        }
        assert_eq!(score_candidates(&a, &b, k, f64::NEG_INFINITY).unwrap().len(), o.candidates.len());
    }
}

#[test]
fn mining_is_deterministic_and_sorted() {
    let (a, b, k) = random_store_pair(7);
    let x = mine(&a, &b, k, f64::NEG_INFINITY).unwrap();
    assert_eq!(x, mine(&a, &b, k, f64::NEG_INFINITY).unwrap());
    for w in x.windows(2) {
        assert!(
            w[0].margin_score > w[1].margin_score
                || (w[0].margin_score == w[1].margin_score && (&w[0].src_id, &w[0].tgt_id) < (&w[1].src_id, &w[1].tgt_id))
        );
    }
}

#[test]
fn margin_is_invariant_to_positive_rescaling() {
    let (a, b, k) = random_store_pair(3);
    let rows: Vec<Vec<f32>> = (0..a.len()).map(|i| a.row(i).iter().map(|v| v * 7.5).collect()).collect();
    let scaled = EmbeddingStore::from_rows("aa", a.ids().to_vec(), &rows).unwrap();
    for i in 0..a.len().min(5) {
        let s1 = margin_score(&a.ids()[i], &b.ids()[0], &a, &b, k).unwrap();
        let s2 = margin_score(&a.ids()[i], &b.ids()[0], &scaled, &b, k).unwrap();
        assert!((s1 - s2).abs() <= 1e-6);
    }
}

#[test]
fn accuracy_is_invariant_to_consistent_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 30;
    let dim = 8;
    let base: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let noisy: Vec<Vec<f32>> = base.iter().map(|r| r.iter().map(|v| v + rng.gen_range(-0.6..0.6)).collect()).collect();
    let ids = |p: &str| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let a = EmbeddingStore::from_rows("a", ids("a"), &base).unwrap();
    let b = EmbeddingStore::from_rows("b", ids("b"), &noisy).unwrap();
    let gold: Vec<(String, String)> = (0..n).map(|i| (format!("a{i}"), format!("b{i}"))).collect();
    let acc = similarity_search_accuracy(&a, &b, &gold).unwrap();

    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let pa = EmbeddingStore::from_rows("a", perm.iter().map(|&i| format!("a{i}")).collect(), &perm.iter().map(|&i| base[i].clone()).collect::<Vec<_>>()).unwrap();
    let pb = EmbeddingStore::from_rows("b", perm.iter().map(|&i| format!("b{i}")).collect(), &perm.iter().map(|&i| noisy[i].clone()).collect::<Vec<_>>()).unwrap();
    let pgold: Vec<(String, String)> = perm.iter().map(|&i| (format!("a{i}"), format!("b{i}"))).collect();
    assert_eq!(similarity_search_accuracy(&pa, &pb, &pgold).unwrap(), acc);
    // a sanity check that the case is not trivial
    let table = cosine_table(&a, &b);
    assert!(table.iter().flatten().any(|&c| c < 0.9));
}
