//! Embedding stores, exact cosine kNN, similarity-search accuracy and
//! margin-based bitext mining.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::model::SeqModel;
use crate::numerics::Real;
use crate::tokenizer::Vocabulary;

pub const STORE_MAGIC: &[u8; 4] = b"MEMB";
pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 4;
pub const SWEEP_RESOLUTION: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unit-normalized sentence embeddings with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    lang: String,
}

impl EmbeddingStore {
    /// Normalizes every row to unit L2 norm. Zero or non-finite rows are rejected.
    pub fn new(lang: &str, dim: usize, ids: Vec<String>, mut rows: Vec<f32>) -> Result<Self, MiningError> {
        if dim == 0 {
            return Err(MiningError::Input("embedding dimension must be positive".into()));
        }
        if rows.len() != ids.len() * dim {
            return Err(MiningError::Input(format!(
                "{} ids but {} values for dimension {dim}",
                ids.len(),
                rows.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(MiningError::Input(format!("duplicate sentence id {dup:?}")));
        }
        for (i, row) in rows.chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(MiningError::Numerical(format!("row {} ({:?}) has norm {norm}", i, ids[i])));
            }
            for v in row {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(Self { dim, ids, rows, lang: lang.to_string() })
    }

    pub fn from_rows(lang: &str, ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self, MiningError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(MiningError::Input("rows differ in length".into()));
        }
        Self::new(lang, dim, ids, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    fn id_index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), MiningError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let lang = self.lang.as_bytes();
        w.write_all(&(lang.len() as u32).to_le_bytes())?;
        w.write_all(lang)?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for v in &self.rows {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, MiningError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(MiningError::Format("not an embedding store (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != STORE_VERSION {
            return Err(MiningError::Format(format!("unsupported embedding store version {version}")));
        }
        let dim = read_u32(r)? as usize;
        let count = read_u64(r)? as usize;
        let lang = read_string(r)?;
        let ids = (0..count).map(|_| read_string(r)).collect::<Result<Vec<_>, _>>()?;
        let mut raw = vec![0u8; count * dim * 4];
        read_exact(r, &mut raw)?;
        let rows = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(MiningError::Format("trailing bytes after embedding rows".into()));
        }
        Self::new(&lang, dim, ids, rows)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), MiningError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => MiningError::Format("truncated embedding store".into()),
        _ => MiningError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, MiningError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, MiningError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, MiningError> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| MiningError::Format("id is not valid UTF-8".into()))
}

/// Dot product of unit rows: 32-bit products, 64-bit sum.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x * y)).sum()
}

/// A neighbor index and its cosine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub cosine: f64,
}

/// The `k` rows of `index` most similar to `query`, best first; equal cosines
/// are ordered by row index.
fn top_k(query: &[f32], index: &EmbeddingStore, k: usize) -> Vec<Neighbor> {
    let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
    for j in 0..index.len() {
        let c = cosine(query, index.row(j));
        // strict comparison keeps the earlier index on ties
        if best.len() == k && c <= best[k - 1].cosine {
            continue;
        }
        let pos = best.partition_point(|n| n.cosine >= c);
        best.insert(pos, Neighbor { index: j, cosine: c });
        best.truncate(k);
    }
    best
}

/// Exact brute-force kNN of every row of `queries` among the rows of `index`.
pub fn knn(queries: &EmbeddingStore, index: &EmbeddingStore, k: usize) -> Result<Vec<Vec<Neighbor>>, MiningError> {
    check_pair(queries, index)?;
    if k == 0 || k > index.len() {
        return Err(MiningError::Input(format!("k = {k} outside 1..={}", index.len())));
    }
    Ok((0..queries.len()).into_par_iter().map(|i| top_k(queries.row(i), index, k)).collect())
}

fn check_pair(a: &EmbeddingStore, b: &EmbeddingStore) -> Result<(), MiningError> {
    if a.dim != b.dim {
        return Err(MiningError::Input(format!("dimension mismatch: {} vs {}", a.dim, b.dim)));
    }
    if a.is_empty() || b.is_empty() {
        return Err(MiningError::Input("empty embedding store".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchAccuracy {
    pub forward: f64,
    pub backward: f64,
    pub mean: f64,
}

/// Fraction of rows whose nearest neighbor in the other store is the gold
/// partner, in both directions. `gold` maps ids of `a` to ids of `b`.
pub fn similarity_search_accuracy(
    a: &EmbeddingStore,
    b: &EmbeddingStore,
    gold: &[(String, String)],
) -> Result<SearchAccuracy, MiningError> {
    if a.len() != b.len() {
        return Err(MiningError::Input(format!("store sizes differ: {} vs {}", a.len(), b.len())));
    }
    check_pair(a, b)?;
    let (ai, bi) = (a.id_index(), b.id_index());
    let mut fwd = vec![usize::MAX; a.len()];
    let mut bwd = vec![usize::MAX; b.len()];
    for (x, y) in gold {
        let i = *ai.get(x.as_str()).ok_or_else(|| MiningError::Input(format!("gold id {x:?} not in first store")))?;
        let j = *bi.get(y.as_str()).ok_or_else(|| MiningError::Input(format!("gold id {y:?} not in second store")))?;
        if fwd[i] != usize::MAX || bwd[j] != usize::MAX {
            return Err(MiningError::Input(format!("gold pair ({x:?}, {y:?}) breaks the bijection")));
        }
        fwd[i] = j;
        bwd[j] = i;
    }
    if gold.len() != a.len() {
        return Err(MiningError::Input(format!("gold covers {} of {} rows", gold.len(), a.len())));
    }
    let hits = |q: &EmbeddingStore, idx: &EmbeddingStore, want: &[usize]| -> Result<f64, MiningError> {
        let nn = knn(q, idx, 1)?;
        Ok(nn.iter().zip(want).filter(|(n, &w)| n[0].index == w).count() as f64 / q.len() as f64)
    };
    let forward = hits(a, b, &fwd)?;
    let backward = hits(b, a, &bwd)?;
    Ok(SearchAccuracy { forward, backward, mean: 0.5 * (forward + backward) })
}

/// Margin scoring with the per-row neighborhood means precomputed.
#[derive(Clone, Debug)]
pub struct MarginScorer<'s> {
    a: &'s EmbeddingStore,
    b: &'s EmbeddingStore,
    k: usize,
    /// Mean cosine of each row of `a` to its k nearest rows of `b`.
    a_mean: Vec<f64>,
    b_mean: Vec<f64>,
}

impl<'s> MarginScorer<'s> {
    pub fn new(a: &'s EmbeddingStore, b: &'s EmbeddingStore, k: usize) -> Result<Self, MiningError> {
        check_pair(a, b)?;
        if k == 0 || k > a.len().min(b.len()) {
            return Err(MiningError::Input(format!("k = {k} outside 1..={}", a.len().min(b.len()))));
        }
        let mean = |nn: Vec<Vec<Neighbor>>| nn.iter().map(|v| v.iter().map(|n| n.cosine).sum::<f64>() / k as f64).collect();
        let a_mean = mean(knn(a, b, k)?);
        let b_mean = mean(knn(b, a, k)?);
        Ok(Self { a, b, k, a_mean, b_mean })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Score of row `i` of `a` against row `j` of `b`.
    pub fn score_rows(&self, i: usize, j: usize) -> Result<f64, MiningError> {
        margin(cosine(self.a.row(i), self.b.row(j)), self.a_mean[i], self.b_mean[j])
    }
}

fn margin(cos: f64, mean_x: f64, mean_y: f64) -> Result<f64, MiningError> {
    let s = cos / (0.5 * mean_x + 0.5 * mean_y);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(MiningError::Numerical(format!(
            "margin score undefined: cosine {cos}, neighborhood means {mean_x} and {mean_y}"
        )))
    }
}

/// Ratio of `cos(x, y)` to the average of the mean cosines of `x` and `y`
/// with their `k` nearest neighbors in the other store.
pub fn margin_score(x_id: &str, y_id: &str, a: &EmbeddingStore, b: &EmbeddingStore, k: usize) -> Result<f64, MiningError> {
    check_pair(a, b)?;
    if k == 0 || k > a.len().min(b.len()) {
        return Err(MiningError::Input(format!("k = {k} outside 1..={}", a.len().min(b.len()))));
    }
    let i = a.index_of(x_id).ok_or_else(|| MiningError::Input(format!("unknown id {x_id:?}")))?;
    let j = b.index_of(y_id).ok_or_else(|| MiningError::Input(format!("unknown id {y_id:?}")))?;
    let mean = |q: &[f32], idx: &EmbeddingStore| top_k(q, idx, k).iter().map(|n| n.cosine).sum::<f64>() / k as f64;
    margin(cosine(a.row(i), b.row(j)), mean(a.row(i), b), mean(b.row(j), a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub src_id: String,
    pub tgt_id: String,
    pub margin_score: f64,
    pub accepted: bool,
}

/// Every forward or backward nearest-neighbor pair with its margin score and
/// acceptance at `threshold`, sorted by score descending then by ids.
pub fn score_candidates(
    a: &EmbeddingStore,
    b: &EmbeddingStore,
    k: usize,
    threshold: f64,
) -> Result<Vec<ScoredPair>, MiningError> {
    if threshold.is_nan() {
        return Err(MiningError::Input("threshold is NaN".into()));
    }
    let scorer = MarginScorer::new(a, b, k)?;
    let mut cand: BTreeSet<(usize, usize)> = BTreeSet::new();
    cand.extend(knn(a, b, 1)?.iter().enumerate().map(|(i, n)| (i, n[0].index)));
    cand.extend(knn(b, a, 1)?.iter().enumerate().map(|(j, n)| (n[0].index, j)));
    let mut out = cand
        .into_iter()
        .map(|(i, j)| {
            let s = scorer.score_rows(i, j)?;
            Ok(ScoredPair { src_id: a.ids[i].clone(), tgt_id: b.ids[j].clone(), margin_score: s, accepted: s >= threshold })
        })
        .collect::<Result<Vec<_>, MiningError>>()?;
    sort_pairs(&mut out);
    Ok(out)
}

pub fn sort_pairs(pairs: &mut [ScoredPair]) {
    pairs.sort_by(|x, y| {
        y.margin_score
            .total_cmp(&x.margin_score)
            .then_with(|| x.src_id.cmp(&y.src_id))
            .then_with(|| x.tgt_id.cmp(&y.tgt_id))
    });
}

/// Accepted candidate pairs only.
pub fn mine(a: &EmbeddingStore, b: &EmbeddingStore, k: usize, threshold: f64) -> Result<Vec<ScoredPair>, MiningError> {
    let mut v = score_candidates(a, b, k, threshold)?;
    v.retain(|p| p.accepted);
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    fn from_counts(correct: usize, mined: usize, gold: usize) -> Self {
        let precision = if mined == 0 { 0.0 } else { correct as f64 / mined as f64 };
        let recall = correct as f64 / gold as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

/// Precision, recall and F1 of the accepted pairs in `mined`.
pub fn f1_against_gold(mined: &[ScoredPair], gold: &HashSet<(String, String)>) -> Result<PrecisionRecall, MiningError> {
    if gold.is_empty() {
        return Err(MiningError::Input("gold set is empty".into()));
    }
    let accepted: HashSet<(&str, &str)> =
        mined.iter().filter(|p| p.accepted).map(|p| (p.src_id.as_str(), p.tgt_id.as_str())).collect();
    let correct = accepted.iter().filter(|&&(s, t)| gold.contains(&(s.to_string(), t.to_string()))).count();
    Ok(PrecisionRecall::from_counts(correct, accepted.len(), gold.len()))
}

/// Picks the threshold on a `resolution` grid that maximizes F1 over the
/// scored candidates. Among equal F1 values the highest threshold wins.
pub fn sweep_threshold(
    candidates: &[ScoredPair],
    gold: &HashSet<(String, String)>,
    resolution: f64,
) -> Result<(f64, PrecisionRecall), MiningError> {
    if gold.is_empty() {
        return Err(MiningError::Input("gold set is empty".into()));
    }
    if candidates.is_empty() {
        return Err(MiningError::Input("no candidates to sweep".into()));
    }
    if !(resolution > 0.0) {
        return Err(MiningError::Input(format!("sweep resolution {resolution} must be positive")));
    }
    let mut sorted = candidates.to_vec();
    sort_pairs(&mut sorted);
    let hi = (sorted[0].margin_score / resolution).ceil() as i64;
    let lo = (sorted[sorted.len() - 1].margin_score / resolution).floor() as i64;
    let mut best: Option<(f64, PrecisionRecall)> = None;
    let (mut taken, mut correct) = (0usize, 0usize);
    for step in (lo..=hi).rev() {
        let th = step as f64 * resolution;
        while taken < sorted.len() && sorted[taken].margin_score >= th {
            let p = &sorted[taken];
            if gold.contains(&(p.src_id.clone(), p.tgt_id.clone())) {
                correct += 1;
            }
            taken += 1;
        }
        let pr = PrecisionRecall::from_counts(correct, taken, gold.len());
        if best.map_or(true, |(_, b)| pr.f1 > b.f1) {
            best = Some((th, pr));
        }
    }
    Ok(best.expect("grid holds at least one threshold"))
}

/// Mined pairs as `score<TAB>src_id<TAB>tgt_id` lines.
pub fn format_mined(pairs: &[ScoredPair]) -> String {
    pairs.iter().map(|p| format!("{:.6}\t{}\t{}\n", p.margin_score, p.src_id, p.tgt_id)).collect()
}

/// A sentence that could not be embedded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedFailure {
    pub id: String,
    pub reason: String,
}

/// Embeds `(id, text)` sentences in inference mode. Sentences with no tokens
/// besides the terminator, or too long for the encoder, are reported as
/// failures and left out of the store.
pub fn embed_corpus<T: Real>(
    sentences: &[(String, String)],
    model: &SeqModel<T>,
    vocab: &Vocabulary,
    lang: &str,
    batch_size: usize,
) -> Result<(EmbeddingStore, Vec<EmbedFailure>), MiningError> {
    if batch_size == 0 {
        return Err(MiningError::Input("batch size must be positive".into()));
    }
    let max_len = model.config().max_src_positions;
    let mut failures = Vec::new();
    let mut ok: Vec<(usize, Vec<u32>)> = Vec::new();
    for (i, (id, text)) in sentences.iter().enumerate() {
        let ids = vocab.encode(text);
        if ids.len() <= 1 {
            failures.push(EmbedFailure { id: id.clone(), reason: "no tokens".into() });
        } else if ids.len() > max_len {
            failures.push(EmbedFailure { id: id.clone(), reason: format!("{} tokens exceed {max_len}", ids.len()) });
        } else {
            ok.push((i, ids));
        }
    }
    // length-sorted batches waste less padding; padding does not change values
    let mut order: Vec<usize> = (0..ok.len()).collect();
    order.sort_by_key(|&n| (ok[n].1.len(), n));
    let dim = model.config().dim;
    let mut rows = vec![0f32; ok.len() * dim];
    for chunk in order.chunks(batch_size) {
        let batch: Vec<Vec<u32>> = chunk.iter().map(|&n| ok[n].1.clone()).collect();
        for (&n, e) in chunk.iter().zip(model.embed(&batch)?) {
            for (dst, v) in rows[n * dim..(n + 1) * dim].iter_mut().zip(e) {
                *dst = v.to_f32().unwrap_or(f32::NAN);
            }
        }
    }
    let ids = ok.iter().map(|(i, _)| sentences[*i].0.clone()).collect();
    Ok((EmbeddingStore::new(lang, dim, ids, rows)?, failures))
}
