//! Parallel corpus handling: TSV ingestion, cleaning filters and
//! temperature-based language resampling.
//!
//! Corpus lines are `lang<TAB>src<TAB>tgt[<TAB>h_fwd<TAB>h_rev]`, where the
//! target side is English and the optional columns are word-normalized
//! conditional cross-entropies `H(y|x)` and `H(x|y)` in nats per token.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use unicode_normalization::UnicodeNormalization;

use crate::config::KeyValues;

pub const ENGLISH: &str = "en";
pub const MAX_ENGLISH_CHARS: usize = 5000;
pub const FULL_SCALE_MIN_PAIRS: usize = 1000;
pub const DESK_MIN_PAIRS: usize = 10;
pub const DEFAULT_SAMPLING_ALPHA: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub lang: String,
    pub src: String,
    pub tgt: String,
    pub h_fwd: Option<f64>,
    pub h_rev: Option<f64>,
}

impl SentencePair {
    pub fn new(lang: &str, src: &str, tgt: &str) -> Self {
        Self { lang: lang.into(), src: src.into(), tgt: tgt.into(), h_fwd: None, h_rev: None }
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Self, CorpusError> {
        let bad = |msg: String| CorpusError::Malformed { line: lineno, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 5 {
            return Err(bad(format!("expected 3 or 5 tab-separated fields, found {}", cols.len())));
        }
        if cols[..3].iter().any(|c| c.trim().is_empty()) {
            return Err(bad("empty field".into()));
        }
        let entropy = |s: &str| -> Result<Option<f64>, CorpusError> {
            if s.is_empty() {
                return Ok(None);
            }
            match s.parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Ok(Some(v)),
                _ => Err(bad(format!("invalid cross-entropy {s:?}"))),
            }
        };
        let (h_fwd, h_rev) = if cols.len() == 5 { (entropy(cols[3])?, entropy(cols[4])?) } else { (None, None) };
        Ok(Self { lang: cols[0].trim().to_string(), src: cols[1].to_string(), tgt: cols[2].to_string(), h_fwd, h_rev })
    }

    pub fn to_line(&self) -> String {
        match (self.h_fwd, self.h_rev) {
            (None, None) => format!("{}\t{}\t{}", self.lang, self.src, self.tgt),
            (f, r) => format!(
                "{}\t{}\t{}\t{}\t{}",
                self.lang,
                self.src,
                self.tgt,
                f.map(|v| v.to_string()).unwrap_or_default(),
                r.map(|v| v.to_string()).unwrap_or_default()
            ),
        }
    }
}

/// A line that could not be parsed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Malformed {
    pub line: usize,
    pub reason: String,
}

/// Reads a corpus, collecting malformed lines instead of failing on them.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<(Vec<SentencePair>, Vec<Malformed>), CorpusError> {
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match SentencePair::parse_line(&line, i + 1) {
            Ok(p) => pairs.push(p),
            Err(CorpusError::Malformed { line, msg }) => bad.push(Malformed { line, reason: msg }),
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, bad))
}

/// Reads a corpus, failing on the first malformed line.
pub fn read_corpus_strict<R: BufRead>(reader: R) -> Result<Vec<SentencePair>, CorpusError> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            pairs.push(SentencePair::parse_line(&line, i + 1)?);
        }
    }
    Ok(pairs)
}

/// Language identification: `(language code, confidence)`, or `None` when the
/// model does not cover the text's language.
pub trait LanguageId {
    fn supports(&self, lang: &str) -> bool;
    fn identify(&self, text: &str) -> Option<(String, f64)>;
}

/// `|H(y|x) - H(x|y)| + (H(y|x) + H(x|y)) / 2`; lower is better.
pub fn dual_ce_score(h_fwd: f64, h_rev: f64) -> f64 {
    (h_fwd - h_rev).abs() + 0.5 * (h_fwd + h_rev)
}

#[derive(Clone, Debug)]
pub struct CleanRules {
    pub max_english_chars: usize,
    pub min_pairs_per_language: usize,
    /// Pairs scoring above this are dropped; `None` disables the filter.
    pub dual_ce_threshold: Option<f64>,
    pub min_langid_confidence: f64,
}

impl CleanRules {
    pub fn full_scale() -> Self {
        Self {
            max_english_chars: MAX_ENGLISH_CHARS,
            min_pairs_per_language: FULL_SCALE_MIN_PAIRS,
            dual_ce_threshold: None,
            min_langid_confidence: 0.0,
        }
    }

    pub fn desk() -> Self {
        Self { min_pairs_per_language: DESK_MIN_PAIRS, ..Self::full_scale() }
    }
}

/// Per-rule drop counts from [`clean`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropReport {
    pub input: usize,
    pub malformed: usize,
    pub duplicate: usize,
    pub too_long: usize,
    pub language_id: usize,
    pub dual_ce: usize,
    /// Pairs that passed without a dual-CE score because an entropy was missing.
    pub unscored: usize,
    pub low_resource: usize,
    pub dropped_languages: Vec<String>,
    pub output: usize,
}

impl DropReport {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("input", self.input);
        kv.set("malformed", self.malformed);
        kv.set("dup", self.duplicate);
        kv.set("len", self.too_long);
        kv.set("langid", self.language_id);
        kv.set("dual_ce", self.dual_ce);
        kv.set("unscored", self.unscored);
        kv.set("low_resource", self.low_resource);
        kv.set("dropped_languages", self.dropped_languages.join(","));
        kv.set("output", self.output);
        kv
    }
}

fn normalize(s: &str) -> String {
    s.trim().nfc().collect()
}

/// Applies, in order: normalization (NFC, trimmed), exact deduplication
/// (first occurrence kept), the English length cap, language identification,
/// the dual-CE threshold and finally the per-language minimum size.
///
/// Without a language identifier, or for languages it does not support, the
/// only check is that the source is not English.
pub fn clean(
    pairs: impl IntoIterator<Item = SentencePair>,
    rules: &CleanRules,
    langid: Option<&dyn LanguageId>,
) -> (Vec<SentencePair>, DropReport) {
    let mut report = DropReport::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut kept = Vec::new();
    for mut p in pairs {
        report.input += 1;
        p.src = normalize(&p.src);
        p.tgt = normalize(&p.tgt);
        p.lang = p.lang.trim().to_string();
        if !seen.insert((p.src.clone(), p.tgt.clone())) {
            report.duplicate += 1;
            continue;
        }
        if p.tgt.chars().count() > rules.max_english_chars {
            report.too_long += 1;
            continue;
        }
        if !passes_langid(&p, rules, langid) {
            report.language_id += 1;
            continue;
        }
        if let Some(th) = rules.dual_ce_threshold {
            match (p.h_fwd, p.h_rev) {
                (Some(f), Some(r)) if dual_ce_score(f, r) > th => {
                    report.dual_ce += 1;
                    continue;
                }
                (Some(_), Some(_)) => {}
                _ => report.unscored += 1,
            }
        }
        kept.push(p);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &kept {
        *counts.entry(p.lang.as_str()).or_default() += 1;
    }
    let small: HashSet<String> =
        counts.iter().filter(|&(_, &n)| n < rules.min_pairs_per_language).map(|(l, _)| l.to_string()).collect();
    report.dropped_languages = {
        let mut v: Vec<String> = small.iter().cloned().collect();
        v.sort();
        v
    };
    let before = kept.len();
    kept.retain(|p| !small.contains(&p.lang));
    report.low_resource = before - kept.len();
    report.output = kept.len();
    (kept, report)
}

fn passes_langid(p: &SentencePair, rules: &CleanRules, langid: Option<&dyn LanguageId>) -> bool {
    if p.lang == ENGLISH {
        return false;
    }
    let Some(id) = langid else { return true };
    if id.supports(&p.lang) {
        matches!(id.identify(&p.src), Some((l, c)) if l == p.lang && c >= rules.min_langid_confidence)
    } else {
        !matches!(id.identify(&p.src), Some((l, _)) if l == ENGLISH)
    }
}

/// Pair counts per language and the derived sampling distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageStats {
    pub languages: Vec<String>,
    pub counts: Vec<usize>,
    /// `n_i / sum n`
    pub p: Vec<f64>,
    /// `p_i^a / sum p^a`
    pub q: Vec<f64>,
    pub sampling_alpha: f64,
}

impl LanguageStats {
    pub fn from_counts(languages: Vec<String>, counts: Vec<usize>, sampling_alpha: f64) -> Result<Self, CorpusError> {
        if languages.is_empty() || languages.len() != counts.len() {
            return Err(CorpusError::Input("language statistics need one count per language".into()));
        }
        if counts.iter().any(|&n| n == 0) {
            return Err(CorpusError::Input("every language needs at least one pair".into()));
        }
        if !(sampling_alpha > 0.0) || !sampling_alpha.is_finite() {
            return Err(CorpusError::Input(format!("sampling alpha {sampling_alpha} must be positive")));
        }
        let total: f64 = counts.iter().map(|&n| n as f64).sum();
        let p: Vec<f64> = counts.iter().map(|&n| n as f64 / total).collect();
        // n_i^a / sum n^a equals p_i^a / sum p^a and stays exact for integer roots
        let powered: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(sampling_alpha)).collect();
        let z: f64 = powered.iter().sum();
        let q = powered.iter().map(|v| v / z).collect();
        Ok(Self { languages, counts, p, q, sampling_alpha })
    }

    pub fn from_pairs(pairs: &[SentencePair], sampling_alpha: f64) -> Result<Self, CorpusError> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for p in pairs {
            *counts.entry(p.lang.as_str()).or_default() += 1;
        }
        let (langs, ns) = counts.into_iter().map(|(l, n)| (l.to_string(), n)).unzip();
        Self::from_counts(langs, ns, sampling_alpha)
    }

    /// Language indices drawn from the multinomial over `q`.
    pub fn draw_languages<R: Rng + ?Sized>(&self, total: usize, rng: &mut R) -> Vec<usize> {
        let dist = WeightedIndex::new(&self.q).expect("q is a valid distribution");
        (0..total).map(|_| dist.sample(rng)).collect()
    }
}

/// Resamples `total` pairs: language by `q`, then a uniform pair (with
/// replacement) within the language.
pub fn temperature_sample<R: Rng + ?Sized>(
    pairs: &[SentencePair],
    sampling_alpha: f64,
    total: usize,
    rng: &mut R,
) -> Result<(Vec<SentencePair>, LanguageStats), CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::Input("cannot sample from an empty corpus".into()));
    }
    let stats = LanguageStats::from_pairs(pairs, sampling_alpha)?;
    let mut by_lang: Vec<Vec<usize>> = vec![Vec::new(); stats.languages.len()];
    for (i, p) in pairs.iter().enumerate() {
        let li = stats.languages.binary_search(&p.lang).expect("language present in stats");
        by_lang[li].push(i);
    }
    let out = stats
        .draw_languages(total, rng)
        .into_iter()
        .map(|li| {
            let pool = &by_lang[li];
            pairs[pool[rng.gen_range(0..pool.len())]].clone()
        })
        .collect();
    Ok((out, stats))
}
