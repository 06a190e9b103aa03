//! Synthetic parallel data: English-like template sentences paired with
//! "cipher" languages that replace every English word through a fixed,
//! language-specific bijection onto invented words.
//!
//! Each cipher language has its own syllable inventory, so languages share no
//! surface forms with English or with each other.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{SentencePair, ENGLISH};

const DETERMINERS: &[&str] = &["the", "a", "every", "one", "some", "this"];
const ADJECTIVES: &[&str] = &[
    "big", "small", "red", "green", "old", "young", "happy", "sad", "quick", "slow", "bright", "dark", "tall", "short",
    "warm", "cold", "loud", "quiet", "brave", "kind",
];
const NOUNS: &[&str] = &[
    "dog", "cat", "bird", "man", "woman", "child", "farmer", "teacher", "doctor", "king", "horse", "fish", "tree",
    "house", "river", "road", "city", "garden", "boat", "book", "table", "window", "mountain", "forest", "friend",
    "student", "baker", "singer", "village", "bridge",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "follows", "helps", "watches", "paints", "builds", "visits", "carries", "meets",
    "remembers", "chases", "greets", "hears", "leaves", "reaches", "crosses", "opens", "feeds",
];
const ADVERBS: &[&str] = &["often", "never", "always", "slowly", "quickly", "quietly", "happily", "rarely", "again", "today"];
const PREPOSITIONS: &[&str] = &["near", "behind", "under", "above", "beside", "across", "inside", "around"];

/// Every English word the generator can emit.
pub fn english_lexicon() -> Vec<&'static str> {
    [DETERMINERS, ADJECTIVES, NOUNS, VERBS, ADVERBS, PREPOSITIONS].concat()
}

/// Syllable inventories, one per cipher language.
const INVENTORIES: &[(&str, &str)] = &[("bdgkm", "aeiou"), ("ptsvz", "aoy"), ("lnrhw", "eiu"), ("fjqx", "aei")];

pub const MAX_LANGUAGES: usize = 4;

/// Cipher language codes in generation order.
pub fn language_codes(n: usize) -> Vec<String> {
    ["xa", "xb", "xc", "xd"][..n].iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug)]
pub struct CipherLanguage {
    pub code: String,
    words: BTreeMap<&'static str, String>,
}

impl CipherLanguage {
    fn new(code: String, inventory: (&str, &str), rng: &mut ChaCha8Rng) -> Self {
        let cons: Vec<char> = inventory.0.chars().collect();
        let vows: Vec<char> = inventory.1.chars().collect();
        let mut used = HashSet::new();
        let mut words = BTreeMap::new();
        for w in english_lexicon() {
            let form = loop {
                let syllables = rng.gen_range(2..=3);
                let s: String = (0..syllables)
                    .flat_map(|_| [*cons.choose(rng).unwrap(), *vows.choose(rng).unwrap()])
                    .collect();
                if used.insert(s.clone()) {
                    break s;
                }
            };
            words.insert(w, form);
        }
        Self { code, words }
    }

    /// Word-by-word translation of an English sentence from the lexicon.
    pub fn translate(&self, english: &str) -> String {
        english.split(' ').map(|w| self.words[w].as_str()).collect::<Vec<_>>().join(" ")
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    out.push(DETERMINERS.choose(rng).unwrap());
    if rng.gen_bool(0.5) {
        out.push(ADJECTIVES.choose(rng).unwrap());
    }
    out.push(NOUNS.choose(rng).unwrap());
}

/// One random English sentence: subject, optional adverb, verb, object and an
/// optional prepositional phrase.
pub fn english_sentence(rng: &mut ChaCha8Rng) -> String {
    let mut w = Vec::new();
    noun_phrase(rng, &mut w);
    if rng.gen_bool(0.3) {
        w.push(ADVERBS.choose(rng).unwrap());
    }
    w.push(VERBS.choose(rng).unwrap());
    noun_phrase(rng, &mut w);
    if rng.gen_bool(0.4) {
        w.push(PREPOSITIONS.choose(rng).unwrap());
        noun_phrase(rng, &mut w);
    }
    w.join(" ")
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub languages: usize,
    pub train_per_language: usize,
    pub valid_per_language: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { languages: 3, train_per_language: 5000, valid_per_language: 100, test_size: 200, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub languages: Vec<CipherLanguage>,
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    /// Held-out English sentences, never used for training or validation.
    pub test_english: Vec<String>,
    /// `test[l][i]` translates `test_english[i]` into language `l`.
    pub test: Vec<Vec<String>>,
}

/// Builds the corpus. Test sentences are distinct from each other and from
/// every training and validation target.
pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.languages >= 1 && spec.languages <= MAX_LANGUAGES, "1..=4 cipher languages supported");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let languages: Vec<CipherLanguage> = language_codes(spec.languages)
        .into_iter()
        .zip(INVENTORIES)
        .map(|(code, &inv)| CipherLanguage::new(code, inv, &mut rng))
        .collect();
    let mut test_english = Vec::with_capacity(spec.test_size);
    let mut reserved = HashSet::new();
    while test_english.len() < spec.test_size {
        let s = english_sentence(&mut rng);
        if reserved.insert(s.clone()) {
            test_english.push(s);
        }
    }
    let draw = |n: usize, lang: &CipherLanguage, rng: &mut ChaCha8Rng| -> Vec<SentencePair> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let en = english_sentence(rng);
            if !reserved.contains(&en) {
                out.push(SentencePair::new(&lang.code, &lang.translate(&en), &en));
            }
        }
        out
    };
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for lang in &languages {
        train.extend(draw(spec.train_per_language, lang, &mut rng));
        valid.extend(draw(spec.valid_per_language, lang, &mut rng));
    }
    let test = languages.iter().map(|l| test_english.iter().map(|e| l.translate(e)).collect()).collect();
    SyntheticCorpus { languages, train, valid, test_english, test }
}

impl SyntheticCorpus {
    pub fn codes(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.code.as_str()).collect()
    }

    /// Every source and target sentence of the training split, for vocabulary learning.
    pub fn training_text(&self) -> impl Iterator<Item = &str> {
        self.train.iter().flat_map(|p| [p.src.as_str(), p.tgt.as_str()])
    }

    /// `(id, sentence)` lists for the test split of `lang`, English included.
    pub fn test_sentences(&self, lang: &str) -> Vec<(String, String)> {
        let texts: &[String] = if lang == ENGLISH {
            &self.test_english
        } else {
            let i = self.codes().iter().position(|c| *c == lang).expect("known language");
            &self.test[i]
        };
        texts.iter().enumerate().map(|(i, t)| (format!("{lang}-{i:04}"), t.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_has_about_a_hundred_distinct_words() {
        let lex = english_lexicon();
        let distinct: HashSet<_> = lex.iter().collect();
        assert_eq!(distinct.len(), lex.len());
        assert!((90..=110).contains(&lex.len()));
    }

    #[test]
    fn ciphers_are_bijections_with_disjoint_forms() {
        let c = generate(&SyntheticSpec { train_per_language: 10, valid_per_language: 2, test_size: 5, ..Default::default() });
        let mut all_forms = HashSet::new();
        for l in &c.languages {
            let forms: HashSet<&String> = l.words.values().collect();
            assert_eq!(forms.len(), english_lexicon().len());
            for f in forms {
                assert!(all_forms.insert(f.clone()));
                assert!(!english_lexicon().contains(&f.as_str()));
            }
        }
    }

    #[test]
    fn splits_are_sized_and_disjoint() {
        let spec = SyntheticSpec { train_per_language: 300, valid_per_language: 20, test_size: 50, ..Default::default() };
        let c = generate(&spec);
        assert_eq!(c.train.len(), 900);
        assert_eq!(c.valid.len(), 60);
        assert_eq!(c.test.len(), 3);
        let test: HashSet<&String> = c.test_english.iter().collect();
        assert_eq!(test.len(), 50);
        assert!(c.train.iter().chain(&c.valid).all(|p| !test.contains(&p.tgt)));
        for (l, lang) in c.languages.iter().enumerate() {
            assert_eq!(c.test[l][7], lang.translate(&c.test_english[7]));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec { train_per_language: 20, valid_per_language: 2, test_size: 5, ..Default::default() };
        let (a, b) = (generate(&spec), generate(&spec));
        assert_eq!(a.train, b.train);
        let c = generate(&SyntheticSpec { seed: 1, ..spec });
        assert_ne!(a.train, c.train);
    }
}
