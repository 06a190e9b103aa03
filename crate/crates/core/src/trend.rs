//! The synthetic two-phase experiment: pretrain on cipher languages, finetune
//! with the consistency term, and measure similarity-search accuracy after
//! each phase.

use std::time::Instant;

use crate::corpus::{SentencePair, ENGLISH};
use crate::mining::{embed_corpus, similarity_search_accuracy, EmbeddingStore, MiningError};
use crate::model::{ModelConfig, SeqModel};
use crate::synthetic::{generate, SyntheticCorpus, SyntheticSpec};
use crate::tokenizer::{learn_bpe, Vocabulary};
use crate::training::{train, Example, NullSink, Phase, Start, TrainConfig, TrainSink, TrainingError};

#[derive(Debug, thiserror::Error)]
pub enum TrendError {
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Clone, Debug)]
pub struct TrendSettings {
    pub data: SyntheticSpec,
    pub vocab_size: usize,
    pub bpe_min_freq: u64,
    /// `vocab_size` is overwritten with the learned vocabulary's size.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub crossconst: TrainConfig,
}

impl TrendSettings {
    /// Desk-scale model and schedules with the default synthetic corpus.
    pub fn desk() -> Self {
        Self {
            data: SyntheticSpec::default(),
            vocab_size: 1024,
            bpe_min_freq: 2,
            model: ModelConfig::desk(0),
            pretrain: TrainConfig::desk(Phase::Pretrain),
            crossconst: TrainConfig::desk(Phase::CrossConst),
        }
    }
}

/// Mean bidirectional accuracies over language pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseAccuracy {
    /// Averaged over cipher languages paired with English.
    pub xx_en: f64,
    /// Averaged over pairs of distinct cipher languages.
    pub xx_yy: f64,
}

#[derive(Clone, Debug)]
pub struct TrendReport {
    pub seed: u64,
    pub vocab_size: usize,
    pub pretrain: PhaseAccuracy,
    pub crossconst: PhaseAccuracy,
    pub pretrain_steps: u64,
    pub crossconst_steps: u64,
    pub seconds: f64,
}

fn examples(vocab: &Vocabulary, pairs: &[SentencePair]) -> Vec<Example> {
    pairs.iter().map(|p| Example { src: vocab.encode(&p.src), tgt: vocab.encode(&p.tgt) }).collect()
}

/// Similarity-search accuracies of `model` on the held-out split.
pub fn measure(model: &SeqModel<f32>, vocab: &Vocabulary, corpus: &SyntheticCorpus) -> Result<PhaseAccuracy, TrendError> {
    let codes = corpus.codes();
    let store = |lang: &str| -> Result<EmbeddingStore, TrendError> {
        let (s, failures) = embed_corpus(&corpus.test_sentences(lang), model, vocab, lang, 64)?;
        if !failures.is_empty() {
            return Err(MiningError::Input(format!("{} held-out {lang} sentences failed to embed", failures.len())).into());
        }
        Ok(s)
    };
    let en = store(ENGLISH)?;
    let stores: Vec<EmbeddingStore> = codes.iter().map(|c| store(c)).collect::<Result<_, _>>()?;
    let gold = |a: &EmbeddingStore, b: &EmbeddingStore| -> Vec<(String, String)> {
        a.ids().iter().cloned().zip(b.ids().iter().cloned()).collect()
    };
    let mut xx_en = 0.0;
    for s in &stores {
        xx_en += similarity_search_accuracy(s, &en, &gold(s, &en))?.mean;
    }
    let mut xx_yy = 0.0;
    let mut pairs = 0;
    for i in 0..stores.len() {
        for j in i + 1..stores.len() {
            xx_yy += similarity_search_accuracy(&stores[i], &stores[j], &gold(&stores[i], &stores[j]))?.mean;
            pairs += 1;
        }
    }
    Ok(PhaseAccuracy { xx_en: xx_en / stores.len() as f64, xx_yy: if pairs > 0 { xx_yy / pairs as f64 } else { f64::NAN } })
}

/// Runs both phases with data, initialization and batching all derived from `seed`.
pub fn run(settings: &TrendSettings, seed: u64, sink: &mut dyn TrainSink<f32>) -> Result<TrendReport, TrendError> {
    let started = Instant::now();
    let corpus = generate(&SyntheticSpec { seed, ..settings.data.clone() });
    let vocab = learn_bpe(corpus.training_text(), settings.vocab_size, settings.bpe_min_freq)?;
    let train_set = examples(&vocab, &corpus.train);
    let valid_set = examples(&vocab, &corpus.valid);
    let model_cfg = ModelConfig { vocab_size: vocab.len(), ..settings.model.clone() };

    let p1 = TrainConfig { seed, ..settings.pretrain.clone() };
    let phase1 = train(Start::Scratch(model_cfg), &train_set, &valid_set, &p1, sink)?;
    let pretrain = measure(&phase1.model, &vocab, &corpus)?;

    let p2 = TrainConfig { seed, ..settings.crossconst.clone() };
    let phase2 = train(Start::Checkpoint(phase1.model), &train_set, &valid_set, &p2, sink)?;
    let crossconst = measure(&phase2.model, &vocab, &corpus)?;

    Ok(TrendReport {
        seed,
        vocab_size: vocab.len(),
        pretrain,
        crossconst,
        pretrain_steps: phase1.steps,
        crossconst_steps: phase2.steps,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// [`run`] without progress reporting.
pub fn run_quiet(settings: &TrendSettings, seed: u64) -> Result<TrendReport, TrendError> {
    run(settings, seed, &mut NullSink)
}
