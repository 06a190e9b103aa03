use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use musr_core::config::KeyValues;
use musr_core::corpus::{
    clean, dual_ce_score, read_corpus, temperature_sample, CleanRules, SentencePair, DEFAULT_SAMPLING_ALPHA,
    DESK_MIN_PAIRS, FULL_SCALE_MIN_PAIRS, MAX_ENGLISH_CHARS,
};
use musr_core::mining::{
    embed_corpus, f1_against_gold, format_mined, score_candidates, similarity_search_accuracy, sweep_threshold,
    EmbeddingStore, DEFAULT_K, SWEEP_RESOLUTION,
};
use musr_core::model::{ModelConfig, SeqModel};
use musr_core::tokenizer::{learn_bpe, Vocabulary};
use musr_core::training::{train as run_phase, Example, Phase, Start, StepRecord, TrainConfig, TrainSink};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::run::{usage, with_suffix, write_atomic, Preset, Run, Settings};
use crate::{Common, EmbedArgs, LearnVocabArgs, MineArgs, PhaseArg, PrepareArgs, ScoreFilterArgs, SearchEvalArgs, TrainArgs};

const DEFAULT_SEED: u64 = 1;
const EMBED_BATCH: usize = 64;

fn flags(common: &Common, own: &[(&str, Option<String>)]) -> Result<KeyValues> {
    let mut kv = crate::run::parse_overrides(&common.overrides)?;
    for (k, v) in own {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    if let Some(s) = common.seed {
        kv.set("seed", s);
    }
    Ok(kv)
}

fn settings(common: &Common, own: &[(&str, Option<String>)], defaults: impl Fn(Preset) -> KeyValues) -> Result<Settings> {
    let kv = flags(common, own)?;
    Settings::layered(common.preset.as_deref(), common.config.as_deref(), &kv, |p| {
        let mut d = defaults(p);
        d.set("seed", DEFAULT_SEED);
        d
    })
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn manifest_path(common: &Common, primary: &Path) -> PathBuf {
    common.manifest.clone().unwrap_or_else(|| with_suffix(primary, ".manifest.json"))
}

/// Reads a corpus, failing on the first malformed line.
fn read_pairs(path: &Path) -> Result<Vec<(usize, SentencePair)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = SentencePair::parse_line(&line, i + 1).with_context(|| path.display().to_string())?;
        out.push((i + 1, pair));
    }
    Ok(out)
}

fn pairs_text(pairs: &[SentencePair]) -> Vec<u8> {
    pairs.iter().flat_map(|p| format!("{}\n", p.to_line()).into_bytes()).collect()
}

pub fn prepare(common: &Common, a: PrepareArgs) -> Result<()> {
    let s = settings(
        common,
        &[
            ("min_pairs", opt(&a.min_pairs)),
            ("max_english_chars", opt(&a.max_english_chars)),
            ("dual_ce_threshold", opt(&a.dual_ce_threshold)),
            ("sample_size", opt(&a.sample)),
            ("sampling_alpha", opt(&a.sampling_alpha)),
        ],
        |p| {
            let mut kv = KeyValues::new();
            kv.set("min_pairs", if p == Preset::Desk { DESK_MIN_PAIRS } else { FULL_SCALE_MIN_PAIRS });
            kv.set("max_english_chars", MAX_ENGLISH_CHARS);
            kv.set("dual_ce_threshold", "none");
            kv.set("sample_size", 0);
            kv.set("sampling_alpha", DEFAULT_SAMPLING_ALPHA);
            kv
        },
    )?;
    let mut run = Run::new("prepare");
    run.input(&a.input)?;
    let rules = CleanRules {
        max_english_chars: s.get("max_english_chars")?,
        min_pairs_per_language: s.get("min_pairs")?,
        dual_ce_threshold: s.get_opt("dual_ce_threshold")?,
        min_langid_confidence: 0.0,
    };
    let (pairs, malformed) = if a.skip_malformed {
        let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
        read_corpus(BufReader::new(f)).with_context(|| a.input.display().to_string())?
    } else {
        (read_pairs(&a.input)?.into_iter().map(|(_, p)| p).collect(), Vec::new())
    };
    for m in &malformed {
        eprintln!("warning: {}: line {}: {} (skipped)", a.input.display(), m.line, m.reason);
    }
    let (kept, mut report) = clean(pairs, &rules, None);
    report.malformed = malformed.len();
    report.input += malformed.len();
    let seed: u64 = s.get("seed")?;
    let sample_size: usize = s.get("sample_size")?;
    let output = if sample_size > 0 {
        if kept.is_empty() {
            bail!("nothing left to sample after cleaning");
        }
        let alpha: f64 = s.get("sampling_alpha")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sampled, stats) = temperature_sample(&kept, alpha, sample_size, &mut rng).map_err(|e| usage(e.to_string()))?;
        for (i, l) in stats.languages.iter().enumerate() {
            eprintln!("{l}: n={} p={:.6} q={:.6}", stats.counts[i], stats.p[i], stats.q[i]);
        }
        sampled
    } else {
        kept
    };
    let report_text = report.to_key_values().to_text();
    print!("{report_text}");
    run.output(&a.output, pairs_text(&output));
    if let Some(r) = &a.report {
        run.output(r, report_text.into_bytes());
    }
    run.note("report", json!(report.to_key_values().iter().collect::<HashMap<_, _>>()));
    run.note("written", json!(output.len()));
    run.finish(&s, seed, common.threads, &manifest_path(common, &a.output))
}

pub fn learn_vocab(common: &Common, a: LearnVocabArgs) -> Result<()> {
    let s = settings(common, &[("bpe_vocab_size", opt(&a.size)), ("bpe_min_freq", opt(&a.min_freq))], |p| {
        let mut kv = KeyValues::new();
        match p {
            Preset::Full => {
                kv.set("bpe_vocab_size", 256_000);
                kv.set("bpe_min_freq", 20);
            }
            Preset::Desk => {
                kv.set("bpe_vocab_size", 1024);
                kv.set("bpe_min_freq", 2);
            }
        }
        kv
    })?;
    let mut run = Run::new("learn-vocab");
    run.input(&a.input)?;
    let pairs = read_pairs(&a.input)?;
    let texts = pairs.iter().flat_map(|(_, p)| [p.src.as_str(), p.tgt.as_str()]);
    let vocab = learn_bpe(texts, s.get("bpe_vocab_size")?, s.get("bpe_min_freq")?).map_err(|e| usage(e.to_string()))?;
    println!("vocabulary size {} ({} merges)", vocab.len(), vocab.merges().len());
    run.note("vocabulary_size", json!(vocab.len()));
    run.output(&a.output, vocab.to_file_string().into_bytes());
    let seed = s.get("seed")?;
    run.finish(&s, seed, common.threads, &manifest_path(common, &a.output))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Vocabulary::from_file_str(&text).with_context(|| path.display().to_string())
}

fn load_model(path: &Path) -> Result<SeqModel<f32>> {
    let side = with_suffix(path, ".config");
    let text = std::fs::read_to_string(&side).with_context(|| format!("reading model settings {}", side.display()))?;
    let kv = KeyValues::parse(&text).with_context(|| side.display().to_string())?;
    let cfg = ModelConfig::from_key_values(&kv).with_context(|| side.display().to_string())?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SeqModel::read_params(cfg, &mut BufReader::new(f)).with_context(|| path.display().to_string())
}

/// Token ids for every pair, rejecting pairs the model cannot hold.
fn examples(path: &Path, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Vec<Example>> {
    read_pairs(path)?
        .into_iter()
        .map(|(line, p)| {
            let e = Example { src: vocab.encode(&p.src), tgt: vocab.encode(&p.tgt) };
            if e.src.len() > cfg.max_src_positions || e.tgt.len() > cfg.max_tgt_positions {
                return Err(anyhow!(
                    "{}: line {line}: {} source / {} target tokens exceed the model's {} / {} positions",
                    path.display(),
                    e.src.len(),
                    e.tgt.len(),
                    cfg.max_src_positions,
                    cfg.max_tgt_positions
                ));
            }
            Ok(e)
        })
        .collect()
}

struct CliSink {
    log: Vec<u8>,
    validations: Vec<(u64, f64)>,
    checkpoint_base: PathBuf,
}

impl TrainSink<f32> for CliSink {
    fn step(&mut self, r: &StepRecord) -> std::io::Result<()> {
        self.log.extend_from_slice(r.to_line().as_bytes());
        self.log.push(b'\n');
        Ok(())
    }

    fn validation(&mut self, step: u64, loss: f64) -> std::io::Result<()> {
        eprintln!("step {step}: validation {loss:.6}");
        self.validations.push((step, loss));
        Ok(())
    }

    fn checkpoint(&mut self, step: u64, model: &SeqModel<f32>) -> std::io::Result<()> {
        let mut buf = Vec::new();
        model.write_params(&mut buf).map_err(std::io::Error::other)?;
        let path = with_suffix(&self.checkpoint_base, &format!(".step{step}"));
        write_atomic(&path, &buf).map_err(std::io::Error::other)?;
        write_atomic(&with_suffix(&path, ".config"), model.config().to_key_values().to_text().as_bytes())
            .map_err(std::io::Error::other)
    }
}

pub fn train(common: &Common, a: TrainArgs) -> Result<()> {
    let phase = match a.phase {
        PhaseArg::Pretrain => Phase::Pretrain,
        PhaseArg::Crossconst => Phase::CrossConst,
    };
    if phase == Phase::CrossConst && a.init_checkpoint.is_none() {
        return Err(usage("the crossconst phase needs --init-checkpoint from a pretrain run"));
    }
    let mut run = Run::new("train");
    let vocab = load_vocab(run.input(&a.vocab)?)?;
    let init = match &a.init_checkpoint {
        Some(p) => {
            run.input(p)?;
            run.input(&with_suffix(p, ".config"))?;
            Some(load_model(p)?)
        }
        None => None,
    };
    let v = vocab.len();
    let s = settings(
        common,
        &[("phase", Some(phase.to_string())), ("max_steps", opt(&a.max_steps)), ("alpha", opt(&a.alpha)), ("lr", opt(&a.lr))],
        |p| {
            let (mc, tc) = match p {
                Preset::Full => (ModelConfig::full_scale(v), TrainConfig::full_scale(phase)),
                Preset::Desk => (ModelConfig::desk(v), TrainConfig::desk(phase)),
            };
            let mut kv = mc.to_key_values();
            kv.merge(&tc.to_key_values());
            kv
        },
    )?;
    let mut s = s;
    let model_cfg = match &init {
        Some(m) => {
            if m.config().vocab_size != v {
                return Err(usage(format!(
                    "checkpoint vocabulary size {} differs from {} in {}",
                    m.config().vocab_size,
                    v,
                    a.vocab.display()
                )));
            }
            // the checkpoint's architecture wins over presets and flags
            s.values.merge(&m.config().to_key_values());
            m.config().clone()
        }
        None => {
            s.values.set("vocab_size", v);
            let mut mc = ModelConfig::desk(v);
            mc.apply(&s.values).map_err(|e| usage(e.to_string()))?;
            mc.validate().map_err(|e| usage(e.to_string()))?;
            mc
        }
    };
    let mut tc = TrainConfig::desk(phase);
    tc.apply(&s.values).map_err(|e| usage(e.to_string()))?;
    tc.validate().map_err(|e| usage(e.to_string()))?;

    let train_set = examples(run.input(&a.train)?, &vocab, &model_cfg)?;
    let valid_set = match &a.valid {
        Some(p) => examples(run.input(p)?, &vocab, &model_cfg)?,
        None => Vec::new(),
    };
    let start = match init {
        Some(m) => Start::Checkpoint(m),
        None => Start::Scratch(model_cfg.clone()),
    };
    let mut sink = CliSink { log: Vec::new(), validations: Vec::new(), checkpoint_base: a.output.clone() };
    let outcome = run_phase(start, &train_set, &valid_set, &tc, &mut sink)?;
    eprintln!(
        "{} steps{}{}",
        outcome.steps,
        outcome.best_valid.map(|v| format!(", best validation {v:.6}")).unwrap_or_default(),
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    let mut ckpt = Vec::new();
    outcome.model.write_params(&mut ckpt)?;
    run.output(&a.output, ckpt);
    run.output(&with_suffix(&a.output, ".config"), model_cfg.to_key_values().to_text().into_bytes());
    run.output(&a.log.clone().unwrap_or_else(|| with_suffix(&a.output, ".log.tsv")), sink.log);
    run.note("steps", json!(outcome.steps));
    run.note("best_valid", json!(outcome.best_valid));
    run.note("stopped_early", json!(outcome.stopped_early));
    run.note("validations", json!(sink.validations));
    run.finish(&s, tc.seed, common.threads, &manifest_path(common, &a.output))
}

/// `(id, text)` per non-empty line; ids default to line numbers.
fn read_sentences(path: &Path) -> Result<Vec<(String, String)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = match line.split_once('\t') {
            Some((id, text)) => (id.to_string(), text.to_string()),
            None => ((i + 1).to_string(), line),
        };
        if !seen.insert(id.clone()) {
            bail!("{}: line {}: duplicate sentence id {id:?}", path.display(), i + 1);
        }
        out.push((id, text));
    }
    Ok(out)
}

pub fn embed(common: &Common, a: EmbedArgs) -> Result<()> {
    let s = settings(common, &[], |_| KeyValues::new())?;
    let mut run = Run::new("embed");
    run.input(&a.model)?;
    run.input(&with_suffix(&a.model, ".config"))?;
    let model = load_model(&a.model)?;
    let vocab = load_vocab(run.input(&a.vocab)?)?;
    let sentences = read_sentences(run.input(&a.input)?)?;
    let (store, failures) = embed_corpus(&sentences, &model, &vocab, &a.lang, EMBED_BATCH)?;
    for f in &failures {
        eprintln!("warning: sentence {}: {} (omitted)", f.id, f.reason);
    }
    println!("embedded {} sentences, {} failures", store.len(), failures.len());
    let mut bytes = Vec::new();
    store.write_to(&mut bytes)?;
    run.output(&a.output, bytes);
    run.note("embedded", json!(store.len()));
    run.note("failures", json!(failures.iter().map(|f| json!({"id": f.id, "reason": f.reason})).collect::<Vec<_>>()));
    let seed = s.get("seed")?;
    run.finish(&s, seed, common.threads, &manifest_path(common, &a.output))
}

fn load_store(run: &mut Run, path: &Path) -> Result<EmbeddingStore> {
    run.input(path)?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    EmbeddingStore::read_from(&mut BufReader::new(f)).with_context(|| path.display().to_string())
}

fn read_id_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (x, y) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}: line {}: expected src_id<TAB>tgt_id", path.display(), i + 1))?;
        out.push((x.to_string(), y.to_string()));
    }
    Ok(out)
}

pub fn search_eval(common: &Common, a: SearchEvalArgs) -> Result<()> {
    let s = settings(common, &[], |_| KeyValues::new())?;
    let mut run = Run::new("search-eval");
    let src = load_store(&mut run, &a.src)?;
    let tgt = load_store(&mut run, &a.tgt)?;
    let gold = match &a.gold {
        Some(p) => read_id_pairs(run.input(p)?)?,
        None => src.ids().iter().cloned().zip(tgt.ids().iter().cloned()).collect(),
    };
    let acc = similarity_search_accuracy(&src, &tgt, &gold)?;
    println!("forward_accuracy {:.4}", acc.forward);
    println!("backward_accuracy {:.4}", acc.backward);
    println!("accuracy {:.4}", acc.mean);
    run.note("accuracy", json!({"forward": acc.forward, "backward": acc.backward, "mean": acc.mean}));
    let manifest = common.manifest.clone().unwrap_or_else(|| with_suffix(&a.src, ".search-eval.manifest.json"));
    let seed = s.get("seed")?;
    run.finish(&s, seed, common.threads, &manifest)
}

pub fn mine(common: &Common, a: MineArgs) -> Result<()> {
    let s = settings(common, &[("k", opt(&a.k)), ("mining_threshold", opt(&a.threshold))], |_| {
        let mut kv = KeyValues::new();
        kv.set("k", DEFAULT_K);
        kv.set("mining_threshold", "none");
        kv.set("sweep_resolution", SWEEP_RESOLUTION);
        kv
    })?;
    let mut s = s;
    let mut run = Run::new("mine");
    let src = load_store(&mut run, &a.src)?;
    let tgt = load_store(&mut run, &a.tgt)?;
    let gold: Option<HashSet<(String, String)>> = match &a.gold {
        Some(p) => Some(read_id_pairs(run.input(p)?)?.into_iter().collect()),
        None => None,
    };
    let k: usize = s.get("k")?;
    let mut candidates = score_candidates(&src, &tgt, k, f64::NEG_INFINITY).map_err(|e| usage(e.to_string()))?;
    let threshold = match (s.get_opt::<f64>("mining_threshold")?, &gold) {
        (Some(t), _) => t,
        (None, Some(g)) => {
            let (t, _) = sweep_threshold(&candidates, g, s.get("sweep_resolution")?)?;
            eprintln!("swept threshold {t:.3}");
            s.values.set("mining_threshold", t);
            t
        }
        (None, None) => return Err(usage("mine needs --threshold or --gold to sweep one")),
    };
    for c in &mut candidates {
        c.accepted = c.margin_score >= threshold;
    }
    candidates.retain(|c| c.accepted);
    println!("mined {} pairs at threshold {threshold}", candidates.len());
    run.note("mined", json!(candidates.len()));
    run.note("threshold", json!(threshold));
    if let Some(g) = &gold {
        let pr = f1_against_gold(&candidates, g)?;
        println!("precision {:.4}\nrecall {:.4}\nf1 {:.4}", pr.precision, pr.recall, pr.f1);
        run.note("precision", json!(pr.precision));
        run.note("recall", json!(pr.recall));
        run.note("f1", json!(pr.f1));
    }
    run.output(&a.output, format_mined(&candidates).into_bytes());
    let seed = s.get("seed")?;
    run.finish(&s, seed, common.threads, &manifest_path(common, &a.output))
}

pub fn score_filter(common: &Common, a: ScoreFilterArgs) -> Result<()> {
    let s = settings(common, &[("dual_ce_threshold", opt(&a.threshold))], |_| {
        let mut kv = KeyValues::new();
        kv.set("dual_ce_threshold", "none");
        kv
    })?;
    let threshold: f64 = s
        .get_opt("dual_ce_threshold")?
        .ok_or_else(|| usage("score-filter needs --threshold (or dual_ce_threshold in the config)"))?;
    let mut run = Run::new("score-filter");
    let pairs = read_pairs(run.input(&a.input)?)?;
    let (mut kept, mut dropped, mut unscored) = (Vec::new(), 0usize, 0usize);
    for (_, p) in pairs {
        match (p.h_fwd, p.h_rev) {
            (Some(f), Some(r)) if dual_ce_score(f, r) > threshold => dropped += 1,
            (Some(_), Some(_)) => kept.push(p),
            _ => {
                unscored += 1;
                kept.push(p);
            }
        }
    }
    if unscored > 0 {
        eprintln!("warning: {unscored} pairs lack cross-entropy columns and were kept unscored");
    }
    println!("kept {}\ndropped {dropped}\nunscored {unscored}", kept.len());
    run.note("kept", json!(kept.len()));
    run.note("dropped", json!(dropped));
    run.note("unscored", json!(unscored));
    run.output(&a.output, pairs_text(&kept));
    let seed = s.get("seed")?;
    run.finish(&s, seed, common.threads, &manifest_path(common, &a.output))
}
