//! `musr`: corpus preparation, vocabulary learning, two-phase training,
//! embedding, similarity search evaluation and bitext mining.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "musr", version, about = "Multilingual sentence embeddings and bitext mining")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages (training itself is single-threaded).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat key=value settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default settings: `full` (full-size model and data, the default) or `desk`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Any setting as key=value; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Manifest path (default: next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, filter and optionally resample a parallel corpus.
    Prepare(PrepareArgs),
    /// Learn a BPE vocabulary from both sides of a corpus.
    LearnVocab(LearnVocabArgs),
    /// Run one training phase.
    Train(TrainArgs),
    /// Embed sentences into an embedding store.
    Embed(EmbedArgs),
    /// Bidirectional similarity-search accuracy between two stores.
    SearchEval(SearchEvalArgs),
    /// Margin-based bitext mining between two stores.
    Mine(MineArgs),
    /// Drop pairs by dual conditional cross-entropy score.
    ScoreFilter(ScoreFilterArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub min_pairs: Option<usize>,
    #[arg(long)]
    pub max_english_chars: Option<usize>,
    #[arg(long)]
    pub dual_ce_threshold: Option<f64>,
    /// Resample this many pairs by language temperature after cleaning.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub sampling_alpha: Option<f64>,
    /// Skip malformed lines instead of failing on the first one.
    #[arg(long)]
    pub skip_malformed: bool,
    /// Also write the drop-count report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct LearnVocabArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Crossconst,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub phase: PhaseArg,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint to write; its model settings go to `<output>.config`.
    #[arg(long)]
    pub output: PathBuf,
    /// Pretrained checkpoint; required by the crossconst phase.
    #[arg(long, required_if_eq("phase", "crossconst"))]
    pub init_checkpoint: Option<PathBuf>,
    /// Metrics log (default `<output>.log.tsv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One sentence per line, optionally `id<TAB>text`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct SearchEvalArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// `src_id<TAB>tgt_id` lines; rows are paired by position without it.
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

#[derive(Args)]
pub struct MineArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Gold pairs for scoring; without a threshold, the threshold is swept on them.
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScoreFilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let c = &cli.common;
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(c, a),
        Command::LearnVocab(a) => commands::learn_vocab(c, a),
        Command::Train(a) => commands::train(c, a),
        Command::Embed(a) => commands::embed(c, a),
        Command::SearchEval(a) => commands::search_eval(c, a),
        Command::Mine(a) => commands::mine(c, a),
        Command::ScoreFilter(a) => commands::score_filter(c, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<run::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
