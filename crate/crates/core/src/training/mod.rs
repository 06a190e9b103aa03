//! Translation loss, cross-lingual consistency term and the two-phase
//! training loop (many-to-one pretraining, then consistency finetuning).

mod batch;
mod loss;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, KeyValues};
use crate::model::{ModelConfig, ModelError, ParamVars, SeqModel};
use crate::numerics::{NumericsError, OptimizerState, Real, Tape, Tensor, Var};

pub use batch::{make_batches, Batch, Example};
pub use loss::{ce_loss, kl_loss, target_mask};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}: ce={ce} kl={kl}")]
    Diverged { step: u64, ce: f64, kl: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Cross-entropy on (x, y) only.
    Pretrain,
    /// Cross-entropy plus `alpha * KL(f(x, y) || f(y, y))`.
    CrossConst,
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "crossconst" => Ok(Phase::CrossConst),
            _ => Err(format!("unknown phase {s:?} (expected pretrain or crossconst)")),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::CrossConst => "crossconst",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Weight of the KL term.
    pub alpha: f64,
    pub label_smoothing: f64,
    pub max_tokens: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub max_steps: u64,
    /// Validation interval in steps.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: u32,
    /// Checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Full-size settings: alpha 1.0, label smoothing 0.1, 1024 tokens per
    /// batch, Adam (0.9, 0.98), 10000 warmup steps, base learning rate 7e-4.
    pub fn full_scale(phase: Phase) -> Self {
        Self {
            phase,
            alpha: 1.0,
            label_smoothing: 0.1,
            max_tokens: 1024,
            base_lr: 7e-4,
            warmup_steps: 10_000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            seed: 1,
            max_steps: 1_000_000,
            eval_every: 1000,
            patience: 5,
            checkpoint_every: 1000,
        }
    }

    /// Settings for minutes-long CPU runs on toy corpora.
    pub fn desk(phase: Phase) -> Self {
        Self {
            base_lr: 0.05,
            warmup_steps: 200,
            max_steps: 2000,
            eval_every: 100,
            checkpoint_every: 0,
            ..Self::full_scale(phase)
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Contract(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1]");
        }
        if self.max_tokens == 0 || self.warmup_steps == 0 || self.eval_every == 0 {
            return bad("max_tokens, warmup_steps and eval_every must be positive");
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("phase", self.phase);
        kv.set("alpha", self.alpha);
        kv.set("label_smoothing", self.label_smoothing);
        kv.set("max_tokens", self.max_tokens);
        kv.set("lr", self.base_lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("seed", self.seed);
        kv.set("max_steps", self.max_steps);
        kv.set("eval_every", self.eval_every);
        kv.set("patience", self.patience);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        if let Some(p) = kv.get_str("phase") {
            self.phase = p.parse().map_err(|_| ConfigError::Value { key: "phase".into(), value: p.into() })?;
        }
        kv.apply("alpha", &mut self.alpha)?;
        kv.apply("label_smoothing", &mut self.label_smoothing)?;
        kv.apply("max_tokens", &mut self.max_tokens)?;
        kv.apply("lr", &mut self.base_lr)?;
        kv.apply("warmup_steps", &mut self.warmup_steps)?;
        kv.apply("beta1", &mut self.beta1)?;
        kv.apply("beta2", &mut self.beta2)?;
        kv.apply("adam_eps", &mut self.adam_eps)?;
        kv.apply("seed", &mut self.seed)?;
        kv.apply("max_steps", &mut self.max_steps)?;
        kv.apply("eval_every", &mut self.eval_every)?;
        kv.apply("patience", &mut self.patience)?;
        kv.apply("checkpoint_every", &mut self.checkpoint_every)?;
        Ok(())
    }
}

/// Loss components recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ce: Var,
    pub kl: Option<Var>,
    pub total: Var,
}

/// `ce(x, y) + alpha * KL(f(x, y) || f(y, y))`, where `f(y, y)` feeds the
/// target sentence to the encoder as its own source.
#[allow(clippy::too_many_arguments)]
pub fn crossconst_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &SeqModel<T>,
    params: &ParamVars,
    batch: &Batch,
    alpha: f64,
    smoothing: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossParts, TrainingError> {
    let lp_xy = model.forward_log_probs(tape, params, &batch.src, &batch.tgt, rng.as_deref_mut())?;
    let ce = ce_loss(tape, lp_xy, &batch.tgt, smoothing)?;
    let lp_yy = model.forward_log_probs(tape, params, &batch.tgt, &batch.tgt, rng)?;
    let kl = kl_loss(tape, lp_xy, lp_yy, &batch.tgt)?;
    let weighted = tape.scale(kl, T::from_f64_lossy(alpha));
    let total = tape.add(ce, weighted)?;
    Ok(LossParts { ce, kl: Some(kl), total })
}

fn phase_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &SeqModel<T>,
    params: &ParamVars,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossParts, TrainingError> {
    match cfg.phase {
        Phase::CrossConst => crossconst_loss(tape, model, params, batch, cfg.alpha, cfg.label_smoothing, rng),
        Phase::Pretrain => {
            let lp = model.forward_log_probs(tape, params, &batch.src, &batch.tgt, rng)?;
            let ce = ce_loss(tape, lp, &batch.tgt, cfg.label_smoothing)?;
            Ok(LossParts { ce, kl: None, total: ce })
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub lr: f64,
    pub tokens: usize,
}

impl StepRecord {
    /// `step ce kl total lr tokens`, tab-separated.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{}",
            self.step, self.ce, self.kl, self.total, self.lr, self.tokens
        )
    }
}

/// Receives progress from [`train`].
pub trait TrainSink<T> {
    fn step(&mut self, _record: &StepRecord) -> std::io::Result<()> {
        Ok(())
    }

    fn validation(&mut self, _step: u64, _loss: f64) -> std::io::Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _step: u64, _model: &SeqModel<T>) -> std::io::Result<()> {
        Ok(())
    }
}

/// Ignores everything.
pub struct NullSink;

impl<T> TrainSink<T> for NullSink {}

/// Writes each step record as a metrics-log line.
pub struct LogSink<W>(pub W);

impl<T, W: Write> TrainSink<T> for LogSink<W> {
    fn step(&mut self, record: &StepRecord) -> std::io::Result<()> {
        writeln!(self.0, "{}", record.to_line())
    }
}

/// Where training starts from.
pub enum Start<T> {
    /// Fresh parameters drawn with the training seed.
    Scratch(ModelConfig),
    /// Parameters from an earlier run.
    Checkpoint(SeqModel<T>),
}

pub struct TrainOutcome<T> {
    pub model: SeqModel<T>,
    pub log: Vec<StepRecord>,
    pub steps: u64,
    pub best_valid: Option<f64>,
    pub stopped_early: bool,
}

/// Token-weighted validation objective in inference mode.
pub fn evaluate<T: Real>(
    model: &SeqModel<T>,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in make_batches(examples, cfg.max_tokens, &mut rng)? {
        let mut tape = Tape::new();
        let p = model.register_frozen(&mut tape)?;
        let parts = phase_loss(&mut tape, model, &p, &batch, cfg, None)?;
        total += tape.value(parts.total)[0].to_f64().unwrap_or(f64::NAN) * batch.tokens as f64;
        tokens += batch.tokens;
    }
    if tokens == 0 {
        return Err(TrainingError::Input("empty validation set".into()));
    }
    Ok(total / tokens as f64)
}

/// Runs one training phase.
///
/// The consistency phase must start from a checkpoint. Training stops after
/// `max_steps` or when the validation objective has not improved for
/// `patience` evaluations; the best-validation parameters are returned.
pub fn train<T: Real>(
    start: Start<T>,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink<T>,
) -> Result<TrainOutcome<T>, TrainingError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainingError::Input("empty training set".into()));
    }
    let mut model = match (start, cfg.phase) {
        (Start::Scratch(_), Phase::CrossConst) => {
            return Err(TrainingError::Contract(
                "the crossconst phase starts from a pretrain checkpoint".into(),
            ))
        }
        (Start::Scratch(mc), Phase::Pretrain) => SeqModel::new(mc, cfg.seed)?,
        (Start::Checkpoint(m), _) => m,
    };
    model.zero_grad();
    let mut opt = OptimizerState::new(model.params(), cfg.base_lr, cfg.warmup_steps, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut log = Vec::new();
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let mut since_best = 0u32;
    let mut stopped_early = false;
    let mut step = 0u64;

    'outer: while step < cfg.max_steps {
        for batch in make_batches(train_set, cfg.max_tokens, &mut shuffle_rng)? {
            if step >= cfg.max_steps {
                break 'outer;
            }
            let mut tape = Tape::new();
            let p = model.register(&mut tape);
            let parts = phase_loss(&mut tape, &model, &p, &batch, cfg, Some(&mut dropout_rng))?;
            let ce = tape.value(parts.ce)[0].to_f64().unwrap_or(f64::NAN);
            let kl = parts.kl.map_or(0.0, |k| tape.value(k)[0].to_f64().unwrap_or(f64::NAN));
            let total = tape.value(parts.total)[0].to_f64().unwrap_or(f64::NAN);
            if !total.is_finite() {
                return Err(TrainingError::Diverged { step: step + 1, ce, kl });
            }
            tape.backward(parts.total)?;
            model.zero_grad();
            model.accumulate_grads(&tape, &p)?;
            drop(tape);
            let lr = opt.step(model.params_mut())?;
            step += 1;
            let rec = StepRecord { step, ce, kl, total, lr, tokens: batch.tokens };
            sink.step(&rec)?;
            log.push(rec);

            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                sink.checkpoint(step, &model)?;
            }
            if !valid_set.is_empty() && step % cfg.eval_every == 0 {
                let v = evaluate(&model, valid_set, cfg)?;
                sink.validation(step, v)?;
                if best.as_ref().map_or(true, |(b, _)| v < *b) {
                    best = Some((v, model.params().to_vec()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let best_valid = match best {
        Some((v, params)) => {
            model.params_mut().clone_from_slice(&params);
            Some(v)
        }
        None => None,
    };
    model.zero_grad();
    Ok(TrainOutcome { model, log, steps: step, best_valid, stopped_early })
}
