//! Runs the synthetic two-phase experiment and prints accuracies.
//!
//! Usage: `cargo run --release --example trend -- [seed...] [key=value...]`
//! where keys are `model.*`, `pretrain.*`, `crossconst.*`, `vocab_size`,
//! `bpe_min_freq`, `train_per_language`.

use std::time::Instant;

use musr_core::config::KeyValues;
use musr_core::model::SeqModel;
use musr_core::training::{StepRecord, TrainSink};
use musr_core::trend::{run, TrendSettings};

struct Progress {
    started: Instant,
    ce: f64,
    kl: f64,
    n: usize,
}

impl TrainSink<f32> for Progress {
    fn step(&mut self, r: &StepRecord) -> std::io::Result<()> {
        self.ce += r.ce;
        self.kl += r.kl;
        self.n += 1;
        Ok(())
    }

    fn validation(&mut self, step: u64, loss: f64) -> std::io::Result<()> {
        let n = self.n.max(1) as f64;
        eprintln!(
            "  [{:6.1}s] step {step:5} train ce {:.4} kl {:.4} valid {loss:.4}",
            self.started.elapsed().as_secs_f64(),
            self.ce / n,
            self.kl / n
        );
        (self.ce, self.kl, self.n) = (0.0, 0.0, 0);
        Ok(())
    }

    fn checkpoint(&mut self, _: u64, _: &SeqModel<f32>) -> std::io::Result<()> {
        Ok(())
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut settings = TrendSettings::desk();
    let mut seeds = Vec::new();
    let (mut model, mut p1, mut p2, mut top) = (KeyValues::new(), KeyValues::new(), KeyValues::new(), KeyValues::new());
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            None => seeds.push(arg.parse()?),
            Some((k, v)) => match k.split_once('.') {
                Some(("model", k)) => model.set(k, v),
                Some(("pretrain", k)) => p1.set(k, v),
                Some(("crossconst", k)) => p2.set(k, v),
                _ => top.set(k, v),
            },
        }
    }
    settings.model.apply(&model)?;
    settings.pretrain.apply(&p1)?;
    settings.crossconst.apply(&p2)?;
    top.apply("vocab_size", &mut settings.vocab_size)?;
    top.apply("bpe_min_freq", &mut settings.bpe_min_freq)?;
    top.apply("train_per_language", &mut settings.data.train_per_language)?;
    if seeds.is_empty() {
        seeds.push(1);
    }
    for seed in seeds {
        let mut sink = Progress { started: Instant::now(), ce: 0.0, kl: 0.0, n: 0 };
        let r = run(&settings, seed, &mut sink)?;
        println!(
            "seed {seed}: vocab {} | pretrain {} steps xx-en {:.4} xx-yy {:.4} | crossconst {} steps xx-en {:.4} xx-yy {:.4} | {:.0}s",
            r.vocab_size,
            r.pretrain_steps,
            r.pretrain.xx_en,
            r.pretrain.xx_yy,
            r.crossconst_steps,
            r.crossconst.xx_en,
            r.crossconst.xx_yy,
            r.seconds
        );
    }
    Ok(())
}
