//! Encoder / bottleneck / decoder sequence model.
//!
//! The encoder is a pre-norm Transformer. Its outputs are max-pooled over
//! non-pad positions into one `D`-wide sentence embedding. The decoder has
//! self-attention only: every decoder input position is the token embedding
//! concatenated with the sentence embedding, so the decoder stream is `2D`
//! wide and the embedding is the only path from source to target.

mod config;

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigError;
use crate::numerics::{read_checkpoint, write_checkpoint, NumericsError, Real, Tape, Tensor, Var};
use crate::tokenizer::{BOS, PAD};

pub use config::ModelConfig;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("model config error: {0}")]
    Config(String),
    #[error(transparent)]
    KeyValue(#[from] ConfigError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    attn_norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ffn_norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// All trainable parameters plus the architecture they implement.
#[derive(Clone, Debug)]
pub struct SeqModel<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    embed: usize,
    encoder: Vec<Block>,
    encoder_norm: Norm,
    decoder: Vec<Block>,
    decoder_norm: Norm,
    output: Linear,
}

struct Builder<'a, T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..=bound))).collect();
        self.push(name, shape, data)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, vec![T::from_f64_lossy(v); n])
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> usize {
        self.names.push(name);
        self.params.push(Tensor::new(shape, data).expect("builder shapes are valid").requiring_grad());
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: self.uniform(format!("{prefix}.weight"), vec![fan_in, fan_out], bound),
            b: self.constant(format!("{prefix}.bias"), vec![fan_out], 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, width: usize) -> Norm {
        Norm {
            g: self.constant(format!("{prefix}.weight"), vec![width], 1.0),
            b: self.constant(format!("{prefix}.bias"), vec![width], 0.0),
        }
    }

    fn block(&mut self, prefix: &str, width: usize, ffn: usize) -> Block {
        Block {
            attn_norm: self.norm(&format!("{prefix}.self_attn_layer_norm"), width),
            q: self.linear(&format!("{prefix}.self_attn.q_proj"), width, width),
            k: self.linear(&format!("{prefix}.self_attn.k_proj"), width, width),
            v: self.linear(&format!("{prefix}.self_attn.v_proj"), width, width),
            o: self.linear(&format!("{prefix}.self_attn.out_proj"), width, width),
            ffn_norm: self.norm(&format!("{prefix}.final_layer_norm"), width),
            fc1: self.linear(&format!("{prefix}.fc1"), width, ffn),
            fc2: self.linear(&format!("{prefix}.fc2"), ffn, width),
        }
    }
}

/// Encoder output for a padded batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, T, D]`
    pub hidden: Var,
    /// `valid[b * T + t]` is false at pad positions.
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Parameters registered on one tape, indexed like [`SeqModel::params`].
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> SeqModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { names: Vec::new(), params: Vec::new(), rng: &mut rng };
        let d = config.dim;
        let embed = b.uniform("embed_tokens.weight".into(), vec![config.vocab_size, d], (3.0 / d as f64).sqrt());
        let encoder = (0..config.enc_layers).map(|i| b.block(&format!("encoder.layers.{i}"), d, config.enc_ffn_dim)).collect();
        let encoder_norm = b.norm("encoder.layer_norm", d);
        let decoder =
            (0..config.dec_layers).map(|i| b.block(&format!("decoder.layers.{i}"), 2 * d, config.dec_ffn_dim)).collect();
        let decoder_norm = b.norm("decoder.layer_norm", 2 * d);
        let output = b.linear("decoder.output_projection", 2 * d, config.vocab_size);
        let Builder { names, params, .. } = b;
        Ok(Self { config, names, params, embed, encoder, encoder_norm, decoder, decoder_norm, output })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Puts every parameter on `tape` as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.leaf(p)).collect())
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> Result<ParamVars, ModelError> {
        let vars = self
            .params
            .iter()
            .map(|t| tape.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<_, _>>()?;
        Ok(ParamVars(vars))
    }

    /// Adds the leaf gradients from `tape` into the parameters' accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &ParamVars) -> Result<(), ModelError> {
        for (p, &v) in self.params.iter_mut().zip(&vars.0) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn write_params<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        let named: Vec<(String, &Tensor<T>)> = self.names.iter().cloned().zip(self.params.iter()).collect();
        write_checkpoint(w, &named)?;
        Ok(())
    }

    /// Rebuilds a model from a config and a parameter file; names and shapes must match exactly.
    pub fn read_params<R: Read>(config: ModelConfig, r: &mut R) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        let loaded: HashMap<String, Tensor<T>> = read_checkpoint(r)?.into_iter().collect();
        if loaded.len() != model.names.len() {
            return Err(ModelError::Contract(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded.len(),
                model.names.len()
            )));
        }
        for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
            let t = loaded.get(name).ok_or_else(|| ModelError::Contract(format!("checkpoint lacks {name}")))?;
            if t.shape() != p.shape() {
                return Err(ModelError::Contract(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var, ModelError> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Ok(tape.dropout(x, self.config.dropout, &mut **r)?),
            _ => Ok(x),
        }
    }

    fn embed_tokens(&self, tape: &mut Tape<T>, p: &ParamVars, ids: &[u32], b: usize, t: usize) -> Result<Var, ModelError> {
        let d = self.config.dim;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = tape.embedding(p.0[self.embed], &idx, &[b, t])?;
        let e = tape.scale(e, T::from_f64_lossy((d as f64).sqrt()));
        let pos = tape.constant(vec![b, t, d], positions::<T>(b, t, d))?;
        Ok(tape.add(e, pos)?)
    }

    fn linear(&self, tape: &mut Tape<T>, p: &ParamVars, l: Linear, x: Var) -> Result<Var, ModelError> {
        let y = tape.matmul(x, p.0[l.w])?;
        Ok(tape.add_bias(y, p.0[l.b])?)
    }

    fn norm(&self, tape: &mut Tape<T>, p: &ParamVars, n: Norm, x: Var) -> Result<Var, ModelError> {
        Ok(tape.layer_norm(x, p.0[n.g], p.0[n.b], T::from_f64_lossy(LN_EPS))?)
    }

    /// Multi-head self-attention over `x[B, T, W]` with `allowed[b, i, j]` key masking.
    fn attention(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        blk: &Block,
        x: Var,
        dims: (usize, usize, usize),
        allowed: &[bool],
    ) -> Result<Var, ModelError> {
        let (b, t, w) = dims;
        let h = self.config.heads;
        let dh = w / h;
        let split = |tape: &mut Tape<T>, v: Var| -> Result<Var, NumericsError> {
            let v = tape.reshape(v, &[b, t, h, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[b * h, t, dh])
        };
        let q = self.linear(tape, p, blk.q, x)?;
        let q = tape.scale(q, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let q = split(tape, q)?;
        let k = self.linear(tape, p, blk.k, x)?;
        let k = split(tape, k)?;
        let v = self.linear(tape, p, blk.v, x)?;
        let v = split(tape, v)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let mut mask = Vec::with_capacity(b * h * t * t);
        for bi in 0..b {
            let m = &allowed[bi * t * t..(bi + 1) * t * t];
            for _ in 0..h {
                mask.extend_from_slice(m);
            }
        }
        let probs = tape.softmax_masked(scores, 2, Some(&mask))?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, w])?;
        self.linear(tape, p, blk.o, ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        blk: &Block,
        x: Var,
        dims: (usize, usize, usize),
        allowed: &[bool],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let h = self.norm(tape, p, blk.attn_norm, x)?;
        let a = self.attention(tape, p, blk, h, dims, allowed)?;
        let a = self.dropout(tape, a, rng)?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, p, blk.ffn_norm, x)?;
        let f = self.linear(tape, p, blk.fc1, h)?;
        let f = tape.relu(f);
        let f = self.linear(tape, p, blk.fc2, f)?;
        let f = self.dropout(tape, f, rng)?;
        Ok(tape.add(x, f)?)
    }

    /// Runs the encoder over a batch of id sequences (padded to the longest).
    /// `rng` enables dropout; `None` is inference mode.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        src: &[Vec<u32>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded, ModelError> {
        let (ids, valid, b, t) = self.pad_batch(src, self.config.max_src_positions, "source")?;
        let d = self.config.dim;
        let mut x = self.embed_tokens(tape, p, &ids, b, t)?;
        x = self.dropout(tape, x, &mut rng)?;
        let mut allowed = Vec::with_capacity(b * t * t);
        for bi in 0..b {
            for _ in 0..t {
                allowed.extend_from_slice(&valid[bi * t..(bi + 1) * t]);
            }
        }
        for blk in &self.encoder {
            x = self.block(tape, p, blk, x, (b, t, d), &allowed, &mut rng)?;
        }
        let hidden = self.norm(tape, p, self.encoder_norm, x)?;
        Ok(Encoded { hidden, valid, batch: b, len: t })
    }

    /// Per-dimension maximum of the encoder output over non-pad positions: `[B, D]`.
    pub fn sentence_embedding(&self, tape: &mut Tape<T>, enc: &Encoded) -> Result<Var, ModelError> {
        sentence_embedding(tape, enc.hidden, &enc.valid)
    }

    /// Decoder logits `[B, T, V]` for teacher-forced inputs `tgt_in` given sentence embeddings `[B, D]`.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        tgt_in: &[Vec<u32>],
        sent_emb: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let (ids, valid, b, t) = self.pad_batch(tgt_in, self.config.max_tgt_positions, "target")?;
        let d = self.config.dim;
        if tape.shape(sent_emb) != [b, d] {
            return Err(ModelError::Contract(format!(
                "sentence embedding shape {:?}, decoder expects [{b}, {d}]",
                tape.shape(sent_emb)
            )));
        }
        let tok = self.embed_tokens(tape, p, &ids, b, t)?;
        let ctx = tape.repeat_axis1(sent_emb, t)?;
        let mut x = tape.concat(tok, ctx)?;
        x = self.dropout(tape, x, &mut rng)?;
        let mut allowed = Vec::with_capacity(b * t * t);
        for bi in 0..b {
            for i in 0..t {
                allowed.extend((0..t).map(|j| j <= i && (valid[bi * t + j] || j == 0)));
            }
        }
        for blk in &self.decoder {
            x = self.block(tape, p, blk, x, (b, t, 2 * d), &allowed, &mut rng)?;
        }
        let x = self.norm(tape, p, self.decoder_norm, x)?;
        self.linear(tape, p, self.output, x)
    }

    /// Log-probabilities `[B, T, V]` of `tgt` given `src` under teacher forcing.
    pub fn forward_log_probs(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        src: &[Vec<u32>],
        tgt: &[Vec<u32>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if src.len() != tgt.len() {
            return Err(ModelError::Input(format!("{} sources for {} targets", src.len(), tgt.len())));
        }
        let enc = self.encode(tape, p, src, rng.as_deref_mut())?;
        let emb = self.sentence_embedding(tape, &enc)?;
        let tgt_in: Vec<Vec<u32>> = tgt.iter().map(|y| teacher_forcing_input(y)).collect();
        let logits = self.decode(tape, p, &tgt_in, emb, rng)?;
        Ok(tape.log_softmax(logits, 2)?)
    }

    /// Probability sequence `f(x, y)`: `[B, T, V]`, each row normalized.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        src: &[Vec<u32>],
        tgt: &[Vec<u32>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let lp = self.forward_log_probs(tape, p, src, tgt, rng)?;
        Ok(tape.exp(lp))
    }

    /// Inference-mode sentence embeddings, one row of width `D` per input.
    pub fn embed(&self, src: &[Vec<u32>]) -> Result<Vec<Vec<T>>, ModelError> {
        let mut tape = Tape::new();
        let p = self.register_frozen(&mut tape)?;
        let enc = self.encode(&mut tape, &p, src, None)?;
        let e = self.sentence_embedding(&mut tape, &enc)?;
        Ok(tape.value(e).chunks(self.config.dim).map(<[T]>::to_vec).collect())
    }

    fn pad_batch(
        &self,
        seqs: &[Vec<u32>],
        max_len: usize,
        what: &str,
    ) -> Result<(Vec<u32>, Vec<bool>, usize, usize), ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::Input(format!("empty {what} batch")));
        }
        let t = seqs.iter().map(Vec::len).max().unwrap();
        if t == 0 {
            return Err(ModelError::Input(format!("{what} batch holds only empty sequences")));
        }
        if t > max_len {
            return Err(ModelError::Input(format!("{what} length {t} exceeds {max_len} positions")));
        }
        let v = self.config.vocab_size as u32;
        let mut ids = Vec::with_capacity(seqs.len() * t);
        let mut valid = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            if let Some(&bad) = s.iter().find(|&&i| i >= v) {
                return Err(ModelError::Input(format!("token id {bad} >= vocabulary size {v}")));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(t - s.len()));
            valid.extend(std::iter::repeat(true).take(s.len()));
            valid.extend(std::iter::repeat(false).take(t - s.len()));
        }
        Ok((ids, valid, seqs.len(), t))
    }
}

/// Masked max-pool over the time axis of `hidden[B, T, D]`.
pub fn sentence_embedding<T: Real>(tape: &mut Tape<T>, hidden: Var, valid: &[bool]) -> Result<Var, ModelError> {
    let s = tape.shape(hidden).to_vec();
    if s.len() != 3 || valid.len() != s[0] * s[1] {
        return Err(ModelError::Contract(format!("hidden {s:?} with {} mask entries", valid.len())));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if let Some(row) = (0..b).find(|&bi| !valid[bi * t..(bi + 1) * t].iter().any(|&v| v)) {
        return Err(ModelError::Input(format!("row {row} has no non-pad position")));
    }
    let eligible: Vec<bool> = valid.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect();
    Ok(tape.max_axis_masked(hidden, 1, Some(&eligible))?)
}

/// `bos` followed by all but the last target token.
pub fn teacher_forcing_input(tgt: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(tgt.len());
    v.push(BOS);
    v.extend_from_slice(&tgt[..tgt.len().saturating_sub(1)]);
    v
}

/// Sinusoidal position table repeated over the batch: `[b, t, d]`.
fn positions<T: Real>(b: usize, t: usize, d: usize) -> Vec<T> {
    let mut row = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            row.push(T::from_f64_lossy(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    let mut out = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        out.extend_from_slice(&row);
    }
    out
}
