//! Central finite-difference gradient oracle and the per-operation suite.

use musr_core::model::{ModelConfig, SeqModel};
use musr_core::numerics::{Tape, Var};
use musr_core::training::{ce_loss, crossconst_loss, kl_loss, Batch, Example};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds a scalar from the variables on a fresh tape.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Worst relative error over the inputs between backprop and central
/// differences.
pub fn check(inputs: &[(Vec<usize>, Vec<f64>)], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, d)| tape.variable(s.clone(), d.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, d))| tape.grad(v).map_or_else(|| vec![0.0; d.len()], <[f64]>::to_vec))
        .collect();
    let eval = |values: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|(s, d)| t.variable(s.clone(), d.clone()).unwrap()).collect();
        let o = build(&mut t, &vs);
        t.value(o)[0]
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, (_, d)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; d.len()];
        for j in 0..d.len() {
            work[k].1[j] = d[j] + H;
            let up = eval(&work);
            work[k].1[j] = d[j] - H;
            let down = eval(&work);
            work[k].1[j] = d[j];
            numeric[j] = (up - down) / (2.0 * H);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    worst
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller
            let (u, v): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect()
}

/// Normal draws kept at least `gap` away from zero, for kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    normal(rng, n).into_iter().map(|x| if x.abs() < gap { x.signum() * gap + x } else { x }).collect()
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn shape_of_rank_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<usize> {
    let rank = rng.gen_range(lo..=hi);
    random_shape(rng, rank)
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

/// Reduces `y` to a scalar with fixed random weights so every output entry matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normal(&mut rng, n);
    tape.weighted_sum(y, w).unwrap()
}

pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn run_case(name: &'static str, instances: usize, seed: u64, mut one: impl FnMut(&mut ChaCha8Rng, u64) -> f64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..instances).map(|i| one(&mut rng, seed * 1000 + i as u64)).fold(0.0, f64::max);
    CaseResult { name, instances, worst }
}

fn inp(shape: Vec<usize>, data: Vec<f64>) -> (Vec<usize>, Vec<f64>) {
    (shape, data)
}

fn random_targets(rng: &mut ChaCha8Rng, b: usize, t: usize, v: usize) -> Vec<Vec<u32>> {
    // at least one target row reaches full length so the mask covers [B, T]
    let mut ys: Vec<Vec<u32>> =
        (0..b).map(|_| (0..rng.gen_range(1..=t)).map(|_| rng.gen_range(0..v as u32)).collect()).collect();
    ys[0] = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
    ys
}

fn micro_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        dim: 4,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        enc_ffn_dim: 6,
        dec_ffn_dim: 5,
        vocab_size: rng.gen_range(5..=8),
        max_src_positions: 8,
        max_tgt_positions: 8,
        dropout: 0.1,
    }
}

/// Gradient check of every model parameter through the full training
/// objective, with dropout masks replayed identically on each evaluation.
fn check_model_objective(rng: &mut ChaCha8Rng, seed: u64, alpha: f64) -> f64 {
    let cfg = micro_model(rng);
    let v = cfg.vocab_size as u32;
    let mut model = SeqModel::<f64>::new(cfg, seed).unwrap();
    let examples: Vec<Example> = (0..2)
        .map(|_| Example {
            src: (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..v)).collect(),
            tgt: (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..v)).collect(),
        })
        .collect();
    let batch = Batch::from_examples(&examples);
    let smoothing = rng.gen_range(0.0..0.2);
    let objective = |model: &SeqModel<f64>, tape: &mut Tape<f64>| {
        let p = model.register(tape);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = crossconst_loss(tape, model, &p, &batch, alpha, smoothing, Some(&mut drop_rng)).unwrap();
        (p, parts.total)
    };
    let mut tape = Tape::new();
    let (p, loss) = objective(&model, &mut tape);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);
    // Norm-wise over the whole parameter vector: some tensors (key biases)
    // have an exactly zero gradient, where a per-tensor ratio is just noise.
    let mut numeric_all = Vec::new();
    for k in 0..model.params().len() {
        let mut numeric = vec![0.0; model.params()[k].numel()];
        for j in 0..numeric.len() {
            let orig = model.params()[k].data()[j];
            let mut eval = |x: f64| {
                model.params_mut()[k].data_mut()[j] = x;
                let mut t = Tape::new();
                let (_, l) = objective(&model, &mut t);
                t.value(l)[0]
            };
            let up = eval(orig + H);
            let down = eval(orig - H);
            model.params_mut()[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * H);
        }
        numeric_all.extend(numeric);
    }
    relative_error(&analytic.concat(), &numeric_all)
}

/// Runs every case with `instances` random micro-instances each.
pub fn suite(instances: usize) -> Vec<CaseResult> {
    let n = instances;
    let mut out = Vec::new();

    out.push(run_case("matmul", n, 1, |rng, s| {
        let mut sa = shape_of_rank_in(rng, 2, 3);
        let k = *sa.last().unwrap();
        let nn = rng.gen_range(1..=4);
        let a = normal(rng, numel(&sa));
        let b = normal(rng, k * nn);
        sa.shrink_to_fit();
        check(&[inp(sa, a), inp(vec![k, nn], b)], &|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, s)
        })
    }));
    for (name, transpose) in [("batch_matmul", false), ("batch_matmul_transposed", true)] {
        out.push(run_case(name, n, 2 + transpose as u64, |rng, s| {
            let (bt, m, k, p) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let b_shape = if transpose { vec![bt, p, k] } else { vec![bt, k, p] };
            let a = normal(rng, bt * m * k);
            let b = normal(rng, bt * k * p);
            check(&[inp(vec![bt, m, k], a), inp(b_shape, b)], &|t, v| {
                let y = t.batch_matmul(v[0], v[1], transpose).unwrap();
                project(t, y, s)
            })
        }));
    }
    type Binary = fn(&mut Tape<f64>, Var, Var) -> Var;
    let binaries: [(&'static str, Binary); 3] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
    ];
    for (i, (name, f)) in binaries.into_iter().enumerate() {
        out.push(run_case(name, n, 4 + i as u64, |rng, s| {
            let shape = shape_of_rank_in(rng, 1, 3);
            let (a, b) = (normal(rng, numel(&shape)), normal(rng, numel(&shape)));
            check(&[inp(shape.clone(), a), inp(shape, b)], &|t, v| {
                let y = f(t, v[0], v[1]);
                project(t, y, s)
            })
        }));
    }
    out.push(run_case("add_bias", n, 7, |rng, s| {
        let shape = shape_of_rank_in(rng, 1, 3);
        let d = *shape.last().unwrap();
        let (x, b) = (normal(rng, numel(&shape)), normal(rng, d));
        check(&[inp(shape, x), inp(vec![d], b)], &|t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("scale", n, 8, |rng, s| {
        let shape = random_shape(rng, 2);
        let c = rng.gen_range(-3.0..3.0);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.scale(v[0], c);
            project(t, y, s)
        })
    }));
    out.push(run_case("relu", n, 9, |rng, s| {
        let shape = random_shape(rng, 2);
        check(&[inp(shape.clone(), away_from_zero(rng, numel(&shape), 1e-3))], &|t, v| {
            let y = t.relu(v[0]);
            project(t, y, s)
        })
    }));
    out.push(run_case("exp", n, 10, |rng, s| {
        let shape = random_shape(rng, 2);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.exp(v[0]);
            project(t, y, s)
        })
    }));
    out.push(run_case("softmax", n, 11, |rng, s| {
        let shape = random_shape(rng, 3);
        let axis = rng.gen_range(0..3);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.softmax(v[0], axis).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("softmax_masked", n, 12, |rng, s| {
        let shape = vec![rng.gen_range(1..=3), rng.gen_range(2..=5)];
        let mut allowed: Vec<bool> = (0..numel(&shape)).map(|_| rng.gen_bool(0.7)).collect();
        for r in 0..shape[0] {
            allowed[r * shape[1]] = true;
        }
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.softmax_masked(v[0], 1, Some(&allowed)).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("log_softmax", n, 13, |rng, s| {
        let shape = random_shape(rng, 3);
        let axis = rng.gen_range(0..3);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.log_softmax(v[0], axis).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("layer_norm", n, 14, |rng, s| {
        let shape = vec![rng.gen_range(1..=3), rng.gen_range(2..=6)];
        let d = shape[1];
        let (x, g, b) = (normal(rng, numel(&shape)), normal(rng, d), normal(rng, d));
        check(&[inp(shape, x), inp(vec![d], g), inp(vec![d], b)], &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("dropout", n, 15, |rng, s| {
        let shape = random_shape(rng, 2);
        let rate = rng.gen_range(0.05..0.6);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.dropout(v[0], rate, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("embedding", n, 16, |rng, s| {
        let (vocab, d) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
        let out_shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let ids: Vec<usize> = (0..numel(&out_shape)).map(|_| rng.gen_range(0..vocab)).collect();
        check(&[inp(vec![vocab, d], normal(rng, vocab * d))], &|t, v| {
            let y = t.embedding(v[0], &ids, &out_shape).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("concat", n, 17, |rng, s| {
        let lead = shape_of_rank_in(rng, 1, 2);
        let (da, db) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let sa = [lead.clone(), vec![da]].concat();
        let sb = [lead, vec![db]].concat();
        let (a, b) = (normal(rng, numel(&sa)), normal(rng, numel(&sb)));
        check(&[inp(sa, a), inp(sb, b)], &|t, v| {
            let y = t.concat(v[0], v[1]).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("max_axis", n, 18, |rng, s| {
        let shape = random_shape(rng, 3);
        let axis = rng.gen_range(0..3);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.max_axis(v[0], axis).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("max_axis_masked", n, 19, |rng, s| {
        let shape = vec![rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(1..=3)];
        let mut eligible: Vec<bool> = (0..shape[0] * shape[1]).map(|_| rng.gen_bool(0.6)).collect();
        for b in 0..shape[0] {
            eligible[b * shape[1]] = true;
        }
        let per_entry: Vec<bool> = eligible.iter().flat_map(|&e| std::iter::repeat(e).take(shape[2])).collect();
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.max_axis_masked(v[0], 1, Some(&per_entry)).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("permute", n, 20, |rng, s| {
        let shape = random_shape(rng, 3);
        let mut perm = vec![0, 1, 2];
        for i in (1..3).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.permute(v[0], &perm).unwrap();
            let y = t.exp(y);
            project(t, y, s)
        })
    }));
    out.push(run_case("reshape", n, 21, |rng, s| {
        let shape = random_shape(rng, 2);
        let flat = vec![numel(&shape)];
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.reshape(v[0], &flat).unwrap();
            let y = t.exp(y);
            project(t, y, s)
        })
    }));
    out.push(run_case("repeat_axis1", n, 22, |rng, s| {
        let (b, d, reps) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
        check(&[inp(vec![b, d], normal(rng, b * d))], &|t, v| {
            let y = t.repeat_axis1(v[0], reps).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run_case("sum", n, 23, |rng, _| {
        let shape = random_shape(rng, 2);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.exp(v[0]);
            t.sum(y)
        })
    }));
    out.push(run_case("mean", n, 24, |rng, _| {
        let shape = random_shape(rng, 2);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| {
            let y = t.exp(v[0]);
            t.mean(y)
        })
    }));
    out.push(run_case("weighted_sum", n, 25, |rng, s| {
        let shape = random_shape(rng, 3);
        check(&[inp(shape.clone(), normal(rng, numel(&shape)))], &|t, v| project(t, v[0], s))
    }));
    out.push(run_case("ce_loss", n, 26, |rng, _| {
        let (b, tt, v) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(2..=7));
        let targets = random_targets(rng, b, tt, v);
        let smoothing = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..0.5) };
        check(&[inp(vec![b, tt, v], normal(rng, b * tt * v))], &|t, x| {
            let lp = t.log_softmax(x[0], 2).unwrap();
            ce_loss(t, lp, &targets, smoothing).unwrap()
        })
    }));
    out.push(run_case("kl_loss", n, 27, |rng, _| {
        let (b, tt, v) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(2..=7));
        let targets = random_targets(rng, b, tt, v);
        let shape = vec![b, tt, v];
        let (p, q) = (normal(rng, b * tt * v), normal(rng, b * tt * v));
        check(&[inp(shape.clone(), p), inp(shape, q)], &|t, x| {
            let lp = t.log_softmax(x[0], 2).unwrap();
            let lq = t.log_softmax(x[1], 2).unwrap();
            kl_loss(t, lp, lq, &targets).unwrap()
        })
    }));
    out.push(run_case("model_ce_objective", n, 28, |rng, s| check_model_objective(rng, s, 0.0)));
    out.push(run_case("model_crossconst_objective", n, 29, |rng, s| check_model_objective(rng, s, 1.0)));
    out
}
