//! Token-level losses over `[B, T, V]` log-probabilities. Positions past each
//! target's length are padding and carry zero weight.

use crate::numerics::{Real, Tape, Var};

use super::TrainingError;

/// Validity mask `[B * T]` for targets padded to `t`.
pub fn target_mask(targets: &[Vec<u32>], t: usize) -> Vec<bool> {
    targets.iter().flat_map(|y| (0..t).map(move |i| i < y.len())).collect()
}

fn dims<T: Real>(tape: &Tape<T>, lp: Var, targets: &[Vec<u32>]) -> Result<(usize, usize, usize), TrainingError> {
    let s = tape.shape(lp);
    if s.len() != 3 || s[0] != targets.len() || targets.iter().any(|y| y.len() > s[1]) {
        return Err(TrainingError::Contract(format!(
            "log-probabilities {s:?} do not cover {} targets",
            targets.len()
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Label-smoothed cross-entropy, averaged over non-pad target tokens.
///
/// `log_probs` holds `ln f`. The smoothed target puts `1 - smoothing` on the
/// gold class plus `smoothing / V` on every class.
pub fn ce_loss<T: Real>(
    tape: &mut Tape<T>,
    log_probs: Var,
    targets: &[Vec<u32>],
    smoothing: f64,
) -> Result<Var, TrainingError> {
    let (b, t, v) = dims(tape, log_probs, targets)?;
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(TrainingError::Contract(format!("label smoothing {smoothing} outside [0, 1]")));
    }
    let tokens: usize = targets.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(TrainingError::Input("cross-entropy over an empty mask".into()));
    }
    let scale = -1.0 / tokens as f64;
    let off = T::from_f64_lossy(scale * smoothing / v as f64);
    let on = T::from_f64_lossy(scale * (1.0 - smoothing + smoothing / v as f64));
    let mut w = vec![T::zero(); b * t * v];
    for (bi, y) in targets.iter().enumerate() {
        for (ti, &gold) in y.iter().enumerate() {
            if gold as usize >= v {
                return Err(TrainingError::Input(format!("target id {gold} >= vocabulary {v}")));
            }
            let row = &mut w[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            row.iter_mut().for_each(|x| *x = off);
            row[gold as usize] = on;
        }
    }
    Ok(tape.weighted_sum(log_probs, w)?)
}

/// `KL(p || q)` per target token, averaged over non-pad positions.
/// Both arguments are log-probabilities; gradients reach both.
pub fn kl_loss<T: Real>(tape: &mut Tape<T>, log_p: Var, log_q: Var, targets: &[Vec<u32>]) -> Result<Var, TrainingError> {
    if tape.shape(log_p) != tape.shape(log_q) {
        return Err(TrainingError::Contract(format!(
            "KL between {:?} and {:?}",
            tape.shape(log_p),
            tape.shape(log_q)
        )));
    }
    let (_, t, v) = dims(tape, log_p, targets)?;
    let tokens: usize = targets.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(TrainingError::Input("KL over an empty mask".into()));
    }
    let inv = T::from_f64_lossy(1.0 / tokens as f64);
    let w: Vec<T> = target_mask(targets, t)
        .into_iter()
        .flat_map(|m| std::iter::repeat(if m { inv } else { T::zero() }).take(v))
        .collect();
    let diff = tape.sub(log_p, log_q)?;
    let p = tape.exp(log_p);
    let terms = tape.mul(p, diff)?;
    Ok(tape.weighted_sum(terms, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lp(tape: &mut Tape<f64>, shape: Vec<usize>, probs: &[f64]) -> Var {
        tape.constant(shape, probs.iter().map(|p| p.ln()).collect()).unwrap()
    }

    #[test]
    fn uniform_prediction_gives_log_v() {
        for v in [2usize, 7, 100] {
            for eps in [0.0, 0.1, 0.5] {
                let mut tape = Tape::new();
                let x = lp(&mut tape, vec![1, 2, v], &vec![1.0 / v as f64; 2 * v]);
                let l = ce_loss(&mut tape, x, &[vec![1, 0]], eps).unwrap();
                assert!((tape.value(l)[0] - (v as f64).ln()).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn two_class_hand_case() {
        let mut tape = Tape::new();
        let x = lp(&mut tape, vec![1, 1, 2], &[0.25, 0.75]);
        let l = ce_loss(&mut tape, x, &[vec![1]], 0.0).unwrap();
        assert!((tape.value(l)[0] - 0.287682072451781).abs() < 1e-12);
        // smoothed: q = (0.05, 0.95), loss = -(q . ln f)
        let l = ce_loss(&mut tape, x, &[vec![1]], 0.1).unwrap();
        let oracle = -(0.05 * 0.25f64.ln() + 0.95 * 0.75f64.ln());
        assert!((tape.value(l)[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mut tape = Tape::new();
        let x = lp(&mut tape, vec![1, 1, 2], &[0.5, 0.5]);
        assert!(matches!(ce_loss(&mut tape, x, &[vec![]], 0.0), Err(TrainingError::Input(_))));
        assert!(matches!(kl_loss(&mut tape, x, x, &[vec![]]), Err(TrainingError::Input(_))));
    }

    #[test]
    fn kl_hand_case_and_asymmetry() {
        let mut tape = Tape::new();
        let p = lp(&mut tape, vec![1, 1, 2], &[0.5, 0.5]);
        let q = lp(&mut tape, vec![1, 1, 2], &[0.25, 0.75]);
        let pq = kl_loss(&mut tape, p, q, &[vec![0]]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((tape.value(pq)[0] - expected).abs() < 1e-12);
        assert!((tape.value(pq)[0] - 0.143841).abs() < 1e-6);
        let qp = kl_loss(&mut tape, q, p, &[vec![0]]).unwrap();
        assert!((tape.value(qp)[0] - tape.value(pq)[0]).abs() > 1e-3);
        let pp = kl_loss(&mut tape, p, p, &[vec![0]]).unwrap();
        assert!(tape.value(pp)[0].abs() <= 1e-9);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut tape = Tape::new();
        let p = lp(&mut tape, vec![1, 1, 2], &[0.5, 0.5]);
        let q = lp(&mut tape, vec![1, 1, 3], &[0.2, 0.3, 0.5]);
        assert!(matches!(kl_loss(&mut tape, p, q, &[vec![0]]), Err(TrainingError::Contract(_))));
    }

    #[test]
    fn pad_positions_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let targets = vec![vec![1, 2], vec![0, 1, 2]];
        let rand_lp = |rng: &mut ChaCha8Rng, pad_val: Option<f64>| -> Vec<f64> {
            let mut out = Vec::new();
            for bi in 0..2 {
                for ti in 0..3 {
                    let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    for r in raw {
                        let v = (r / z).ln();
                        out.push(if ti >= targets[bi].len() { pad_val.unwrap_or(v) } else { v });
                    }
                }
            }
            out
        };
        let base = rand_lp(&mut ChaCha8Rng::seed_from_u64(1), None);
        let mut other = base.clone();
        // row 0, position 2 is padding
        for c in 0..4 {
            other[2 * 4 + c] = rng.gen_range(-9.0..-0.1);
        }
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3, 4], base.clone()).unwrap();
        let b = tape.constant(vec![2, 3, 4], other).unwrap();
        let q = tape.constant(vec![2, 3, 4], rand_lp(&mut rng, None)).unwrap();
        let ca = ce_loss(&mut tape, a, &targets, 0.1).unwrap();
        let cb = ce_loss(&mut tape, b, &targets, 0.1).unwrap();
        assert_eq!(tape.value(ca), tape.value(cb));
        let ka = kl_loss(&mut tape, a, q, &targets).unwrap();
        let kb = kl_loss(&mut tape, b, q, &targets).unwrap();
        assert_eq!(tape.value(ka), tape.value(kb));
    }
}
