use super::tensor::{Real, Tensor};
use super::NumericsError;

/// `base_lr * min(step^-0.5, step * warmup^-1.5)`.
pub fn inverse_sqrt_lr(base_lr: f64, warmup_steps: u64, step: u64) -> Result<f64, NumericsError> {
    if step == 0 {
        return Err(NumericsError::Contract("learning-rate schedule is undefined at step 0".into()));
    }
    if warmup_steps == 0 {
        return Err(NumericsError::Contract("warmup_steps must be positive".into()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(base_lr * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam moments and schedule settings for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], base_lr: f64, warmup_steps: u64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            base_lr,
            warmup_steps,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`OptimizerState::step`] will use.
    pub fn next_lr(&self) -> Result<f64, NumericsError> {
        inverse_sqrt_lr(self.base_lr, self.warmup_steps, self.step + 1)
    }

    /// One bias-corrected Adam update; returns the learning rate used.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<f64, NumericsError> {
        if params.len() != self.first.len() {
            return Err(NumericsError::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        let lr = self.next_lr()?;
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let eps = T::from_f64_lossy(self.epsilon);
        let lr_t = T::from_f64_lossy(lr);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if p.numel() != m.len() {
                return Err(NumericsError::Shape("parameter changed size since optimizer creation".into()));
            }
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                return Err(NumericsError::Contract("parameter has no gradient".into()));
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_crossover_at_warmup() {
        let lr = inverse_sqrt_lr(7e-4, 10_000, 10_000).unwrap();
        assert!((lr - 7e-4 / 100.0).abs() < 1e-18);
        assert!(inverse_sqrt_lr(7e-4, 10_000, 0).is_err());
        // linear during warmup, inverse square root afterwards
        let a = inverse_sqrt_lr(1.0, 100, 10).unwrap();
        assert!((a - 10.0 / 1000.0).abs() < 1e-15);
        let b = inverse_sqrt_lr(1.0, 100, 400).unwrap();
        assert!((b - 0.05).abs() < 1e-15);
    }

    #[test]
    fn single_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap().requiring_grad()];
        p[0].accumulate_grad(&[1.0]).unwrap();
        let mut opt = OptimizerState::new(&p, 1e-2, 1, 0.9, 0.98, 1e-8);
        let lr = opt.step(&mut p).unwrap();
        assert_eq!(lr, 1e-2);
        let moved = 1.0 - p[0].data()[0];
        assert!((moved - lr / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5f64, -2.0, 3.0]).unwrap().requiring_grad()];
        let before = p[0].data().to_vec();
        let mut opt = OptimizerState::new(&p, 1.0, 4, 0.9, 0.98, 1e-8);
        for _ in 0..5 {
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p[0].data(), &before[..]);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = vec![Tensor::new(vec![1], vec![0.0f64]).unwrap()];
        let mut opt = OptimizerState::new(&p, 1.0, 4, 0.9, 0.98, 1e-8);
        assert!(opt.step(&mut p).is_err());
    }
}
