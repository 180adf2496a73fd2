//! AdamW: Adam moments with decoupled weight decay.

use crate::error::AutodiffError;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, weight_decay, ..Default::default() }
    }

    /// `lr = 0` is accepted so that frozen runs can be expressed.
    pub fn validate(&self) -> Result<(), AutodiffError> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::Shape(format!("invalid AdamW configuration {self:?}")))
        }
    }
}

/// Per-tensor first and second moments.
#[derive(Clone, Debug, Default)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn new(len: usize) -> Self {
        Moments { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// One AdamW update of `param` in place. `step` counts from 1.
pub fn adamw_step<T: Real>(param: &mut [T], grad: &[T], state: &mut Moments<T>, step: u64, cfg: &AdamWConfig) {
    assert_eq!(param.len(), grad.len(), "parameter and gradient lengths differ");
    assert_eq!(param.len(), state.m.len(), "moment buffer length differs");
    let lr = T::from_f64(cfg.lr);
    let decay = T::one() - T::from_f64(cfg.lr * cfg.weight_decay);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::from_f64(cfg.eps);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        if cfg.weight_decay != 0.0 {
            *p *= decay;
        }
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Optimizer over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Result<Self, AutodiffError> {
        config.validate()?;
        Ok(AdamW { config, step: 0, moments: sizes.iter().map(|&n| Moments::new(n)).collect() })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut [T], &'a [T])>) {
        self.step += 1;
        let mut count = 0;
        for ((p, g), st) in params.into_iter().zip(self.moments.iter_mut()) {
            adamw_step(p, g, st, self.step, &self.config);
            count += 1;
        }
        assert_eq!(count, self.moments.len(), "AdamW received a different number of tensors than it was built for");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![1.5f64, -2.0];
        let mut st = Moments::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 1, &AdamWConfig::new(0.1, 0.0));
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn zero_grad_decay_shrinks_by_lr_wd() {
        let mut p = vec![2.0f64];
        let mut st = Moments::new(1);
        let cfg = AdamWConfig::new(0.1, 0.5);
        adamw_step(&mut p, &[0.0], &mut st, 1, &cfg);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_hand_trace() {
        // f(p) = p^2 at p = 1: g = 2, m = 0.2, v = 0.004,
        // mhat = 0.2 / 0.1 = 2, vhat = 0.004 / 0.001 = 4,
        // p = 1 - 0.1 * 2 / (2 + 1e-8).
        let mut p = vec![1.0f64];
        let mut st = Moments::new(1);
        adamw_step(&mut p, &[2.0], &mut st, 1, &AdamWConfig::new(0.1, 0.0));
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-14, "{} vs {expected}", p[0]);
        assert!((st.m[0] - 0.2).abs() < 1e-15);
        assert!((st.v[0] - 0.004).abs() < 1e-15);

        // Second step from the hand-computed state, g = 2 p.
        let g = 2.0 * p[0];
        let m = 0.9 * 0.2 + 0.1 * g;
        let v = 0.999 * 0.004 + 0.001 * g * g;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let expected2 = p[0] - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        adamw_step(&mut p, &[g], &mut st, 2, &AdamWConfig::new(0.1, 0.0));
        assert!((p[0] - expected2).abs() < 1e-14);
    }

    #[test]
    fn optimizer_tracks_steps() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::new(0.01, 0.0), &[2, 1]).unwrap();
        let mut a = vec![1.0f32, 2.0];
        let mut b = vec![3.0f32];
        let ga = vec![1.0f32, -1.0];
        let gb = vec![0.5f32];
        opt.step([(&mut a[..], &ga[..]), (&mut b[..], &gb[..])]);
        assert_eq!(opt.steps_taken(), 1);
        assert!(a[0] < 1.0 && a[1] > 2.0 && b[0] < 3.0);
    }

    #[test]
    fn rejects_bad_betas() {
        let cfg = AdamWConfig { beta1: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
