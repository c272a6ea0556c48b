//! AdamW with decoupled weight decay and the one-cycle learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OptimConfig {
    pub max_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub final_lr_fraction: f64,
    /// The schedule starts at `max_lr / start_lr_divisor`.
    pub start_lr_divisor: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::standalone()
    }
}

impl OptimConfig {
    /// Classifier trained alone.
    pub fn standalone() -> Self {
        Self {
            max_lr: 2e-4,
            weight_decay: 5e-3,
            batch_size: 32,
            epochs: 200,
            warmup_ratio: 0.3,
            final_lr_fraction: 0.1,
            start_lr_divisor: 25.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    /// Classifier trained jointly with the selector.
    pub fn with_selector() -> Self {
        Self { max_lr: 1e-4, ..Self::standalone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_lr > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.warmup_ratio)
            && self.final_lr_fraction > 0.0
            && self.start_lr_divisor >= 1.0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    /// Step at which the schedule peaks.
    pub fn peak_step(&self, total_steps: usize) -> usize {
        let peak = libm::ceil(self.warmup_ratio * total_steps as f64) as usize;
        peak.min(total_steps.saturating_sub(1))
    }
}

/// Cosine warm-up from `max_lr / start_lr_divisor` to `max_lr` at
/// `ceil(warmup_ratio · total)`, then cosine decay to `final_lr_fraction · max_lr`
/// at the last step.
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &OptimConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Argument(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let max = cfg.max_lr;
    let start = max / cfg.start_lr_divisor;
    let end = max * cfg.final_lr_fraction;
    let peak = cfg.peak_step(total_steps);
    let cos = |frac: f64| libm::cos(core::f64::consts::PI * frac);
    if step < peak {
        let frac = step as f64 / peak as f64;
        return Ok(start + (max - start) * (1.0 - cos(frac)) / 2.0);
    }
    let span = total_steps - 1 - peak;
    if span == 0 {
        return Ok(max);
    }
    let frac = (step - peak) as f64 / span as f64;
    Ok(end + (max - end) * (1.0 + cos(frac)) / 2.0)
}

/// First and second moment estimates for every parameter of a list of stores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every store, `grads[s][i]` belonging to tensor `i` of store `s`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &[Vec<Vec<f64>>], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if stores.len() != grads.len() {
            return Err(Error::Argument(format!("{} stores but {} gradient lists", stores.len(), grads.len())));
        }
        for (store, gs) in stores.iter().zip(grads) {
            if store.len() != gs.len() {
                return Err(Error::Argument(format!("{} tensors but {} gradients", store.len(), gs.len())));
            }
            for ((name, t), gr) in store.iter().zip(gs) {
                if t.numel() != gr.len() {
                    return Err(Error::Dimension { op: "adamw", detail: format!("{name}: {} values, {} gradients", t.numel(), gr.len()) });
                }
                if gr.iter().any(|x| !x.is_finite()) {
                    return Err(Error::PoisonedState { param: name.into() });
                }
            }
        }
        if self.m.is_empty() {
            for gs in grads {
                for gr in gs {
                    self.m.push(vec![0.0; gr.len()]);
                    self.v.push(vec![0.0; gr.len()]);
                }
            }
        }
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - libm::pow(b1, self.step as f64);
        let bc2 = 1.0 - libm::pow(b2, self.step as f64);
        let decay = 1.0 - lr * cfg.weight_decay;
        let mut slot = 0;
        for (store, gs) in stores.iter_mut().zip(grads) {
            for (t, gr) in store.tensors_mut().iter_mut().zip(gs) {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for (((p, g), m), v) in t.data_mut().iter_mut().zip(gr).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *p *= decay;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
                }
                slot += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn defaults() {
        let c = OptimConfig::default();
        assert_eq!((c.weight_decay, c.batch_size, c.epochs, c.max_lr), (5e-3, 32, 200, 2e-4));
        assert_eq!((c.warmup_ratio, c.final_lr_fraction), (0.3, 0.1));
        assert_eq!(OptimConfig::with_selector().max_lr, 1e-4);
    }

    #[test]
    fn schedule_examples() {
        let c = OptimConfig::standalone();
        let total = 1000;
        assert!((onecycle_lr(300, total, &c).unwrap() - c.max_lr).abs() < 1e-12);
        assert!((onecycle_lr(999, total, &c).unwrap() - 0.1 * c.max_lr).abs() < 1e-9);
        assert_eq!(onecycle_lr(0, total, &c).unwrap(), c.max_lr / 25.0);
        assert!(onecycle_lr(1000, total, &c).is_err());
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, &c).unwrap()).collect();
        assert!(lrs[..=300].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[300..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut s = store(&[1.0, -2.0, 3.5]);
        let before = s.clone();
        let mut opt = AdamW::new();
        opt.step(&mut [&mut s], &[vec![vec![0.0; 3]]], 1e-2, &cfg).unwrap();
        assert_eq!(s, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decay_only_step() {
        let cfg = OptimConfig { weight_decay: 0.1, ..OptimConfig::default() };
        let mut s = store(&[1.0]);
        AdamW::new().step(&mut [&mut s], &[vec![vec![0.0]]], 0.1, &cfg).unwrap();
        assert!((s.tensors()[0].data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_about_lr() {
        // m/sqrt(v) -> g/|g| after bias correction, so every step moves by about lr against the sign.
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut s = store(&[0.0, 0.0]);
        let mut opt = AdamW::new();
        let lr = 1e-3;
        let mut prev = s.tensors()[0].data().to_vec();
        for _ in 0..50 {
            opt.step(&mut [&mut s], &[vec![vec![3.0, -0.2]]], lr, &cfg).unwrap();
            let now = s.tensors()[0].data().to_vec();
            assert!(((now[0] - prev[0]) + lr).abs() < 1e-8);
            assert!(((now[1] - prev[1]) - lr).abs() < 1e-6);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_poisons_without_update() {
        let cfg = OptimConfig::default();
        let mut s = store(&[1.0, 2.0]);
        let before = s.clone();
        let mut opt = AdamW::new();
        let err = opt.step(&mut [&mut s], &[vec![vec![0.5, f64::NAN]]], 1e-3, &cfg).unwrap_err();
        assert_eq!(err, Error::PoisonedState { param: "w".into() });
        assert_eq!(s, before);
        assert_eq!(opt.steps(), 0);
    }

    /// Independent Adam (no decay) written from the update rule.
    fn plain_adam(p: &mut [f64], grads: &[Vec<f64>], lrs: &[f64], cfg: &OptimConfig) {
        let (b1, b2) = cfg.betas;
        let mut m = vec![0.0; p.len()];
        let mut v = vec![0.0; p.len()];
        for (t, (g, lr)) in grads.iter().zip(lrs).enumerate() {
            let t = (t + 1) as f64;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - libm::pow(b1, t));
                let vh = v[i] / (1.0 - libm::pow(b2, t));
                p[i] -= lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
        }
    }

    proptest! {
        #[test]
        fn zero_decay_matches_plain_adam_bitwise(
            init in proptest::collection::vec(-3.0f64..3.0, 4),
            grads in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..20),
        ) {
            let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
            let total = grads.len() + 10;
            let lrs: Vec<f64> = (0..grads.len()).map(|s| onecycle_lr(s, total, &cfg).unwrap()).collect();
            let mut s = store(&init);
            let mut opt = AdamW::new();
            for (g, lr) in grads.iter().zip(&lrs) {
                opt.step(&mut [&mut s], &[vec![g.clone()]], *lr, &cfg).unwrap();
            }
            let mut want = init.clone();
            plain_adam(&mut want, &grads, &lrs, &cfg);
            prop_assert_eq!(s.tensors()[0].data(), want.as_slice());
        }

        #[test]
        fn schedule_boundaries(total in 10usize..5000, max_lr in 1e-6f64..1.0) {
            let cfg = OptimConfig { max_lr, ..OptimConfig::default() };
            let peak = libm::ceil(0.3 * total as f64) as usize;
            let at_peak = onecycle_lr(peak, total, &cfg).unwrap();
            let last = onecycle_lr(total - 1, total, &cfg).unwrap();
            prop_assert!((at_peak - max_lr).abs() <= 1e-9 * max_lr);
            prop_assert!((last - 0.1 * max_lr).abs() <= 1e-9 * max_lr);
        }
    }
}
