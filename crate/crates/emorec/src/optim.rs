//! Seeded parameter initialization, Adam, and the learning-rate schedule.

use crate::autodiff::{Gradients, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-bound..bound))
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("std must be finite");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// Linear warm-up over the first `warmup` fraction of `total` steps, then
/// cosine decay toward zero. `step` is 0-based.
pub fn lr_at(step: usize, total: usize, base: f64, warmup: f64) -> f64 {
    assert!(total > 0, "schedule needs at least one step");
    let w = ((total as f64) * warmup).floor() as usize;
    if step < w {
        base * (step + 1) as f64 / w as f64
    } else if total == w {
        base
    } else {
        let progress = (step - w) as f64 / (total - w) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with bias correction. State arrays are keyed by parameter creation
/// order, so optimizer behavior is deterministic for a fixed store layout.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    names: Vec<String>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let names = store.names();
        let m = names.iter().map(|n| ArrayD::zeros(store.get(n).raw_dim())).collect();
        let v = names.iter().map(|n| ArrayD::zeros(store.get(n).raw_dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
            names,
        }
    }

    /// One update. Parameters absent from `grads` are treated as zero-grad.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, name) in self.names.iter().enumerate() {
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = ArrayD::zeros(store.get(name).raw_dim());
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = store.get_mut(name);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let base = 1e-3;
        let total = 100;
        let lr0 = lr_at(0, total, base, 0.1);
        let lr9 = lr_at(9, total, base, 0.1);
        let lr10 = lr_at(10, total, base, 0.1);
        let lr99 = lr_at(99, total, base, 0.1);
        assert!((lr0 - base * 0.1).abs() < 1e-15);
        assert!((lr9 - base).abs() < 1e-15);
        assert!((lr10 - base).abs() < 1e-6);
        assert!(lr99 < base * 0.002);
        // monotone decay after warm-up
        let mut prev = lr10;
        for t in 11..100 {
            let l = lr_at(t, total, base, 0.1);
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let x = store.get("x").clone();
            let mut grads = Gradients::new();
            grads.insert("x".into(), &x * 2.0); // d(x^2)/dx
            opt.step(&mut store, &grads, 0.05);
        }
        let x = store.get("x");
        assert!(x.iter().all(|&t| t.abs() < 1e-3), "x = {x:?}");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(xavier(&mut r1, 4, 7), xavier(&mut r2, 4, 7));
        assert_eq!(normal(&mut r1, &[3, 2], 0.02), normal(&mut r2, &[3, 2], 0.02));
    }
}
