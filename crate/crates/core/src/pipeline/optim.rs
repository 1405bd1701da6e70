//! AdamW with polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// `lr · (1 − t/T)^power`.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> f64 {
    let frac = (iter as f64 / total.max(1) as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over every parameter with a gradient. Decoupled weight
    /// decay applies to matrices only (not biases, norms or vectors).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Data(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let decay = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1.0, 0, 10, 0.9), 1.0);
        assert_eq!(poly_lr(1.0, 10, 10, 0.9), 0.0);
        assert!((poly_lr(3e-4, 5, 10, 0.9) - 3e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::from_vec(vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("b".to_string(), Tensor::from_vec(vec![0.5, -2.0]));
        let mut opt = AdamW::new(0.1);
        opt.step(&mut store, &grads, 0.01).unwrap();
        let b = store.get("b").unwrap().data();
        assert!((b[0] - 0.99).abs() < 1e-9);
        assert!((b[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new([1, 2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let w = store.get("w").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), w.map(|x| 2.0 * (x - 0.5)));
            opt.step(&mut store, &grads, 0.01).unwrap();
        }
        assert!(store.get("w").unwrap().data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
