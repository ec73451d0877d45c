//! AdamW with a per-step cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::backbone::ParamMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base * 0.5 * (1 + cos(pi * step / total))`, clamped at the end.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamMap,
    v: ParamMap,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamMap, weight_decay: f64) -> Self {
        let zeros: ParamMap = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&ParamMap, &ParamMap) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: ParamMap, v: ParamMap, t: u64) -> Result<()> {
        crate::backbone::check_same_layout(&self.m, &m)?;
        crate::backbone::check_same_layout(&self.v, &v)?;
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    /// One update. Parameters without a gradient entry are treated as
    /// having zero gradient. Decay applies to matrices only; biases, norm
    /// scales and token vectors are not decayed.
    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        if let Some(name) = grads.keys().find(|k| !params.contains_key(*k)) {
            return Err(Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::Shape(format!("gradient of `{name}` has {} entries, expected {}", g.len(), p.len())));
                }
            }
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.get_mut(name).expect("moment layout matches");
            let v = self.v.get_mut(name).expect("moment layout matches");
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamMap::new();
        p.insert("b".into(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.05);
        let mut g = BTreeMap::new();
        g.insert("b".to_string(), vec![0.3, -2.0]);
        opt.step(&mut p, &g, 0.1).unwrap();
        // bias-corrected first step has magnitude lr regardless of gradient scale
        assert!((p["b"].data()[0] - 0.9).abs() < 1e-6);
        assert!((p["b"].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::new(vec![1, 2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.0);
        for s in 0..500 {
            let g: BTreeMap<String, Vec<f64>> = [("w".to_string(), p["w"].data().iter().map(|x| 2.0 * x).collect())].into();
            opt.step(&mut p, &g, cosine_lr(0.1, s, 500)).unwrap();
        }
        assert!(p["w"].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn unknown_gradient_rejected() {
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::zeros(vec![1]));
        let mut opt = AdamW::new(&p, 0.0);
        let g: BTreeMap<String, Vec<f64>> = [("x".to_string(), vec![1.0])].into();
        assert!(opt.step(&mut p, &g, 0.1).is_err());
    }
}
