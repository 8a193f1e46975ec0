//! Named parameters, gradient buffers and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters placed on a tape for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle of a bound parameter.
    ///
    /// # Panics
    /// If `name` was never bound; callers build names from the same config.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Reads every trainable gradient off a tape after `backward`.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        let mut out = Gradients::default();
        for (name, &v) in &self.vars {
            if let Some(g) = tape.grad(v) {
                out.tensors.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`; those for which `trainable` returns
    /// false are recorded as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, g) in other.tensors {
            match self.tensors.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.tensors.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.tensors.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as `adam.m/<name>` and `adam.v/<name>` tensors.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v/{k}"), t.clone());
        }
        out
    }

    /// Restores from [`Adam::state_tensors`] output and a step count.
    pub fn restore(config: AdamConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Self {
        let mut adam = Self::new(config);
        adam.step = step;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m/") {
                adam.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v/") {
                adam.v.insert(name.to_string(), t.clone());
            }
        }
        adam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, value: f64) -> (ParamStore, Gradients) {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(value));
        (p, Gradients::default())
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut p, mut g) = one("w", 1.0);
        g.insert("w", Tensor::scalar(0.3));
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        adam.step(&mut p, &g).unwrap();
        let expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut g) = one("w", -2.5);
        g.insert("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..3 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), -2.5);
    }

    #[test]
    fn three_step_trajectory_matches_hand_run() {
        // Hand-run recurrence with gradients 0.5, -1.0, 2.0 at lr 0.1, written
        // out with explicit powers rather than the incremental form.
        let grads = [0.5, -1.0, 2.0];
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut x = 1.0f64;
        for t in 1..=3usize {
            let m: f64 = (0..t)
                .map(|k| (1.0 - b1) * b1.powi((t - 1 - k) as i32) * grads[k])
                .sum();
            let v: f64 = (0..t)
                .map(|k| (1.0 - b2) * b2.powi((t - 1 - k) as i32) * grads[k] * grads[k])
                .sum();
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let (mut p, _) = one("w", 1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(lr));
        for &gv in &grads {
            let mut g = Gradients::default();
            g.insert("w", Tensor::scalar(gv));
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p.get("w").unwrap().item() - x).abs() < 1e-12);
        assert!((x - 0.894644792718104774).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut p, mut g) = one("w", 1.0);
        g.insert("w", Tensor::zeros(2, 1));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        assert!(matches!(adam.step(&mut p, &g), Err(Error::Shape { .. })));
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn state_round_trip() {
        let (mut p, mut g) = one("w", 1.0);
        g.insert("w", Tensor::scalar(0.7));
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        adam.step(&mut p, &g).unwrap();
        let restored = Adam::restore(adam.config, adam.steps_taken(), &adam.state_tensors());
        assert_eq!(restored, adam);
    }
}
