//! SGD and Adam over a [`ParamStore`]. Both read the accumulated gradients
//! and leave them in place; callers zero them before the next batch.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?} (sgd, adam)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        check_grads(store)?;
        for p in store.iter_mut() {
            let g = p.tensor.grad().expect("checked").to_vec();
            for (x, g) in p.tensor.data_mut().iter_mut().zip(&g) {
                *x -= self.lr * g;
            }
        }
        Ok(())
    }
}

fn check_grads(store: &ParamStore) -> Result<()> {
    match store.iter().find(|(_, p)| p.tensor.grad().is_none()) {
        Some((_, p)) => Err(Error::MissingGrad(p.name.clone())),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_grads(store)?;
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != store.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("state for {} tensors, store has {}", self.m.len(), store.len()),
            ));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.tensor.grad().expect("checked").to_vec();
            if g.len() != m.len() {
                return Err(Error::shape("adam_step", &[m.len()], &[g.len()]));
            }
            for (((x, g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Serializable optimizer state for exact resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerState {
    Sgd {
        lr: f64,
    },
    Adam {
        config: AdamConfig,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            })),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(store),
            Optimizer::Adam(o) => o.step(store),
        }
    }

    pub fn state(&self) -> OptimizerState {
        match self {
            Optimizer::Sgd(o) => OptimizerState::Sgd { lr: o.lr },
            Optimizer::Adam(o) => OptimizerState::Adam {
                config: o.config,
                t: o.t,
                m: o.m.clone(),
                v: o.v.clone(),
            },
        }
    }

    pub fn from_state(state: &OptimizerState) -> Self {
        match state {
            OptimizerState::Sgd { lr } => Optimizer::Sgd(Sgd::new(*lr)),
            OptimizerState::Adam { config, t, m, v } => Optimizer::Adam(Adam {
                config: *config,
                t: *t,
                m: m.clone(),
                v: v.clone(),
            }),
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(values: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::vector(values));
        store
    }

    fn set_grad(store: &mut ParamStore, grad: &[f64]) {
        store.zero_grad();
        let id = store.find("theta").unwrap();
        store.accumulate(id, grad);
    }

    fn theta(store: &ParamStore) -> Vec<f64> {
        store.iter().next().unwrap().1.tensor.data().to_vec()
    }

    #[test]
    fn sgd_examples() {
        let mut s = single(vec![1.0]);
        set_grad(&mut s, &[0.0]);
        Sgd::new(0.1).step(&mut s).unwrap();
        assert_eq!(theta(&s), vec![1.0]);
        set_grad(&mut s, &[2.0]);
        Sgd::new(0.1).step(&mut s).unwrap();
        assert!((theta(&s)[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_geometric_decay() {
        let mut s = single(vec![1.0]);
        let sgd = Sgd::new(0.1);
        for _ in 0..100 {
            let g = theta(&s);
            set_grad(&mut s, &g);
            sgd.step(&mut s).unwrap();
        }
        assert!((theta(&s)[0] - 0.9f64.powi(100)).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = single(vec![1.0]);
        assert!(matches!(Sgd::new(0.1).step(&mut s), Err(Error::MissingGrad(_))));
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut s), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn adam_zero_grad_first_step_is_noop() {
        let mut s = single(vec![0.3, -2.0]);
        set_grad(&mut s, &[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(theta(&s), vec![0.3, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_sign_like_update() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.0, beta2: 0.0, eps: 1e-12 };
        let mut s = single(vec![1.0, 1.0]);
        set_grad(&mut s, &[5.0, -5.0]);
        Adam::new(cfg).step(&mut s).unwrap();
        let t = theta(&s);
        assert!((t[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((t[1] - (1.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_bound() {
        let cfg = AdamConfig::default();
        for g in [1e-6, 0.01, 1.0, 250.0] {
            let mut s = single(vec![0.0]);
            set_grad(&mut s, &[g]);
            Adam::new(cfg).step(&mut s).unwrap();
            // m̂₁ = g and v̂₁ = g², so the first step is η·|g|/(|g| + ε).
            let step = theta(&s)[0].abs();
            assert!(step <= cfg.lr * (1.0 + 1e-9));
            assert!((step - cfg.lr * g / (g + cfg.eps)).abs() <= 1e-9 * cfg.lr);
        }
    }

    /// f(θ) = ½(θ₀ − 1)² + 50(θ₁ + 2)², condition number 100, optimum (1, −2).
    fn ill_conditioned_run(steps: usize) -> (Vec<f64>, usize) {
        let mut s = single(vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for k in 0..steps {
            let t = theta(&s);
            let dist = ((t[0] - 1.0).powi(2) + (t[1] + 2.0).powi(2)).sqrt();
            if dist < 1e-3 {
                return (t, k);
            }
            set_grad(&mut s, &[t[0] - 1.0, 100.0 * (t[1] + 2.0)]);
            adam.step(&mut s).unwrap();
        }
        (theta(&s), steps)
    }

    #[test]
    fn adam_converges_on_ill_conditioned_quadratic() {
        let (t, steps) = ill_conditioned_run(5000);
        let dist = ((t[0] - 1.0).powi(2) + (t[1] + 2.0).powi(2)).sqrt();
        assert!(dist < 1e-3, "distance {dist} after {steps} steps");
    }

    #[test]
    fn adam_is_deterministic_and_resumable() {
        let run = |split: Option<usize>| {
            let mut s = single(vec![0.5, -0.5, 2.0]);
            let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
            for k in 0..20 {
                if Some(k) == split {
                    opt = Optimizer::from_state(&serde_json::from_str(&serde_json::to_string(&opt.state()).unwrap()).unwrap());
                }
                let g: Vec<f64> = theta(&s).iter().map(|x| x.sin() + 0.1 * k as f64).collect();
                set_grad(&mut s, &g);
                opt.step(&mut s).unwrap();
            }
            theta(&s)
        };
        assert_eq!(run(None), run(None));
        assert_eq!(run(None), run(Some(7)));
    }

    #[test]
    fn clipping_limits_global_norm() {
        let mut s = single(vec![0.0, 0.0]);
        set_grad(&mut s, &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
        set_grad(&mut s, &[0.3, 0.4]);
        clip_grad_norm(&mut s, 1.0);
        assert_eq!(s.iter().next().unwrap().1.tensor.grad().unwrap(), &[0.3, 0.4]);
    }
}
