use crate::error::{NnError, Result};
use crate::graph::{BoundParams, Gradients};
use crate::tensor::ParamStore;

/// Sums parameter gradients across several graphs, in a fixed order.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            sums: (0..store.len()).map(|i| vec![0.0; store.tensor(i).numel()]).collect(),
        }
    }

    /// Adds `scale * grad` for every bound parameter that received a gradient.
    pub fn add(&mut self, bound: &BoundParams<'_>, grads: &Gradients, scale: f64) {
        for (sum, g) in self.sums.iter_mut().zip(bound.grads(grads)) {
            if let Some(g) = g {
                sum.iter_mut().zip(g).for_each(|(s, g)| *s += scale * g);
            }
        }
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.sums
    }

    pub fn norm(&self) -> f64 {
        self.sums.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v = 0.0));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the store layout.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.tensor(i).numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != store.tensor(i).numel() {
                return Err(NnError::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.tensor(i).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(format!(
                    "gradient of `{}` at element {bad}",
                    store.name(i)
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
