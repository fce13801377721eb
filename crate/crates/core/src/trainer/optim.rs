//! AdamW and cosine annealing with warm restarts.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;

use crate::encoders::nn::Param;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: u64,
}

/// Decoupled-weight-decay Adam with per-parameter step counts, so that
/// parameters skipped on some steps (a dropped dynamic encoder) keep exact
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, Moments>,
}

/// Gains, biases and the temperature are not decayed.
fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with("gamma") || name.ends_with("beta") || name == "log_tau")
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    pub fn step_matrix(&mut self, name: &str, value: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Array2::zeros(value.raw_dim()),
            v: Array2::zeros(value.raw_dim()),
            t: 0,
        });
        st.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(st.t as i32);
        let bc2 = 1.0 - b2.powi(st.t as i32);
        let wd = if decays(name) { self.weight_decay } else { 0.0 };
        ndarray::Zip::from(value)
            .and(grad)
            .and(&mut st.m)
            .and(&mut st.v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p *= 1.0 - lr * wd;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
    }

    pub fn step(&mut self, name: &str, p: &mut Param, lr: f64) {
        let grad = p.grad.clone();
        self.step_matrix(name, &mut p.value, &grad, lr);
    }

    pub fn step_scalar(&mut self, name: &str, value: &mut f64, grad: f64, lr: f64) {
        let mut v = Array2::from_elem((1, 1), *value);
        self.step_matrix(name, &mut v, &Array2::from_elem((1, 1), grad), lr);
        *value = v[(0, 0)];
    }
}

/// SGDR schedule: `lr = base · (1 + cos(π·t_cur/T_i)) / 2` with periods
/// `T_0, T_0·mult, T_0·mult², …` measured in (fractional) epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineWarmRestarts {
    pub base_lr: f64,
    pub period: f64,
    pub mult: f64,
    pub min_lr: f64,
}

impl CosineWarmRestarts {
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let (t_cur, t_i) = if self.mult == 1.0 {
            (epoch % self.period, self.period)
        } else {
            let n = ((epoch / self.period * (self.mult - 1.0) + 1.0).ln() / self.mult.ln()).floor();
            let start = self.period * (self.mult.powf(n) - 1.0) / (self.mult - 1.0);
            (epoch - start, self.period * self.mult.powf(n))
        };
        self.min_lr + (self.base_lr - self.min_lr) * (1.0 + (PI * t_cur / t_i).cos()) / 2.0
    }
}
