//! InfoNCE with a FIFO queue of extra negatives and a learnable temperature.
//!
//! For query rows `S` and positives `G` (row `i` of each forms a pair) and a
//! queue `Q`:
//!
//! ```text
//! L = (1/k) Σᵢ −log( exp(Sᵢ·Gᵢ/τ) / (Σⱼ exp(Sᵢ·Gⱼ/τ) + Σ_q exp(Sᵢ·q/τ)) )
//! ```
//!
//! The loss runs one way only (overhead queries against ground candidates).

use std::collections::VecDeque;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::encoders::INIT_TAU;
use crate::error::{Error, Result};

/// Default queue capacity.
pub const DEFAULT_QUEUE_CAPACITY: usize = 9600;

/// Lower bound on τ.
pub const MIN_TAU: f64 = 1e-4;

/// Allowed deviation from unit norm for queued rows.
const QUEUE_NORM_TOL: f64 = 1e-5;

/// Fixed-capacity FIFO of unit-norm ground embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    rows: VecDeque<Array1<f64>>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::domain("queue capacity must be positive"));
        }
        Ok(EmbeddingQueue {
            capacity,
            rows: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.front().map(|r| r.len())
    }

    /// Appends every row of `g` (oldest first) and evicts from the front to
    /// stay within capacity.
    pub fn push(&mut self, g: ArrayView2<f64>) -> Result<()> {
        if g.nrows() > self.capacity {
            return Err(Error::domain(format!(
                "batch of {} exceeds queue capacity {}",
                g.nrows(),
                self.capacity
            )));
        }
        if let Some(d) = self.dim() {
            if g.ncols() != d {
                return Err(Error::domain(format!("queue holds {d}-d rows, got {}", g.ncols())));
            }
        }
        for row in g.rows() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() || (n - 1.0).abs() > QUEUE_NORM_TOL {
                return Err(Error::domain(format!("queued rows must be unit-norm, got {n}")));
            }
        }
        for row in g.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(row.to_owned());
        }
        Ok(())
    }

    /// Rows oldest-first as a matrix (`len x dim`); `0 x dim_hint` when empty.
    pub fn to_matrix(&self, dim_hint: usize) -> Array2<f64> {
        let d = self.dim().unwrap_or(dim_hint);
        let mut m = Array2::zeros((self.rows.len(), d));
        for (i, r) in self.rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        m
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.rows.iter()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

/// τ, stored as `log τ` so that gradient steps keep it positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    log_tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature {
            log_tau: INIT_TAU.ln(),
        }
    }
}

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::domain(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature::from_log(tau.ln()))
    }

    /// Clamps to `τ ≥ MIN_TAU`.
    pub fn from_log(log_tau: f64) -> Self {
        Temperature {
            log_tau: log_tau.max(MIN_TAU.ln()),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub batch_size: usize,
    /// Negatives seen by each query: `k − 1 + |Q|`.
    pub negatives_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    /// dL/dS, `k x d`.
    pub d_s: Array2<f64>,
    /// dL/dτ.
    pub d_tau: f64,
}

impl LossGrad {
    /// dL/d(log τ).
    pub fn d_log_tau(&self, tau: f64) -> f64 {
        self.d_tau * tau
    }
}

struct Forward {
    candidates: Array2<f64>,
    logits: Array2<f64>,
    lse: Array1<f64>,
    loss: BatchLoss,
}

fn forward(s: ArrayView2<f64>, g: ArrayView2<f64>, queue: &EmbeddingQueue, tau: Temperature) -> Result<Forward> {
    let k = s.nrows();
    if k == 0 {
        return Err(Error::domain("empty batch"));
    }
    if g.dim() != s.dim() {
        return Err(Error::domain(format!("S is {:?} but G is {:?}", s.dim(), g.dim())));
    }
    if let Some(d) = queue.dim() {
        if d != s.ncols() {
            return Err(Error::domain(format!("queue dim {d} != embedding dim {}", s.ncols())));
        }
    }
    if s.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding entry".into()));
    }
    let t = tau.tau();
    let candidates = concatenate(Axis(0), &[g, queue.to_matrix(s.ncols()).view()])
        .expect("matching widths");
    let logits = s.dot(&candidates.t()) / t;
    let mut lse = Array1::zeros(k);
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let l = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse[i] = l;
        total += l - row[i];
    }
    let value = total / k as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    Ok(Forward {
        candidates,
        logits,
        lse,
        loss: BatchLoss {
            value,
            batch_size: k,
            negatives_used: k - 1 + queue.len(),
        },
    })
}

/// Batch loss (see module docs). Rows of `S` and `G` are expected unit-norm.
pub fn info_nce(s: ArrayView2<f64>, g: ArrayView2<f64>, queue: &EmbeddingQueue, tau: Temperature) -> Result<BatchLoss> {
    Ok(forward(s, g, queue, tau)?.loss)
}

/// Loss together with its gradient with respect to `S` and τ. Queue entries
/// and `G` are constants.
pub fn info_nce_with_grad(
    s: ArrayView2<f64>,
    g: ArrayView2<f64>,
    queue: &EmbeddingQueue,
    tau: Temperature,
) -> Result<(BatchLoss, LossGrad)> {
    let f = forward(s, g, queue, tau)?;
    let k = s.nrows();
    let t = tau.tau();
    // softmax over candidates
    let mut p = f.logits.clone();
    for (mut row, &l) in p.rows_mut().into_iter().zip(f.lse.iter()) {
        row.mapv_inplace(|v| (v - l).exp());
    }
    let scale = 1.0 / (k as f64 * t);
    let d_s = (p.dot(&f.candidates) - g) * scale;
    let mut d_tau = 0.0;
    for (i, (pr, lr)) in p.rows().into_iter().zip(f.logits.rows()).enumerate() {
        d_tau -= pr.dot(&lr) - lr[i];
    }
    d_tau *= scale;
    Ok((f.loss, LossGrad { d_s, d_tau }))
}

/// Rows of `m` as a view; convenience for callers holding `Vec<Array1>`.
pub fn stack_rows(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::domain("ragged rows"));
        }
        m.slice_mut(s![i, ..]).assign(r);
    }
    Ok(m)
}
