//! Minimal dense layers with hand-written reverse passes.
//!
//! Every activation is a row-major `tokens x features` matrix. Forward passes
//! return a cache that the matching backward pass consumes; backward passes
//! accumulate into each [`Param::grad`] and return the input gradient.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let grad = Mat::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Mat::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Param::new(Mat::from_elem((rows, cols), v))
    }

    pub fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Param::new(Mat::from_shape_fn((rows, cols), |_| dist.sample(rng)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything owning named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Param,
    /// `1 x out`
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, bias: bool) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Linear {
            weight: Param::normal(rng, input, output, std),
            bias: bias.then(|| Param::zeros(1, output)),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let y = x.dot(&self.weight.value);
        match &self.bias {
            Some(b) => y + &b.value,
            None => y,
        }
    }

    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.weight.grad += &x.t().dot(dy);
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.weight.value.t())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(1, dim, 1.0),
            beta: Param::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Mat) -> Mat {
        self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        let n = dy.ncols() as f64;
        let mut dx = Mat::zeros(dy.raw_dim());
        for (i, (mut out, (g, xh))) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows().into_iter().zip(cache.xhat.rows()))
            .enumerate()
        {
            let mean_g = g.sum() / n;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            let is = cache.inv_std[i];
            for ((o, &gv), &xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = is * (gv - mean_g - xv * mean_gx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: &Mat) -> Mat {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut dx = x.mapv(|v| {
        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
    });
    dx *= dy;
    dx
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, dim, hidden, true),
            fc2: Linear::new(rng, hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = gelu(&pre);
        let y = self.fc2.forward(&act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&mut self, c: &MlpCache, dy: &Mat) -> Mat {
        let dact = self.fc2.backward(&c.act, dy);
        let dpre = gelu_backward(&c.pre, &dact);
        self.fc1.backward(&c.x, &dpre)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Multi-head self-attention over all tokens (no mask).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Mat,
    qkv: Mat,
    probs: Vec<Mat>,
    merged: Mat,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width must divide into heads");
        Attention {
            qkv: Linear::new(rng, dim, 3 * dim, true),
            out: Linear::new(rng, dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, AttentionCache) {
        let dim = x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut merged = Mat::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
            let mut a = q.dot(&k.t()) * scale;
            softmax_rows(&mut a);
            merged.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
            probs.push(a);
        }
        let y = self.out.forward(&merged);
        (y, AttentionCache { x: x.clone(), qkv, probs, merged })
    }

    pub fn backward(&mut self, c: &AttentionCache, dy: &Mat) -> Mat {
        let dim = c.x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmerged = self.out.backward(&c.merged, dy);
        let mut dqkv = Mat::zeros(c.qkv.raw_dim());
        for h in 0..self.heads {
            let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = c.qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
            let v = c.qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
            let a = &c.probs[h];
            let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);
            let da = dout.dot(&v.t());
            let dv = a.t().dot(&dout);
            // softmax reverse: ds = a * (da - rowsum(da * a))
            let mut ds = &da * a;
            let row_dot = ds.sum_axis(Axis(1)).insert_axis(Axis(1));
            ds = a * &(&da - &row_dot);
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., dim + h * dh..dim + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(&c.x, &dqkv)
    }
}

impl Module for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize, mlp_hidden: usize) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, mlp_hidden),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, BlockCache) {
        let (h, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h);
        let x1 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&h2);
        (x1 + &m, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&mut self, c: &BlockCache, dy: &Mat) -> Mat {
        let dh2 = self.mlp.backward(&c.mlp, dy);
        let dx1 = dy + &self.ln2.backward(&c.ln2, &dh2);
        let dh = self.attn.backward(&c.attn, &dx1);
        &dx1 + &self.ln1.backward(&c.ln1, &dh)
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference checks of the reverse passes above.
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Fixed random projection turning an output matrix into a scalar loss.
    pub fn probe(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Param::normal(&mut rng, rows, cols, 1.0).value
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
    }

    /// Checks dL/dx and dL/dparams for a module with `loss = sum(probe * f(x))`.
    pub fn check<M: Module + Clone>(
        module: &M,
        x: &Mat,
        forward: impl Fn(&M, &Mat) -> Mat,
        backward: impl Fn(&mut M, &Mat, &Mat) -> Mat,
    ) {
        let y = forward(module, x);
        let w = probe(y.nrows(), y.ncols(), 99);
        let loss = |m: &M, x: &Mat| (&forward(m, x) * &w).sum();
        let mut m = module.clone();
        m.zero_grad();
        let dx = backward(&mut m, x, &w);
        let h = 1e-5;
        // an empty returned matrix means the module does not produce dx
        let input_idx = if dx.is_empty() {
            Vec::new()
        } else {
            vec![(0, 0), (x.nrows() - 1, x.ncols() - 1), (x.nrows() / 2, x.ncols() / 3)]
        };
        for idx in input_idx {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(module, &xp) - loss(module, &xm)) / (2.0 * h);
            assert!(rel_err(num, dx[idx]) < 1e-5, "dx{idx:?}: num {num} vs {}", dx[idx]);
        }
        let mut names = Vec::new();
        m.visit("", &mut |n, _| names.push(n.to_string()));
        for name in names {
            let mut analytic = Mat::zeros((0, 0));
            m.visit("", &mut |n, p| {
                if n == name {
                    analytic = p.grad.clone();
                }
            });
            let shape = analytic.dim();
            for idx in [(0, 0), (shape.0 - 1, shape.1 - 1)] {
                let bump = |delta: f64| {
                    let mut mm = module.clone();
                    mm.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value[idx] += delta;
                        }
                    });
                    loss(&mm, x)
                };
                let num = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    rel_err(num, analytic[idx]) < 1e-5,
                    "{name}{idx:?}: num {num} vs {}",
                    analytic[idx]
                );
            }
        }
    }
}
