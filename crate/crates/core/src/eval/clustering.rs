use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest
/// index.
fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.outer_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.outer_iter().map(|x| sq_dist(x, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // every point coincides with a centroid; pick any unused index
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, x) in data.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, data.row(next)));
        }
    }
    let mut centroids = Array2::zeros((k, data.ncols()));
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).assign(&data.row(i));
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing (or `MAX_LLOYD_ITERATIONS`). Empty clusters keep their previous
/// centroid.
pub fn kmeans(data: ArrayView2<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(Error::domain(format!("k = {k} must lie in 1..={n}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let assigned: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| nearest(data.row(i), &centroids)).collect();
        history.push(assigned.iter().map(|a| a.1).sum());
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        if !changed {
            break;
        }
        labels = assigned.iter().map(|a| a.0).collect();
        let mut sums = Array2::<f64>::zeros((k, data.ncols()));
        let mut counts = vec![0usize; k];
        for (x, &l) in data.outer_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &x);
            counts[l] += 1;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / cnt as f64));
            }
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(KMeans {
        labels,
        centroids,
        inertia,
        history,
    })
}

/// Mean silhouette value under Euclidean distance. Points in singleton
/// clusters score 0.
pub fn silhouette(data: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let n = data.nrows();
    if labels.len() != n {
        return Err(Error::domain(format!("{} labels for {n} points", labels.len())));
    }
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    let m = ids.len();
    if m < 2 {
        return Err(Error::domain("silhouette needs at least two clusters"));
    }
    let dense: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0usize; m];
    for &c in &dense {
        sizes[c] += 1;
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = dense[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; m];
            for j in 0..n {
                if j != i {
                    sums[dense[j]] += sq_dist(data.row(i), data.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..m)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SilhouettePoint {
    pub k: usize,
    pub a: f64,
    pub b: f64,
}

/// Silhouette of k-means clusterings of two embedding sets, run with the
/// same parameters, for every `k` in `ks`.
pub fn silhouette_curve(a: ArrayView2<f64>, b: ArrayView2<f64>, ks: &[usize], seed: u64) -> Result<Vec<SilhouettePoint>> {
    if a.nrows() != b.nrows() {
        return Err(Error::domain(format!("{} vs {} embeddings", a.nrows(), b.nrows())));
    }
    ks.iter()
        .map(|&k| {
            let sa = silhouette(a, &kmeans(a, k, seed)?.labels)?;
            let sb = silhouette(b, &kmeans(b, k, seed)?.labels)?;
            Ok(SilhouettePoint { k, a: sa, b: sb })
        })
        .collect()
}

/// Tab-separated `k, a, b` rows with a header, ready for plotting.
pub fn curve_table(points: &[SilhouettePoint], label_a: &str, label_b: &str) -> String {
    let mut out = format!("k\t{label_a}\t{label_b}\n");
    for p in points {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", p.k, p.a, p.b));
    }
    out
}
