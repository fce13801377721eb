//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the library code it checks.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use xview::geodata::pixel_to_latlon;
use xview::{BBox, RegionSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn unit_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((k, d));
    for i in 0..k {
        m.row_mut(i).assign(&unit_vector(rng, d));
    }
    m
}

/// Loss as a literal double loop: for every query row, the negative log of
/// its positive's share of the exponentiated scores over batch and queue.
pub fn naive_info_nce(s: &Array2<f64>, g: &Array2<f64>, q: &[Array1<f64>], tau: f64) -> f64 {
    let k = s.nrows();
    let mut total = 0.0;
    for i in 0..k {
        let mut denom = 0.0;
        for j in 0..k {
            let mut dot = 0.0;
            for c in 0..s.ncols() {
                dot += s[(i, c)] * g[(j, c)];
            }
            denom += (dot / tau).exp();
        }
        for qv in q {
            let mut dot = 0.0;
            for c in 0..s.ncols() {
                dot += s[(i, c)] * qv[c];
            }
            denom += (dot / tau).exp();
        }
        let mut pos = 0.0;
        for c in 0..s.ncols() {
            pos += s[(i, c)] * g[(i, c)];
        }
        total += -((pos / tau).exp() / denom).ln();
    }
    total / k as f64
}

/// Rank of each query's match found by sorting its row, placing tied
/// competitors ahead of the match.
pub fn rank_oracle(sim: &Array2<f64>) -> Vec<usize> {
    (0..sim.nrows())
        .map(|i| {
            let mut idx: Vec<usize> = (0..sim.ncols()).collect();
            idx.sort_by(|&a, &b| {
                sim[(i, b)]
                    .partial_cmp(&sim[(i, a)])
                    .unwrap()
                    .then_with(|| (a == i).cmp(&(b == i)))
            });
            idx.iter().position(|&j| j == i).unwrap() + 1
        })
        .collect()
}

pub fn recall_oracle(sim: &Array2<f64>, k: usize) -> f64 {
    let r = rank_oracle(sim);
    r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64
}

pub fn median_oracle(sim: &Array2<f64>) -> f64 {
    let mut r: Vec<f64> = rank_oracle(sim).into_iter().map(|x| x as f64).collect();
    r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2]
    } else {
        (r[n / 2 - 1] + r[n / 2]) / 2.0
    }
}

/// Silhouette by its textbook definition with explicit distance sums.
pub fn silhouette_oracle(x: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = x.nrows();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..x.ncols() {
            let d = x[(i, c)] - x[(j, c)];
            s += d * d;
        }
        s.sqrt()
    };
    let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            let m = members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64;
            b = b.min(m);
        }
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Standard spherical web-mercator forward projection.
pub fn mercator_oracle(lat: f64, lon: f64, zoom: i32) -> (f64, f64) {
    let w = 256.0 * 2f64.powi(zoom);
    let phi = lat.to_radians();
    let x = (lon + 180.0) / 360.0 * w;
    let y = (0.5 - (std::f64::consts::FRAC_PI_4 + phi / 2.0).tan().ln() / (2.0 * std::f64::consts::PI)) * w;
    (x, y)
}

/// Region exactly `rows x cols` tiles of 256 px whose north-west corner sits
/// at world pixel `(x0, y0)`.
pub fn tile_aligned_spec(x0: f64, y0: f64, rows: usize, cols: usize, zoom: i32) -> RegionSpec {
    let nw = pixel_to_latlon(x0, y0, zoom).unwrap();
    let se = pixel_to_latlon(x0 + 256.0 * cols as f64, y0 + 256.0 * rows as f64, zoom).unwrap();
    RegionSpec::new(
        BBox {
            min_lat: se.lat(),
            min_lon: nw.lon(),
            max_lat: nw.lat(),
            max_lon: se.lon(),
        },
        zoom,
        256,
    )
    .unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
