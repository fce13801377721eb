use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Overhead2Ground,
    Ground2Overhead,
}

/// 1-based rank of the true match for every query (row `i`, true match in
/// column `i`). Ties count against the query: the rank is one plus the
/// number of other gallery items scoring at least as high as the match.
pub fn ranks(sim: ArrayView2<f64>) -> Result<Vec<usize>> {
    check_shape(sim)?;
    Ok((0..sim.nrows())
        .into_par_iter()
        .map(|i| {
            let row = sim.row(i);
            let own = row[i];
            1 + row.iter().enumerate().filter(|&(j, &v)| j != i && v >= own).count()
        })
        .collect())
}

/// Queries are paired with the first `nrows` gallery items; any further
/// columns are distractors.
fn check_shape(sim: ArrayView2<f64>) -> Result<()> {
    if sim.nrows() == 0 || sim.nrows() > sim.ncols() {
        return Err(Error::domain(format!(
            "similarity matrix needs 1 <= queries <= gallery, got {:?}",
            sim.dim()
        )));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite similarity".into()));
    }
    Ok(())
}

pub fn recall_at_k(sim: ArrayView2<f64>, k: usize) -> Result<f64> {
    if k == 0 || k > sim.ncols() {
        return Err(Error::domain(format!("k = {k} outside 1..={}", sim.ncols())));
    }
    let r = ranks(sim)?;
    Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

/// Median of the per-query ranks; the mean of the two central ranks when the
/// count is even.
pub fn median_rank(sim: ArrayView2<f64>) -> Result<f64> {
    let mut r = ranks(sim)?;
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    #[serde(rename = "R@5")]
    pub r_at_5: f64,
    #[serde(rename = "R@10")]
    pub r_at_10: f64,
    #[serde(rename = "Median-R")]
    pub median_rank: f64,
    pub n: usize,
}

/// Cosine similarity of every overhead embedding against every ground
/// embedding (rows: overhead).
pub fn similarity_matrix(overhead: &[Embedding], ground: &[Embedding]) -> Result<Array2<f64>> {
    let d = overhead.first().map_or(0, Embedding::dim);
    if overhead.iter().chain(ground).any(|e| e.dim() != d) {
        return Err(Error::domain("embeddings of differing dimension"));
    }
    let to_mat = |embs: &[Embedding]| {
        Array2::from_shape_fn((embs.len(), d), |(i, j)| embs[i].values()[j] / embs[i].norm())
    };
    Ok(to_mat(overhead).dot(&to_mat(ground).t()))
}

/// R@5, R@10 (capped at the gallery size) and median rank in one direction.
pub fn cross_view_report(overhead: &[Embedding], ground: &[Embedding], direction: Direction) -> Result<RetrievalReport> {
    if overhead.len() != ground.len() {
        return Err(Error::domain(format!(
            "{} overhead vs {} ground embeddings",
            overhead.len(),
            ground.len()
        )));
    }
    if overhead.is_empty() {
        return Err(Error::domain("no embeddings to evaluate"));
    }
    let mut sim = similarity_matrix(overhead, ground)?;
    if direction == Direction::Ground2Overhead {
        sim = sim.t().to_owned();
    }
    let n = sim.nrows();
    Ok(RetrievalReport {
        direction,
        r_at_5: recall_at_k(sim.view(), 5.min(n))?,
        r_at_10: recall_at_k(sim.view(), 10.min(n))?,
        median_rank: median_rank(sim.view())?,
        n,
    })
}

/// Ablation switches under which a report was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub meta_training: bool,
    pub dropout: bool,
    pub meta_inference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: RetrievalReport,
}

/// Plain-text table with columns Meta/Training, Dropout, Meta/Inference,
/// R@5, R@10, Median-R.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let header = ["Direction", "Meta/Training", "Dropout", "Meta/Inference", "R@5", "R@10", "Median-R"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                format!("{:?}", r.report.direction),
                mark(r.ablation.meta_training).into(),
                mark(r.ablation.dropout).into(),
                mark(r.ablation.meta_inference).into(),
                format!("{:.3}", r.report.r_at_5),
                format!("{:.3}", r.report.r_at_10),
                format!("{}", r.report.median_rank),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[&str]| {
        cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 4 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for row in &body {
        out.push('\n');
        out.push_str(&line(&row.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out.push('\n');
    out
}
