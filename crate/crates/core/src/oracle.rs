//! Brute-force references.
//!
//! Everything here uses scalar loops over plain indexing and never calls the
//! matrix-product or chunked paths in [`crate::loss`], so it can be used to
//! check them.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::partition::ChunkPlan;

/// Largest logit matrix the oracle will materialise.
pub const DEFAULT_LOGIT_CAP: usize = 10_000_000;

fn scalar_dot(x: ArrayView2<'_, f64>, i: usize, y: ArrayView2<'_, f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..x.ncols() {
        s += x[[i, k]] * y[[j, k]];
    }
    s
}

fn check_dims(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            context: "oracle (Y dim vs X dim)",
            expected: x.ncols(),
            actual: y.ncols(),
        });
    }
    Ok(())
}

pub fn exact_logits(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    exact_logits_capped(x, y, DEFAULT_LOGIT_CAP)
}

/// Full `m × C` logit matrix by triple loop, refusing anything above `cap`
/// entries.
pub fn exact_logits_capped(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cap: usize,
) -> Result<Array2<f64>> {
    check_dims(x, y)?;
    let entries = x.nrows() * y.nrows();
    if entries > cap {
        return Err(Error::OracleCapExceeded { entries, cap });
    }
    let mut out = Array2::zeros((x.nrows(), y.nrows()));
    for i in 0..x.nrows() {
        for j in 0..y.nrows() {
            out[[i, j]] = scalar_dot(x, i, y, j);
        }
    }
    Ok(out)
}

fn scalar_lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut s = 0.0;
    for &v in values {
        s += (v - max).exp();
    }
    max + s.ln()
}

/// Full cross-entropy: mean over valid rows and the per-row values (0 for
/// masked rows).
pub fn exact_ce(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let logits = exact_logits(x, y)?;
    let mut per_row = vec![0.0; x.nrows()];
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..x.nrows() {
        if !valid_mask[i] {
            continue;
        }
        let row: Vec<f64> = logits.row(i).to_vec();
        per_row[i] = scalar_lse(&row) - row[targets[i]];
        total += per_row[i];
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidRows);
    }
    Ok((total / n as f64, per_row))
}

/// Reduced cross-entropy recomputed from the deduplicated union of a plan's
/// pairs, each negative counted exactly once.
pub fn pair_set_rece_loss(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
    plan: &ChunkPlan,
    mask_positives: bool,
) -> Result<f64> {
    Ok(pair_set_rece_row_losses(x, y, targets, valid_mask, plan, mask_positives)?.0)
}

/// Mean and per-row values of [`pair_set_rece_loss`].
pub fn pair_set_rece_row_losses(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
    plan: &ChunkPlan,
    mask_positives: bool,
) -> Result<(f64, Vec<f64>)> {
    check_dims(x, y)?;
    let mut pairs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); x.nrows()];
    for (_, row, item) in plan.pairs() {
        pairs[row].insert(item);
    }
    let mut per_row = vec![0.0; x.nrows()];
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..x.nrows() {
        if !valid_mask[i] {
            continue;
        }
        let pos = scalar_dot(x, i, y, targets[i]);
        let mut terms = vec![pos];
        for &j in &pairs[i] {
            if mask_positives && j == targets[i] {
                continue;
            }
            terms.push(scalar_dot(x, i, y, j));
        }
        per_row[i] = scalar_lse(&terms) - pos;
        total += per_row[i];
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidRows);
    }
    Ok((total / n as f64, per_row))
}

/// Exact top-`k` non-target items per row by logit, ties to the lowest
/// catalog index.
pub fn topk_hard_negatives(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    check_dims(x, y)?;
    if y.nrows() == 0 || k > y.nrows() - 1 {
        return Err(Error::invalid(
            "k",
            format!("must be at most C - 1 = {}", y.nrows().saturating_sub(1)),
        ));
    }
    let logits = exact_logits(x, y)?;
    Ok((0..x.nrows())
        .map(|i| {
            let mut items: Vec<usize> = (0..y.nrows()).filter(|&j| j != targets[i]).collect();
            items.sort_by(|&a, &b| {
                logits[[i, b]]
                    .partial_cmp(&logits[[i, a]])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            items.truncate(k);
            items
        })
        .collect())
}

/// How many of each row's true hard negatives a candidate set covers.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegativeReport {
    pub k: usize,
    /// Per valid row, in row order.
    pub recall: Vec<f64>,
    pub mean_recall: f64,
}

/// Recall of `topk` sets inside arbitrary candidate sets (sorted ascending).
pub fn candidate_recall(
    topk: &[Vec<usize>],
    candidates: &[Vec<usize>],
    valid_mask: &[bool],
    k: usize,
) -> HardNegativeReport {
    let recall: Vec<f64> = (0..topk.len())
        .filter(|&i| valid_mask[i])
        .map(|i| {
            if k == 0 {
                return 1.0;
            }
            let hits = topk[i]
                .iter()
                .filter(|j| candidates[i].binary_search(j).is_ok())
                .count();
            hits as f64 / k as f64
        })
        .collect();
    let mean_recall = if recall.is_empty() {
        0.0
    } else {
        recall.iter().sum::<f64>() / recall.len() as f64
    };
    HardNegativeReport {
        k,
        recall,
        mean_recall,
    }
}

/// Fraction of each row's exact top-`k` hard negatives that the plan scores.
pub fn plan_recall(
    plan: &ChunkPlan,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
    k: usize,
) -> Result<HardNegativeReport> {
    let topk = topk_hard_negatives(x, y, targets, k)?;
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); x.nrows()];
    for (_, row, item) in plan.pairs() {
        sets[row].push(item);
    }
    for s in &mut sets {
        s.sort_unstable();
        s.dedup();
    }
    Ok(candidate_recall(&topk, &sets, valid_mask, k))
}

/// Central-difference gradient of `f` with respect to every entry of `x`
/// and `y`.
pub fn finite_diff_grad<F>(
    f: F,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    step: f64,
) -> (Array2<f64>, Array2<f64>)
where
    F: Fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> f64,
{
    let mut xp = x.to_owned();
    let mut yp = y.to_owned();
    let mut gx = Array2::zeros(x.raw_dim());
    let mut gy = Array2::zeros(y.raw_dim());
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        xp[idx] = orig + step;
        let plus = f(xp.view(), yp.view());
        xp[idx] = orig - step;
        let minus = f(xp.view(), yp.view());
        xp[idx] = orig;
        gx[idx] = (plus - minus) / (2.0 * step);
    }
    for idx in ndarray::indices(y.raw_dim()) {
        let orig = yp[idx];
        yp[idx] = orig + step;
        let plus = f(xp.view(), yp.view());
        yp[idx] = orig - step;
        let minus = f(xp.view(), yp.view());
        yp[idx] = orig;
        gy[idx] = (plus - minus) / (2.0 * step);
    }
    (gx, gy)
}

/// Central differences of a function of a flat parameter vector.
pub fn finite_diff_vec<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let plus = f(&p);
            p[i] = orig - step;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}
