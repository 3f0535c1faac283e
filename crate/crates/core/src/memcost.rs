//! Closed-form memory model for full and reduced cross-entropy.
//!
//! Counts are in elements (logits held at once), not bytes; multiply by the
//! element size for a byte figure. `m` is the number of valid rows, i.e.
//! batch size times sequence length minus padding.

use crate::error::{Error, Result};
use crate::loss::{LossResult, ReceParams};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEstimate {
    /// Exact number of negative logits the reduced loss computes, accounting
    /// for sentinel padding and clamped boundary chunks.
    pub logit_elements_rece: usize,
    /// Interior-chunk count `r * m * (1 + 2 n_ec) * ceil(C / n_c)`; an upper
    /// bound on `logit_elements_rece`.
    pub logit_elements_rece_interior: usize,
    /// `m * C`.
    pub logit_elements_full: usize,
    /// Bucket score matrices for both sides, `r * n_b * (m + C)`.
    pub bucketing_elements: usize,
    /// `2 r sqrt(alpha_bc (1 + 2 n_ec) min(C, m)) max(C, m)`.
    pub peak_model: f64,
    /// `logit_elements_full / peak_model`.
    pub reduction_factor: f64,
    pub n_b_star: usize,
}

fn check(alpha_bc: f64, c: usize, m: usize) -> Result<()> {
    if !(alpha_bc > 0.0 && alpha_bc.is_finite()) {
        return Err(Error::invalid("alpha_bc", "must be positive and finite"));
    }
    if c == 0 || m == 0 {
        return Err(Error::invalid("C, m", "catalog and row counts must be at least 1"));
    }
    Ok(())
}

/// Bucket count minimising peak memory,
/// `sqrt(4 alpha_bc (1 + 2 n_ec) min(C, m))`, rounded to the nearest integer
/// and at least 1.
pub fn optimal_n_b(alpha_bc: f64, n_ec: usize, c: usize, m: usize) -> Result<usize> {
    check(alpha_bc, c, m)?;
    let v = (4.0 * alpha_bc * (1 + 2 * n_ec) as f64 * c.min(m) as f64).sqrt();
    Ok((v.round() as usize).max(1))
}

/// Peak logit elements of the reduced loss, closed form.
pub fn peak_model(rounds: usize, alpha_bc: f64, n_ec: usize, c: usize, m: usize) -> f64 {
    2.0 * rounds as f64
        * (alpha_bc * (1 + 2 * n_ec) as f64 * c.min(m) as f64).sqrt()
        * c.max(m) as f64
}

/// `sqrt(min(C, m)) / (2 r sqrt(alpha_bc (1 + 2 n_ec)))`.
pub fn reduction_factor_formula(rounds: usize, alpha_bc: f64, n_ec: usize, c: usize, m: usize) -> f64 {
    (c.min(m) as f64).sqrt() / (2.0 * rounds as f64 * (alpha_bc * (1 + 2 * n_ec) as f64).sqrt())
}

/// Real items in chunk `c` when `n` items are cut into `n_c` chunks of
/// `ceil(n / n_c)` slots.
fn chunk_len(n: usize, n_c: usize, c: usize) -> usize {
    let size = n.div_ceil(n_c);
    n.saturating_sub(c * size).min(size)
}

/// Exact negative-logit count with sentinel padding and clamped neighbours.
pub fn exact_logit_count(m: usize, c: usize, n_c: usize, n_ec: usize, rounds: usize) -> usize {
    if n_c == 0 {
        return 0;
    }
    let per_round: usize = (0..n_c)
        .map(|k| {
            let lo = k.saturating_sub(n_ec);
            let hi = (k + n_ec).min(n_c - 1);
            let items: usize = (lo..=hi).map(|j| chunk_len(c, n_c, j)).sum();
            chunk_len(m, n_c, k) * items
        })
        .sum();
    rounds * per_round
}

pub fn interior_logit_count(m: usize, c: usize, n_c: usize, n_ec: usize, rounds: usize) -> usize {
    rounds * m * (1 + 2 * n_ec) * c.div_ceil(n_c)
}

pub fn peak_elements(params: &ReceParams, c: usize, m: usize) -> Result<MemoryEstimate> {
    params.validate()?;
    let alpha = params.alpha_bc();
    check(alpha, c, m)?;
    let full = m * c;
    let peak = peak_model(params.rounds, alpha, params.n_ec, c, m);
    Ok(MemoryEstimate {
        logit_elements_rece: exact_logit_count(m, c, params.n_c, params.n_ec, params.rounds),
        logit_elements_rece_interior: interior_logit_count(m, c, params.n_c, params.n_ec, params.rounds),
        logit_elements_full: full,
        bucketing_elements: params.rounds * params.n_b * (m + c),
        peak_model: peak,
        reduction_factor: full as f64 / peak,
        n_b_star: optimal_n_b(alpha, params.n_ec, c, m)?,
    })
}

/// Logit count recorded by the loss kernel.
pub fn instrumented_count(result: &LossResult) -> usize {
    result.computed_logits
}
