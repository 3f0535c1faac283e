//! Cross-entropy family losses with analytic gradients.
//!
//! All losses take encoder outputs `X` (`m × d`), the item table `Y`
//! (`C × d`), one zero-based target per row and a validity mask. Masked rows
//! contribute neither loss nor gradient, and the loss is averaged over valid
//! rows only.
//!
//! The per-logit gradient of every softmax-based loss here is
//! `p - 1[k = target]`, which lies strictly inside `(-1, 1)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::partition::{self, ChunkPlan, PairCountTable, RoundSeeding};

/// Hyper-parameters of the reduced cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceParams {
    /// Number of random bucket vectors.
    pub n_b: usize,
    /// Chunks per round.
    pub n_c: usize,
    /// Neighbouring chunks scored on each side.
    pub n_ec: usize,
    /// Independent bucketing rounds.
    pub rounds: usize,
    pub seed: u64,
    /// Drop the target column from the negative blocks so the positive logit
    /// is only counted once.
    pub mask_positives_in_negatives: bool,
    pub round_seeding: RoundSeeding,
}

impl Default for ReceParams {
    fn default() -> Self {
        Self {
            n_b: 16,
            n_c: 16,
            n_ec: 1,
            rounds: 1,
            seed: 0,
            mask_positives_in_negatives: true,
            round_seeding: RoundSeeding::Distinct,
        }
    }
}

impl ReceParams {
    pub fn alpha_bc(&self) -> f64 {
        self.n_b as f64 / self.n_c as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_b == 0 {
            return Err(Error::invalid("n_b", "must be at least 1"));
        }
        if self.n_c == 0 {
            return Err(Error::invalid("n_c", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be at least 1"));
        }
        Ok(())
    }
}

/// Loss selector used by the trainer and the CLI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Full softmax over the catalog.
    Ce,
    /// Binary cross-entropy with `negatives` uniform negatives per row.
    BcePlus { negatives: usize },
    /// Softmax over the target and `negatives` uniform negatives.
    CeSampled { negatives: usize },
    Rece(ReceParams),
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::BcePlus { .. } => "bce+",
            LossKind::CeSampled { .. } => "ce-",
            LossKind::Rece(_) => "rece",
        }
    }
}

/// Gradient rows for a subset of `Y`, sorted by row index.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad {
    pub rows: Vec<usize>,
    pub values: Array2<f64>,
}

impl RowGrad {
    fn from_dense(dense: Array2<f64>, touched: &[bool]) -> Self {
        let rows: Vec<usize> = (0..touched.len()).filter(|&j| touched[j]).collect();
        if rows.len() == dense.nrows() {
            return Self { rows, values: dense };
        }
        let values = dense.select(Axis(0), &rows);
        Self { rows, values }
    }

    pub fn get(&self, row: usize) -> Option<ArrayView1<'_, f64>> {
        self.rows
            .binary_search(&row)
            .ok()
            .map(|i| self.values.row(i))
    }

    pub fn to_dense(&self, n_rows: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n_rows, self.values.ncols()));
        self.add_to(out.view_mut(), 1.0);
        out
    }

    /// `target[rows] += scale * values`.
    pub fn add_to(&self, mut target: ArrayViewMut2<'_, f64>, scale: f64) {
        for (i, &row) in self.rows.iter().enumerate() {
            target
                .row_mut(row)
                .scaled_add(scale, &self.values.row(i));
        }
    }
}

/// A block of negative logits between one chunk of rows and its gathered
/// neighbour items.
#[derive(Debug, Clone)]
pub struct LogitBlock {
    pub values: Array2<f64>,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
    pub round_id: u64,
}

#[derive(Debug, Clone)]
pub struct LossResult {
    /// Mean over valid rows.
    pub loss: f64,
    /// Per-row loss; 0 for masked rows.
    pub row_losses: Vec<f64>,
    pub grad_x: Array2<f64>,
    pub grad_y: RowGrad,
    /// Negative-side logits evaluated (plus the positive for sampled losses).
    pub computed_logits: usize,
    /// Largest raw negative logit seen per row (`-inf` when none).
    pub hard_negative_max: Option<Vec<f64>>,
    /// Rows left with no negatives after target masking.
    pub empty_negative_rows: usize,
}

/// Uniform negatives per row, drawn without replacement from the catalog
/// minus that row's target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    ids: Array2<usize>,
}

impl Negatives {
    pub fn sample<R: Rng + ?Sized>(
        targets: &[usize],
        valid_mask: &[bool],
        catalog: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("negatives", "must be at least 1"));
        }
        if n >= catalog {
            return Err(Error::TooManyNegatives {
                requested: n,
                catalog,
            });
        }
        let mut ids = Array2::zeros((targets.len(), n));
        for (i, (&t, &valid)) in targets.iter().zip(valid_mask).enumerate() {
            if !valid {
                continue;
            }
            let draw = rand::seq::index::sample(rng, catalog - 1, n);
            for (k, j) in draw.into_iter().enumerate() {
                ids[[i, k]] = if j >= t { j + 1 } else { j };
            }
        }
        Ok(Self { ids })
    }

    pub fn from_ids(ids: Array2<usize>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> ArrayView2<'_, usize> {
        self.ids.view()
    }

    pub fn per_row(&self) -> usize {
        self.ids.ncols()
    }
}

/// Shape/target checks shared by all losses; returns the valid row ids.
fn check_inputs(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
) -> Result<Vec<usize>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            context: "loss (Y dim vs X dim)",
            expected: x.ncols(),
            actual: y.ncols(),
        });
    }
    if targets.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "loss (targets vs X rows)",
            expected: x.nrows(),
            actual: targets.len(),
        });
    }
    if valid_mask.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "loss (valid mask vs X rows)",
            expected: x.nrows(),
            actual: valid_mask.len(),
        });
    }
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| valid_mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::NoValidRows);
    }
    for &i in &rows {
        if targets[i] >= y.nrows() {
            return Err(Error::TargetOutOfRange {
                row: i,
                target: targets[i],
                catalog: y.nrows(),
            });
        }
    }
    Ok(rows)
}

fn check_negatives(negatives: &Negatives, targets: &[usize], catalog: usize) -> Result<()> {
    if negatives.per_row() >= catalog {
        return Err(Error::TooManyNegatives {
            requested: negatives.per_row(),
            catalog,
        });
    }
    if negatives.ids.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "loss (negatives rows vs X rows)",
            expected: targets.len(),
            actual: negatives.ids.nrows(),
        });
    }
    Ok(())
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Shifted log-sum-exp; `-inf` entries are ignored.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

/// Full softmax cross-entropy over the whole catalog.
pub fn ce_full(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
) -> Result<LossResult> {
    let rows = check_inputs(x, y, targets, valid_mask)?;
    let scale = 1.0 / rows.len() as f64;
    let xv = x.select(Axis(0), &rows);
    let mut g = xv.dot(&y.t());

    let mut row_losses = vec![0.0; x.nrows()];
    let mut hard = vec![f64::NEG_INFINITY; x.nrows()];
    let mut total = 0.0;
    for (k, &i) in rows.iter().enumerate() {
        let mut logits = g.row_mut(k);
        let t = targets[i];
        hard[i] = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != t)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = log_sum_exp(logits.iter().copied());
        let loss = lse - logits[t];
        row_losses[i] = loss;
        total += loss;
        logits.mapv_inplace(|v| (v - lse).exp() * scale);
        logits[t] -= scale;
    }

    let mut grad_x = Array2::zeros(x.raw_dim());
    let gx = g.dot(&y);
    for (k, &i) in rows.iter().enumerate() {
        grad_x.row_mut(i).assign(&gx.row(k));
    }
    let gy = g.t().dot(&xv);

    Ok(LossResult {
        loss: total * scale,
        row_losses,
        grad_x,
        grad_y: RowGrad::from_dense(gy, &vec![true; y.nrows()]),
        computed_logits: rows.len() * y.nrows(),
        hard_negative_max: Some(hard),
        empty_negative_rows: if y.nrows() == 1 { rows.len() } else { 0 },
    })
}

struct SparseAccumulator {
    grad_x: Array2<f64>,
    grad_y: Array2<f64>,
    touched: Vec<bool>,
}

impl SparseAccumulator {
    fn new(m: usize, c: usize, d: usize) -> Self {
        Self {
            grad_x: Array2::zeros((m, d)),
            grad_y: Array2::zeros((c, d)),
            touched: vec![false; c],
        }
    }

    /// Adds `g * d(logit)/d(x_i, y_j)` for `logit = x_i . y_j`.
    fn add(&mut self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, i: usize, j: usize, g: f64) {
        self.grad_x.row_mut(i).scaled_add(g, &y.row(j));
        self.grad_y.row_mut(j).scaled_add(g, &x.row(i));
        self.touched[j] = true;
    }

    fn finish(self) -> (Array2<f64>, RowGrad) {
        (self.grad_x, RowGrad::from_dense(self.grad_y, &self.touched))
    }
}

/// Binary cross-entropy with one positive and `n` sampled negatives per row.
pub fn bce_plus(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    negatives: &Negatives,
    valid_mask: &[bool],
) -> Result<LossResult> {
    let rows = check_inputs(x, y, targets, valid_mask)?;
    check_negatives(negatives, targets, y.nrows())?;
    let scale = 1.0 / rows.len() as f64;
    let mut acc = SparseAccumulator::new(x.nrows(), y.nrows(), x.ncols());
    let mut row_losses = vec![0.0; x.nrows()];
    let mut hard = vec![f64::NEG_INFINITY; x.nrows()];
    let mut total = 0.0;

    for &i in &rows {
        let t = targets[i];
        let pos = dot(x.row(i), y.row(t));
        let mut loss = softplus(-pos);
        acc.add(x, y, i, t, (sigmoid(pos) - 1.0) * scale);
        for &j in negatives.ids.row(i) {
            let l = dot(x.row(i), y.row(j));
            hard[i] = hard[i].max(l);
            loss += softplus(l);
            acc.add(x, y, i, j, sigmoid(l) * scale);
        }
        row_losses[i] = loss;
        total += loss;
    }

    let (grad_x, grad_y) = acc.finish();
    Ok(LossResult {
        loss: total * scale,
        row_losses,
        grad_x,
        grad_y,
        computed_logits: rows.len() * (negatives.per_row() + 1),
        hard_negative_max: Some(hard),
        empty_negative_rows: 0,
    })
}

/// Softmax cross-entropy over the target and `n` sampled negatives.
pub fn ce_sampled(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    negatives: &Negatives,
    valid_mask: &[bool],
) -> Result<LossResult> {
    let rows = check_inputs(x, y, targets, valid_mask)?;
    check_negatives(negatives, targets, y.nrows())?;
    let scale = 1.0 / rows.len() as f64;
    let n = negatives.per_row();
    let mut acc = SparseAccumulator::new(x.nrows(), y.nrows(), x.ncols());
    let mut row_losses = vec![0.0; x.nrows()];
    let mut hard = vec![f64::NEG_INFINITY; x.nrows()];
    let mut total = 0.0;
    let mut logits = vec![0.0; n + 1];

    for &i in &rows {
        let t = targets[i];
        let neg = negatives.ids.row(i);
        logits[0] = dot(x.row(i), y.row(t));
        for (k, &j) in neg.iter().enumerate() {
            logits[k + 1] = dot(x.row(i), y.row(j));
            hard[i] = hard[i].max(logits[k + 1]);
        }
        let lse = log_sum_exp(logits.iter().copied());
        let loss = lse - logits[0];
        row_losses[i] = loss;
        total += loss;

        acc.add(x, y, i, t, ((logits[0] - lse).exp() - 1.0) * scale);
        for (k, &j) in neg.iter().enumerate() {
            acc.add(x, y, i, j, (logits[k + 1] - lse).exp() * scale);
        }
    }

    let (grad_x, grad_y) = acc.finish();
    Ok(LossResult {
        loss: total * scale,
        row_losses,
        grad_x,
        grad_y,
        computed_logits: rows.len() * (n + 1),
        hard_negative_max: Some(hard),
        empty_negative_rows: 0,
    })
}

/// Reduced cross-entropy: plans buckets and chunks from `params`, then
/// evaluates the loss over the plan.
pub fn rece(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    params: &ReceParams,
    valid_mask: &[bool],
) -> Result<LossResult> {
    check_inputs(x, y, targets, valid_mask)?;
    let (plan, counts) = partition::build_multi_round_plan(x, y, valid_mask, params)?;
    rece_with_plan(
        x,
        y,
        targets,
        valid_mask,
        &plan,
        &counts,
        params.mask_positives_in_negatives,
    )
}

/// Negative logit blocks of a plan, with target masking and the
/// `- ln(count)` duplicate correction already applied.
pub fn logit_blocks(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    plan: &ChunkPlan,
    counts: &PairCountTable,
    mask_positives: bool,
) -> Vec<LogitBlock> {
    let correct = counts.max_count() > 1;
    let mut blocks = Vec::with_capacity(plan.rounds.len() * plan.n_c);
    for round in &plan.rounds {
        for c in 0..plan.n_c {
            let rows = round.chunk_x(c);
            let cols = round.neighbor_items(c, plan.n_ec);
            if rows.is_empty() || cols.is_empty() {
                continue;
            }
            let mut values = x.select(Axis(0), rows).dot(&y.select(Axis(0), cols).t());
            for (a, &row) in rows.iter().enumerate() {
                for (b, &item) in cols.iter().enumerate() {
                    if mask_positives && item == targets[row] {
                        values[[a, b]] = f64::NEG_INFINITY;
                    } else if correct {
                        values[[a, b]] -= f64::from(counts.get(row, item)).ln();
                    }
                }
            }
            blocks.push(LogitBlock {
                values,
                row_ids: rows.to_vec(),
                col_ids: cols.to_vec(),
                round_id: round.round_id,
            });
        }
    }
    blocks
}

/// Reduced cross-entropy over an explicit plan.
///
/// For each valid row the denominator is the positive term plus every
/// planned negative `exp(logit - ln m)`, where `m` is the number of times
/// the pair occurs across rounds. The positive logit is evaluated once per
/// row regardless of the round count.
pub fn rece_with_plan(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
    plan: &ChunkPlan,
    counts: &PairCountTable,
    mask_positives: bool,
) -> Result<LossResult> {
    let rows = check_inputs(x, y, targets, valid_mask)?;
    let m = x.nrows();
    let scale = 1.0 / rows.len() as f64;

    let mut blocks = logit_blocks(x, y, targets, plan, counts, mask_positives);
    let computed_logits: usize = blocks.iter().map(|b| b.values.len()).sum();

    let positive: Vec<f64> = (0..m)
        .map(|i| {
            if valid_mask[i] {
                dot(x.row(i), y.row(targets[i]))
            } else {
                0.0
            }
        })
        .collect();

    // Row-wise shifted log-sum-exp over the positive and all block entries.
    let mut row_max = positive.clone();
    let mut hard = vec![f64::NEG_INFINITY; m];
    for block in &blocks {
        for (a, &row) in block.row_ids.iter().enumerate() {
            for &v in block.values.row(a) {
                row_max[row] = row_max[row].max(v);
                hard[row] = hard[row].max(v);
            }
        }
    }
    let mut row_sum: Vec<f64> = (0..m).map(|i| (positive[i] - row_max[i]).exp()).collect();
    for block in &blocks {
        for (a, &row) in block.row_ids.iter().enumerate() {
            let shift = row_max[row];
            row_sum[row] += block.values.row(a).iter().map(|&v| (v - shift).exp()).sum::<f64>();
        }
    }
    let lse: Vec<f64> = (0..m).map(|i| row_max[i] + row_sum[i].ln()).collect();

    let mut row_losses = vec![0.0; m];
    let mut total = 0.0;
    let mut empty = 0;
    for &i in &rows {
        row_losses[i] = lse[i] - positive[i];
        total += row_losses[i];
        if hard[i] == f64::NEG_INFINITY {
            empty += 1;
        }
    }

    let mut grad_x = Array2::<f64>::zeros(x.raw_dim());
    let mut grad_y = Array2::<f64>::zeros(y.raw_dim());
    let mut touched = vec![false; y.nrows()];
    for block in &mut blocks {
        for (a, &row) in block.row_ids.iter().enumerate() {
            let shift = lse[row];
            block
                .values
                .row_mut(a)
                .mapv_inplace(|v| (v - shift).exp() * scale);
        }
        let xc = x.select(Axis(0), &block.row_ids);
        let yc = y.select(Axis(0), &block.col_ids);
        let gx = block.values.dot(&yc);
        let gy = block.values.t().dot(&xc);
        for (a, &row) in block.row_ids.iter().enumerate() {
            grad_x.row_mut(row).scaled_add(1.0, &gx.row(a));
        }
        for (b, &item) in block.col_ids.iter().enumerate() {
            grad_y.row_mut(item).scaled_add(1.0, &gy.row(b));
            touched[item] = true;
        }
    }
    for &i in &rows {
        let t = targets[i];
        let g = ((positive[i] - lse[i]).exp() - 1.0) * scale;
        grad_x.row_mut(i).scaled_add(g, &y.row(t));
        grad_y.row_mut(t).scaled_add(g, &x.row(i));
        touched[t] = true;
    }

    Ok(LossResult {
        loss: total * scale,
        row_losses,
        grad_x,
        grad_y: RowGrad::from_dense(grad_y, &touched),
        computed_logits,
        hard_negative_max: Some(hard),
        empty_negative_rows: empty,
    })
}

/// Positive logits `x_i . y_{target_i}` for valid rows, 0 elsewhere.
pub fn positive_logits(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
) -> Array1<f64> {
    Array1::from_iter((0..x.nrows()).map(|i| {
        if valid_mask[i] {
            dot(x.row(i), y.row(targets[i]))
        } else {
            0.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64, sd: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || {
            sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    }

    fn random_targets(m: usize, c: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| rng.random_range(0..c)).collect()
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(f64::abs).sum();
        let norm = a.mapv(f64::abs).sum().max(b.mapv(f64::abs).sum()).max(1e-12);
        diff / norm
    }

    #[test]
    fn single_class_has_zero_loss() {
        let x = random(3, 4, 1, 1.0);
        let y = random(1, 4, 2, 1.0);
        let r = ce_full(x.view(), y.view(), &[0, 0, 0], &[true; 3]).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn orthogonal_rows_give_uniform_softmax() {
        let x = array![[1.0, 0.0]];
        let y = Array2::from_shape_fn((8, 2), |(_, k)| if k == 1 { 1.0 } else { 0.0 });
        let r = ce_full(x.view(), y.view(), &[3], &[true]).unwrap();
        assert!((r.loss - 8f64.ln()).abs() < 1e-15);
        assert!((r.loss - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn target_out_of_range_names_row_and_value() {
        let x = random(2, 3, 1, 1.0);
        let y = random(4, 3, 2, 1.0);
        let err = ce_full(x.view(), y.view(), &[0, 9], &[true, true]).unwrap_err();
        assert!(matches!(err, Error::TargetOutOfRange { row: 1, target: 9, catalog: 4 }));
        // masked rows are not checked
        assert!(ce_full(x.view(), y.view(), &[0, 9], &[true, false]).is_ok());
    }

    #[test]
    fn ce_full_matches_scalar_reference_and_finite_differences() {
        let x = random(4, 8, 3, 0.7);
        let y = random(16, 8, 4, 0.7);
        let t = random_targets(4, 16, 5);
        let mask = [true; 4];
        let r = ce_full(x.view(), y.view(), &t, &mask).unwrap();
        let (loss, per_row) = oracle::exact_ce(x.view(), y.view(), &t, &mask).unwrap();
        assert!((r.loss - loss).abs() < 1e-12);
        for (a, b) in r.row_losses.iter().zip(&per_row) {
            assert!((a - b).abs() < 1e-12);
        }
        let (fx, fy) = oracle::finite_diff_grad(
            |x, y| ce_full(x, y, &t, &mask).unwrap().loss,
            x.view(),
            y.view(),
            1e-5,
        );
        assert!(rel_err(&r.grad_x, &fx) < 1e-4);
        assert!(rel_err(&r.grad_y.to_dense(16), &fy) < 1e-4);
    }

    #[test]
    fn ce_full_row_gradient_sums_to_zero_and_stays_in_range() {
        let x = random(5, 6, 8, 2.0);
        let y = random(12, 6, 9, 2.0);
        let t = random_targets(5, 12, 10);
        let mask = [true; 5];
        let logits = oracle::exact_logits(x.view(), y.view()).unwrap();
        for i in 0..5 {
            let lse = log_sum_exp(logits.row(i).iter().copied());
            let g: Vec<f64> = (0..12)
                .map(|j| (logits[[i, j]] - lse).exp() - if j == t[i] { 1.0 } else { 0.0 })
                .collect();
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
            assert!(g.iter().all(|&v| v > -1.0 && v < 1.0));
        }
        // the analytic path applies the same per-logit gradient
        let r = ce_full(x.view(), y.view(), &t, &mask).unwrap();
        assert!(r.loss.is_finite());
    }

    #[test]
    fn large_logits_stay_finite() {
        let x = array![[80.0], [-80.0]];
        let y = array![[1.0], [-1.0], [0.5]];
        let r = ce_full(x.view(), y.view(), &[1, 0], &[true, true]).unwrap();
        assert!(r.loss.is_finite() && r.grad_x.iter().all(|v| v.is_finite()));
        let p = ReceParams { n_b: 1, n_c: 1, n_ec: 0, ..Default::default() };
        let r = rece(x.view(), y.view(), &[1, 0], &p, &[true, true]).unwrap();
        assert!(r.loss.is_finite() && r.grad_x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bce_plus_half_sigmoid_case() {
        let x = array![[0.0, 0.0]];
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let neg = Negatives::from_ids(array![[1]]);
        let r = bce_plus(x.view(), y.view(), &[0], &neg, &[true]).unwrap();
        assert!((r.loss - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_plus_saturates() {
        let x = array![[30.0]];
        let y = array![[1.0], [-1.0]];
        let neg = Negatives::from_ids(array![[1]]);
        let r = bce_plus(x.view(), y.view(), &[0], &neg, &[true]).unwrap();
        assert!(r.loss < 1e-12);
    }

    #[test]
    fn too_many_negatives_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Negatives::sample(&[0], &[true], 4, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::TooManyNegatives { requested: 4, catalog: 4 }));
    }

    #[test]
    fn sampled_negatives_exclude_target_without_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_targets(50, 20, 2);
        let neg = Negatives::sample(&t, &[true; 50], 20, 7, &mut rng).unwrap();
        for (i, row) in neg.ids().outer_iter().enumerate() {
            let mut v = row.to_vec();
            assert!(!v.contains(&t[i]));
            assert!(v.iter().all(|&j| j < 20));
            v.sort_unstable();
            v.dedup();
            assert_eq!(v.len(), 7);
        }
    }

    fn sampled_reference(
        x: &Array2<f64>,
        y: &Array2<f64>,
        t: &[usize],
        neg: &Negatives,
        bce: bool,
    ) -> f64 {
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let logit = |j: usize| (0..x.ncols()).map(|k| x[[i, k]] * y[[j, k]]).sum::<f64>();
            let pos = logit(t[i]);
            if bce {
                total -= (1.0 / (1.0 + (-pos).exp())).ln();
                for &j in neg.ids().row(i) {
                    total -= (1.0 - 1.0 / (1.0 + (-logit(j)).exp())).ln();
                }
            } else {
                let denom: f64 = pos.exp() + neg.ids().row(i).iter().map(|&j| logit(j).exp()).sum::<f64>();
                total -= (pos.exp() / denom).ln();
            }
        }
        total / x.nrows() as f64
    }

    #[test]
    fn sampled_losses_match_scalar_reference_and_finite_differences() {
        let x = random(8, 6, 21, 0.6);
        let y = random(32, 6, 22, 0.6);
        let t = random_targets(8, 32, 23);
        let mask = [true; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let neg = Negatives::sample(&t, &mask, 32, 4, &mut rng).unwrap();
        for bce in [true, false] {
            let f = |x: ArrayView2<f64>, y: ArrayView2<f64>| {
                if bce {
                    bce_plus(x, y, &t, &neg, &mask).unwrap()
                } else {
                    ce_sampled(x, y, &t, &neg, &mask).unwrap()
                }
            };
            let r = f(x.view(), y.view());
            assert!((r.loss - sampled_reference(&x, &y, &t, &neg, bce)).abs() < 1e-12);
            let (fx, fy) = oracle::finite_diff_grad(|x, y| f(x, y).loss, x.view(), y.view(), 1e-5);
            assert!(rel_err(&r.grad_x, &fx) < 1e-4);
            assert!(rel_err(&r.grad_y.to_dense(32), &fy) < 1e-4);
        }
    }

    #[test]
    fn ce_sampled_two_equal_terms() {
        let x = array![[0.0]];
        let y = array![[1.0], [2.0]];
        let r = ce_sampled(x.view(), y.view(), &[0], &Negatives::from_ids(array![[1]]), &[true]).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_sampled_with_every_negative_is_full_ce() {
        let x = random(6, 5, 31, 1.0);
        let y = random(10, 5, 32, 1.0);
        let t = random_targets(6, 10, 33);
        let mask = [true; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let neg = Negatives::sample(&t, &mask, 10, 9, &mut rng).unwrap();
        let a = ce_sampled(x.view(), y.view(), &t, &neg, &mask).unwrap();
        let b = ce_full(x.view(), y.view(), &t, &mask).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn rece_exhaustive_limit_equals_ce() {
        let x = random(32, 8, 41, 0.8);
        let y = random(64, 8, 42, 0.8);
        let t = random_targets(32, 64, 43);
        let mask = [true; 32];
        let p = ReceParams { n_b: 4, n_c: 1, n_ec: 0, rounds: 1, seed: 5, ..Default::default() };
        let a = rece(x.view(), y.view(), &t, &p, &mask).unwrap();
        let b = ce_full(x.view(), y.view(), &t, &mask).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-6);
        assert!(rel_err(&a.grad_x, &b.grad_x) < 1e-6);
        assert!(rel_err(&a.grad_y.to_dense(64), &b.grad_y.to_dense(64)) < 1e-6);
        assert_eq!(a.computed_logits, 32 * 64);
    }

    #[test]
    fn identical_rounds_reproduce_single_round_loss() {
        let x = random(32, 8, 51, 1.0);
        let y = random(64, 8, 52, 1.0);
        let t = random_targets(32, 64, 53);
        let mask = [true; 32];
        let one = ReceParams { n_b: 4, n_c: 4, n_ec: 1, rounds: 1, seed: 9, ..Default::default() };
        let two = ReceParams { rounds: 2, round_seeding: RoundSeeding::Identical, ..one };
        let a = rece(x.view(), y.view(), &t, &one, &mask).unwrap();
        let b = rece(x.view(), y.view(), &t, &two, &mask).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert_eq!(b.computed_logits, 2 * a.computed_logits);
    }

    #[test]
    fn rece_matches_pair_set_reference_and_finite_differences() {
        let (m, c) = (64, 256);
        let x = random(m, 8, 61, 0.5);
        let y = random(c, 8, 62, 0.5);
        let t = random_targets(m, c, 63);
        let mut mask = vec![true; m];
        mask[5] = false;
        mask[40] = false;
        let p = ReceParams { n_b: 8, n_c: 8, n_ec: 1, rounds: 2, seed: 64, ..Default::default() };
        let r = rece(x.view(), y.view(), &t, &p, &mask).unwrap();
        let (plan, _) = partition::build_multi_round_plan(x.view(), y.view(), &mask, &p).unwrap();
        let reference = oracle::pair_set_rece_loss(x.view(), y.view(), &t, &mask, &plan, true).unwrap();
        assert!((r.loss - reference).abs() < 1e-6);
        assert_eq!(r.row_losses[5], 0.0);
        assert!(r.grad_x.row(40).iter().all(|&v| v == 0.0));

        // Gradients against finite differences on the same (fixed) plan.
        let counts = PairCountTable::from_plan(&plan);
        let f = |x: ArrayView2<f64>, y: ArrayView2<f64>| {
            rece_with_plan(x, y, &t, &mask, &plan, &counts, true).unwrap().loss
        };
        let (fx, fy) = oracle::finite_diff_grad(f, x.view(), y.view(), 1e-5);
        assert!(rel_err(&r.grad_x, &fx) < 1e-4);
        assert!(rel_err(&r.grad_y.to_dense(c), &fy) < 1e-4);
    }

    #[test]
    fn fully_masked_negatives_give_zero_row_loss() {
        // C = 1: the only candidate is the target itself.
        let x = random(3, 2, 71, 1.0);
        let y = random(1, 2, 72, 1.0);
        let p = ReceParams { n_b: 2, n_c: 1, n_ec: 0, ..Default::default() };
        let r = rece(x.view(), y.view(), &[0, 0, 0], &p, &[true; 3]).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.empty_negative_rows, 3);
        assert!(r.grad_x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unmasked_mode_counts_the_target_twice() {
        let x = random(16, 4, 81, 1.0);
        let y = random(8, 4, 82, 1.0);
        let t = random_targets(16, 8, 83);
        let mask = [true; 16];
        let p = ReceParams { n_b: 2, n_c: 1, n_ec: 0, mask_positives_in_negatives: false, ..Default::default() };
        let r = rece(x.view(), y.view(), &t, &p, &mask).unwrap();
        let full = ce_full(x.view(), y.view(), &t, &mask).unwrap();
        assert!(r.loss > full.loss);
    }
}
