//! Unsampled top-K ranking metrics over the whole catalog.
//!
//! Every evaluation point has exactly one relevant item, so NDCG@K reduces to
//! `1 / log2(rank + 1)` for hits and HR@K to a hit indicator. Ranks are
//! 1-based; ties go to the lower item index.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EvalCase, UserSequence};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Anything that can score the full catalog for an evaluation case.
pub trait Scorer {
    fn n_items(&self) -> usize;
    fn score(&self, case: &EvalCase) -> Vec<f64>;
}

/// Items by descending `x . y_j`, excluded items removed.
pub fn rank_full_catalog(x: ArrayView1<'_, f64>, y: ArrayView2<'_, f64>, exclusions: &[u32]) -> Vec<usize> {
    let scores = y.dot(&x);
    let mut excluded = vec![false; y.nrows()];
    for &e in exclusions {
        if let Some(slot) = excluded.get_mut(e as usize) {
            *slot = true;
        }
    }
    let mut items: Vec<usize> = (0..y.nrows()).filter(|&j| !excluded[j]).collect();
    items.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    items
}

/// 1-based rank of `target` among non-excluded items; `None` when the target
/// itself is excluded.
pub fn rank_of_target(scores: &[f64], target: usize, excluded: &[bool]) -> Option<usize> {
    if excluded[target] {
        return None;
    }
    let st = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| !excluded[j] && (s > st || (s == st && j < target)))
        .count();
    Some(ahead + 1)
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ndcg: BTreeMap<usize, f64>,
    pub hr: BTreeMap<usize, f64>,
    pub n_users: usize,
}

impl MetricReport {
    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_users={}", self.n_users)?;
        for (k, v) in &self.ndcg {
            writeln!(f, "ndcg@{k}={v:.6}")?;
        }
        for (k, v) in &self.hr {
            writeln!(f, "hr@{k}={v:.6}")?;
        }
        Ok(())
    }
}

/// Mean NDCG@K and HR@K over `cases`. With `exclude_seen`, the items of each
/// case's prefix are removed from the candidates before ranking.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, cases: &[EvalCase], ks: &[usize], exclude_seen: bool) -> MetricReport {
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut ndcg: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut hr = ndcg.clone();
    let mut excluded = vec![false; scorer.n_items()];
    for case in cases {
        let scores = scorer.score(case);
        if exclude_seen {
            for &i in &case.prefix {
                excluded[i as usize] = true;
            }
        }
        if let Some(rank) = rank_of_target(&scores, case.target as usize, &excluded) {
            for &k in &ks {
                *ndcg.get_mut(&k).unwrap() += ndcg_at_k(rank, k);
                *hr.get_mut(&k).unwrap() += hr_at_k(rank, k);
            }
        }
        if exclude_seen {
            for &i in &case.prefix {
                excluded[i as usize] = false;
            }
        }
    }
    let n = cases.len().max(1) as f64;
    for v in ndcg.values_mut().chain(hr.values_mut()) {
        *v /= n;
    }
    MetricReport {
        ndcg,
        hr,
        n_users: cases.len(),
    }
}

/// Scores every item by its training frequency.
#[derive(Debug, Clone)]
pub struct PopularityRanker {
    counts: Vec<f64>,
}

impl PopularityRanker {
    pub fn fit(train: &[UserSequence], n_items: usize) -> Self {
        let mut counts = vec![0.0; n_items];
        for seq in train {
            for &i in &seq.items {
                counts[i as usize] += 1.0;
            }
        }
        Self { counts }
    }
}

impl Scorer for PopularityRanker {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, _case: &EvalCase) -> Vec<f64> {
        self.counts.clone()
    }
}

/// Independent uniform scores per user, reproducible from the seed.
#[derive(Debug, Clone)]
pub struct RandomRanker {
    pub n_items: usize,
    pub seed: u64,
}

impl Scorer for RandomRanker {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn score(&self, case: &EvalCase) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(case.user as u64);
        (0..self.n_items).map(|_| rng.random::<f64>()).collect()
    }
}
