//! Bucketing, sorting and chunking of encoder outputs and catalog items.
//!
//! Every valid row of `X` and every catalog row of `Y` is keyed by the index
//! of the random vector it has the largest dot product with. Both sides are
//! stably sorted by that key and cut into `n_c` equal-size chunks; chunk `c`
//! of `X` is then scored against chunks `c - n_ec ..= c + n_ec` of `Y`.
//! Chunks past either end are dropped rather than wrapped.
//!
//! When the row count is not a multiple of `n_c`, the tail of the last chunk
//! is filled with sentinel slots. Sentinels are never materialised: chunk
//! slices simply stop at the last real row.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::loss::ReceParams;

/// `n_b` i.i.d. standard normal vectors, reproducible from `(seed, round_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBucketSet {
    vectors: Array2<f64>,
    seed: u64,
    round_id: u64,
}

impl RandomBucketSet {
    pub fn generate(n_b: usize, dim: usize, seed: u64, round_id: u64) -> Result<Self> {
        if n_b == 0 {
            return Err(Error::invalid("n_b", "must be at least 1"));
        }
        if dim == 0 {
            return Err(Error::invalid("d", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(round_id);
        let vectors = Array2::from_shape_simple_fn((n_b, dim), || StandardNormal.sample(&mut rng));
        Ok(Self {
            vectors,
            seed,
            round_id,
        })
    }

    /// Wraps explicit bucket vectors (one per row).
    pub fn from_vectors(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::invalid("B", "needs at least one non-empty row"));
        }
        Ok(Self {
            vectors,
            seed: 0,
            round_id: 0,
        })
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn n_buckets(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn round_id(&self) -> u64 {
        self.round_id
    }
}

/// Index of the bucket vector with the largest dot product for every row of
/// `v`. Ties go to the lowest bucket index.
pub fn assign_buckets(v: ArrayView2<'_, f64>, buckets: &RandomBucketSet) -> Result<Vec<usize>> {
    if v.nrows() == 0 {
        return Err(Error::invalid("V", "needs at least one row"));
    }
    if v.ncols() != buckets.dim() {
        return Err(Error::DimensionMismatch {
            context: "assign_buckets (bucket dim vs row dim)",
            expected: buckets.dim(),
            actual: v.ncols(),
        });
    }
    // scores[i, k] = <v_i, b_k>
    let scores = v.dot(&buckets.vectors.t());
    Ok(scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_score = row[0];
            for (k, &s) in row.iter().enumerate().skip(1) {
                if s > best_score {
                    best = k;
                    best_score = s;
                }
            }
            best
        })
        .collect())
}

/// How round bucket sets are drawn from the plan seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundSeeding {
    /// Round `k` uses stream `k` of the seed.
    #[default]
    Distinct,
    /// Every round reuses stream 0, so all rounds are identical. Only useful
    /// for testing the duplicate correction.
    Identical,
}

/// One bucketing/sorting/chunking pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub round_id: u64,
    /// Bucket per `X` row. Entries of masked rows are 0 and never used.
    pub bucket_x: Vec<usize>,
    /// Bucket per catalog item.
    pub bucket_y: Vec<usize>,
    /// Valid `X` row ids in stable bucket order.
    pub perm_x: Vec<usize>,
    /// Catalog ids in stable bucket order.
    pub perm_y: Vec<usize>,
    /// Padded chunk size on the `X` side, `ceil(valid_rows / n_c)`.
    pub chunk_rows: usize,
    /// Padded chunk size on the `Y` side, `ceil(C / n_c)`.
    pub chunk_items: usize,
    n_c: usize,
}

impl RoundPlan {
    fn new(
        round_id: u64,
        bucket_x: Vec<usize>,
        bucket_y: Vec<usize>,
        n_c: usize,
        valid_mask: &[bool],
    ) -> Result<Self> {
        if n_c == 0 {
            return Err(Error::invalid("n_c", "must be at least 1"));
        }
        if valid_mask.len() != bucket_x.len() {
            return Err(Error::DimensionMismatch {
                context: "build_plan (valid mask vs X bucket indices)",
                expected: bucket_x.len(),
                actual: valid_mask.len(),
            });
        }
        let mut perm_x: Vec<usize> = (0..bucket_x.len()).filter(|&i| valid_mask[i]).collect();
        if n_c > perm_x.len() {
            return Err(Error::TooManyChunks {
                n_c,
                valid_rows: perm_x.len(),
            });
        }
        perm_x.sort_by_key(|&i| bucket_x[i]);
        let mut perm_y: Vec<usize> = (0..bucket_y.len()).collect();
        perm_y.sort_by_key(|&j| bucket_y[j]);

        Ok(Self {
            round_id,
            chunk_rows: perm_x.len().div_ceil(n_c),
            chunk_items: perm_y.len().div_ceil(n_c),
            bucket_x,
            bucket_y,
            perm_x,
            perm_y,
            n_c,
        })
    }

    pub fn n_chunks(&self) -> usize {
        self.n_c
    }

    /// Original row ids in chunk `c`; shorter than `chunk_rows` where the
    /// chunk holds sentinel slots.
    pub fn chunk_x(&self, c: usize) -> &[usize] {
        clamp_slice(&self.perm_x, c * self.chunk_rows, (c + 1) * self.chunk_rows)
    }

    pub fn chunk_y(&self, c: usize) -> &[usize] {
        clamp_slice(&self.perm_y, c * self.chunk_items, (c + 1) * self.chunk_items)
    }

    /// Catalog ids of chunks `c - n_ec ..= c + n_ec`, out-of-range chunks
    /// dropped. Adjacent chunks are contiguous in `perm_y`, so this is a slice.
    pub fn neighbor_items(&self, c: usize, n_ec: usize) -> &[usize] {
        let lo = c.saturating_sub(n_ec);
        let hi = (c + n_ec).min(self.n_c - 1);
        clamp_slice(
            &self.perm_y,
            lo * self.chunk_items,
            (hi + 1) * self.chunk_items,
        )
    }

    /// Start offsets of the `X` chunks into `perm_x`, plus the end offset.
    pub fn x_boundaries(&self) -> Vec<usize> {
        (0..=self.n_c)
            .map(|c| (c * self.chunk_rows).min(self.perm_x.len()))
            .collect()
    }

    pub fn y_boundaries(&self) -> Vec<usize> {
        (0..=self.n_c)
            .map(|c| (c * self.chunk_items).min(self.perm_y.len()))
            .collect()
    }
}

fn clamp_slice(v: &[usize], start: usize, end: usize) -> &[usize] {
    let end = end.min(v.len());
    let start = start.min(end);
    &v[start..end]
}

/// All rounds of a plan plus the chunking parameters shared by every round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub rounds: Vec<RoundPlan>,
    pub n_b: usize,
    pub n_c: usize,
    pub n_ec: usize,
    pub n_rows: usize,
    pub n_items: usize,
}

impl ChunkPlan {
    /// `n_b / n_c`.
    pub fn alpha_bc(&self) -> f64 {
        self.n_b as f64 / self.n_c as f64
    }

    pub fn neighbor_items(&self, round: usize, c: usize) -> &[usize] {
        self.rounds[round].neighbor_items(c, self.n_ec)
    }

    /// Every `(round, row, item)` triple the plan scores, in plan order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.rounds.iter().enumerate().flat_map(move |(r, round)| {
            (0..self.n_c).flat_map(move |c| {
                let items = round.neighbor_items(c, self.n_ec);
                round
                    .chunk_x(c)
                    .iter()
                    .flat_map(move |&row| items.iter().map(move |&item| (r, row, item)))
            })
        })
    }

    /// Number of real `(row, item)` logits across all rounds.
    pub fn logit_count(&self) -> usize {
        self.rounds
            .iter()
            .map(|round| {
                (0..self.n_c)
                    .map(|c| round.chunk_x(c).len() * round.neighbor_items(c, self.n_ec).len())
                    .sum::<usize>()
            })
            .sum()
    }

    /// Sorted, deduplicated candidate items for every `X` row (empty for
    /// masked rows).
    pub fn row_item_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.n_rows];
        for (_, row, item) in self.pairs() {
            sets[row].push(item);
        }
        for set in &mut sets {
            set.sort_unstable();
            set.dedup();
        }
        sets
    }

    /// The same plan restricted to its first `rounds` rounds.
    pub fn truncated(&self, rounds: usize) -> ChunkPlan {
        ChunkPlan {
            rounds: self.rounds[..rounds.min(self.rounds.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// Single-round plan from precomputed bucket indices.
pub fn build_plan(
    bucket_x: &[usize],
    bucket_y: &[usize],
    n_c: usize,
    n_ec: usize,
    valid_mask: &[bool],
) -> Result<ChunkPlan> {
    let n_b = bucket_x
        .iter()
        .zip(valid_mask)
        .filter(|(_, &v)| v)
        .map(|(&b, _)| b)
        .chain(bucket_y.iter().copied())
        .max()
        .map_or(1, |b| b + 1);
    let round = RoundPlan::new(0, bucket_x.to_vec(), bucket_y.to_vec(), n_c, valid_mask)?;
    Ok(ChunkPlan {
        rounds: vec![round],
        n_b,
        n_c,
        n_ec,
        n_rows: bucket_x.len(),
        n_items: bucket_y.len(),
    })
}

/// Plans `params.rounds` independent rounds; both `X` and `Y` are
/// re-bucketed every round.
pub fn build_multi_round_plan(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    valid_mask: &[bool],
    params: &ReceParams,
) -> Result<(ChunkPlan, PairCountTable)> {
    params.validate()?;
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            context: "build_multi_round_plan (Y dim vs X dim)",
            expected: x.ncols(),
            actual: y.ncols(),
        });
    }
    if valid_mask.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "build_multi_round_plan (valid mask vs X rows)",
            expected: x.nrows(),
            actual: valid_mask.len(),
        });
    }
    let valid_rows: Vec<usize> = (0..x.nrows()).filter(|&i| valid_mask[i]).collect();
    if valid_rows.is_empty() {
        return Err(Error::NoValidRows);
    }
    let x_valid = x.select(Axis(0), &valid_rows);

    let mut rounds = Vec::with_capacity(params.rounds);
    for r in 0..params.rounds as u64 {
        let stream = match params.round_seeding {
            RoundSeeding::Distinct => r,
            RoundSeeding::Identical => 0,
        };
        let buckets = RandomBucketSet::generate(params.n_b, x.ncols(), params.seed, stream)?;
        let mut bucket_x = vec![0; x.nrows()];
        for (&row, b) in valid_rows.iter().zip(assign_buckets(x_valid.view(), &buckets)?) {
            bucket_x[row] = b;
        }
        let bucket_y = assign_buckets(y, &buckets)?;
        rounds.push(RoundPlan::new(r, bucket_x, bucket_y, params.n_c, valid_mask)?);
    }

    let plan = ChunkPlan {
        rounds,
        n_b: params.n_b,
        n_c: params.n_c,
        n_ec: params.n_ec,
        n_rows: x.nrows(),
        n_items: y.nrows(),
    };
    let counts = PairCountTable::from_plan(&plan);
    Ok((plan, counts))
}

/// Number of times each `(row, item)` logit is computed across all rounds.
///
/// Built by sorting packed `row << 32 | item` keys and run-length counting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairCountTable {
    keys: Vec<u64>,
    counts: Vec<u32>,
}

fn pack(row: usize, item: usize) -> u64 {
    debug_assert!(row <= u32::MAX as usize && item <= u32::MAX as usize);
    ((row as u64) << 32) | item as u64
}

impl PairCountTable {
    pub fn from_plan(plan: &ChunkPlan) -> Self {
        let mut all: Vec<u64> = plan.pairs().map(|(_, row, item)| pack(row, item)).collect();
        all.sort_unstable();
        let mut keys = Vec::new();
        let mut counts: Vec<u32> = Vec::new();
        for k in all {
            if keys.last() == Some(&k) {
                *counts.last_mut().unwrap() += 1;
            } else {
                keys.push(k);
                counts.push(1);
            }
        }
        Self { keys, counts }
    }

    /// Occurrence count, 0 when the pair is not in the plan.
    pub fn get(&self, row: usize, item: usize) -> u32 {
        match self.keys.binary_search(&pack(row, item)) {
            Ok(i) => self.counts[i],
            Err(_) => 0,
        }
    }

    /// Number of distinct pairs.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// `(row, item, count)` in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.keys
            .iter()
            .zip(&self.counts)
            .map(|(&k, &c)| ((k >> 32) as usize, (k & 0xffff_ffff) as usize, c))
    }
}
