//! Synthetic logs and embeddings for tests, benchmarks and smoke runs.

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Interaction, InteractionLog};
use crate::error::{Error, Result};

/// First-order Markov user sessions: every item has a fixed set of likely
/// successors.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub successors: usize,
    /// Probability of moving to one of the successors; otherwise the next
    /// item is uniform over the catalog.
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_users: 5000,
            min_len: 20,
            max_len: 40,
            successors: 5,
            follow_prob: 0.9,
            seed: 0,
        }
    }
}

impl MarkovConfig {
    fn validate(&self) -> Result<()> {
        if self.n_items < 2 || self.n_users == 0 {
            return Err(Error::invalid("n_items, n_users", "need at least 2 items and 1 user"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("min_len", "must satisfy 1 <= min_len <= max_len"));
        }
        if self.successors == 0 || self.successors >= self.n_items {
            return Err(Error::invalid("successors", "must be in [1, n_items)"));
        }
        if !(0.0..=1.0).contains(&self.follow_prob) {
            return Err(Error::invalid("follow_prob", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Successor lists, distinct and never the item itself.
    pub fn transitions(&self) -> Result<Vec<Vec<u32>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        Ok((0..self.n_items)
            .map(|i| {
                index::sample(&mut rng, self.n_items - 1, self.successors)
                    .into_iter()
                    .map(|j| if j >= i { j + 1 } else { j } as u32)
                    .collect()
            })
            .collect())
    }
}

/// Generates a Markov log. Users start at random times so their timelines
/// interleave; each step advances the clock by 1 to 1000.
pub fn markov_log(cfg: &MarkovConfig) -> Result<InteractionLog> {
    let succ = cfg.transitions()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut records = Vec::new();
    for user in 0..cfg.n_users as u32 {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut t: i64 = rng.random_range(0..1_000_000);
        let mut item = rng.random_range(0..cfg.n_items) as u32;
        for _ in 0..len {
            records.push(Interaction { user, item, timestamp: t });
            t += rng.random_range(1..=1000);
            item = if rng.random::<f64>() < cfg.follow_prob {
                let s = &succ[item as usize];
                s[rng.random_range(0..s.len())]
            } else {
                rng.random_range(0..cfg.n_items) as u32
            };
        }
    }
    Ok(InteractionLog {
        records,
        users: (0..cfg.n_users).map(|u| format!("u{u}")).collect(),
        items: (0..cfg.n_items).map(|i| format!("i{i}")).collect(),
    })
}

/// Uniformly random log with `interactions` records and timestamps in
/// `[0, max_ts)`. Users and items are named by index; ids that never occur
/// are absent from the vocabularies.
pub fn random_log(n_users: usize, n_items: usize, interactions: usize, max_ts: i64, seed: u64) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triples: Vec<(String, String, i64)> = (0..interactions)
        .map(|_| {
            (
                format!("u{}", rng.random_range(0..n_users)),
                format!("i{}", rng.random_range(0..n_items)),
                rng.random_range(0..max_ts),
            )
        })
        .collect();
    InteractionLog::from_triples(triples.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)))
}

pub fn random_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
}

/// Uniform targets in `[0, c)`.
pub fn random_targets(m: usize, c: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| rng.random_range(0..c)).collect()
}

/// Gaussian mixture shared by row and item embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    pub dim: usize,
    pub center_std: f64,
    pub noise_std: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_clusters: 16,
            dim: 32,
            center_std: 1.0,
            noise_std: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusteredPair {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_labels: Vec<usize>,
    pub y_labels: Vec<usize>,
}

/// `m` rows and `c` items drawn around the same cluster centres, with each
/// point's cluster chosen uniformly.
pub fn clustered_pair(m: usize, c: usize, cfg: &ClusterConfig, seed: u64) -> Result<ClusteredPair> {
    if cfg.n_clusters == 0 || cfg.dim == 0 {
        return Err(Error::invalid("n_clusters, dim", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = Normal::new(0.0, cfg.center_std).map_err(|e| Error::invalid("center_std", e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let centres = Array2::from_shape_simple_fn((cfg.n_clusters, cfg.dim), || centre.sample(&mut rng));
    let mut draw = |n: usize| {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.n_clusters)).collect();
        let mut pts = Array2::zeros((n, cfg.dim));
        for (r, &l) in labels.iter().enumerate() {
            for k in 0..cfg.dim {
                pts[[r, k]] = centres[[l, k]] + noise.sample(&mut rng);
            }
        }
        (pts, labels)
    };
    let (x, x_labels) = draw(m);
    let (y, y_labels) = draw(c);
    Ok(ClusteredPair { x, y, x_labels, y_labels })
}
