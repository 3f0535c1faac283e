//! Shared inputs for the criterion benches.

use ndarray::Array2;
use rece_core::synth;

/// Random encoder outputs, item table and targets of a fixed shape.
pub struct Fixture {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Fixture {
    pub fn new(m: usize, c: usize, dim: usize, seed: u64) -> Self {
        Self {
            x: synth::random_matrix(m, dim, 1.0, seed),
            y: synth::random_matrix(c, dim, 1.0, seed + 1),
            targets: synth::random_targets(m, c, seed + 2),
            mask: vec![true; m],
        }
    }
}
