//! Deterministic random streams.
//!
//! Each draw is keyed by (seed, purpose, layer) and uses the ensemble member
//! as the ChaCha stream id, so members and layers can be generated in any
//! order and on any thread.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Draw {
    Weight = 1,
    Bias = 2,
    Input = 3,
    Projected = 4,
}

/// Member id for draws shared by the whole ensemble.
pub(crate) const SHARED: u64 = u64::MAX;

pub(crate) fn stream(seed: u64, draw: Draw, layer: u64, member: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(draw as u64).to_le_bytes());
    key[16..24].copy_from_slice(&layer.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(member);
    rng
}

/// Standard normal matrix filled in column-major order.
pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(rows, cols, rng.sample_iter(StandardNormal).take(rows * cols))
}

pub(crate) fn normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, rng.sample_iter(StandardNormal).take(n))
}
