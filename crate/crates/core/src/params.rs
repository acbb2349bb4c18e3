//! Named parameter tensors and seeded initialization.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{sqrt, Mat};

/// A fixed, ordered collection of named tensors.
///
/// `tensors` and `tensors_mut` must list tensors in the same order; gradient
/// containers share the parameter type, so the two lists zip one-to-one.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Mat)>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn zero(&mut self) {
        for m in self.tensors_mut() {
            m.fill(0.0);
        }
    }

    fn sum_sq(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sum_sq()).sum()
    }

    fn scale(&mut self, s: f64) {
        for m in self.tensors_mut() {
            m.scale(s);
        }
    }

    /// `self += s * other`.
    fn add_scaled(&mut self, s: f64, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<&Mat> = other.tensors().into_iter().map(|(_, m)| m).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            dst.add_scaled(s, src);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Seeded generator used for initialization and dropout.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot/Xavier uniform range `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_range(fan_in: usize, fan_out: usize) -> f64 {
    sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// `rows x cols` weight matrix drawn from `U(-r, r)` with the Glorot range
/// (`fan_in = cols`, `fan_out = rows`).
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let r = glorot_range(cols, rows);
    uniform(rows, cols, r, rng)
}

pub fn uniform(rows: usize, cols: usize, range: f64, rng: &mut impl Rng) -> Mat {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-range..range))
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Range of embedding initialization.
pub const EMBEDDING_RANGE: f64 = 0.1;
