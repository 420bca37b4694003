//! Seeded random generation.
//!
//! Every stochastic operation in the crate draws from [`SeededRng`], a
//! ChaCha8 stream keyed by a 64-bit seed. ChaCha is a counter-mode cipher, so
//! the stream for a given seed is identical on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream for work item `index`.
    pub fn child(&self, index: u64) -> Self {
        Self::new(derive_seed(self.seed, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn sign(&mut self) -> i8 {
        if self.inner.gen::<bool>() {
            1
        } else {
            -1
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}

/// SplitMix64 finalizer over `(seed, index)`, used to fan one seed out into
/// per-item sub-seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gen_gaussian<T: Scalar>(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor<T>> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::narrow(rng.gaussian())).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Gaussian `rows × cols` matrix with the listed columns multiplied by
/// `outlier_scale`.
pub fn gen_heavy_tailed<T: Scalar>(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    outlier_channels: &[usize],
    outlier_scale: f64,
) -> Result<Tensor<T>> {
    if let Some(&c) = outlier_channels.iter().find(|&&c| c >= cols) {
        return Err(Error::dim(format!(
            "outlier channel {c} out of range for {cols} columns"
        )));
    }
    if !(outlier_scale >= 1.0) || !outlier_scale.is_finite() {
        return Err(Error::invalid(format!(
            "outlier scale must be finite and >= 1, got {outlier_scale}"
        )));
    }
    let mut mask = vec![false; cols];
    for &c in outlier_channels {
        mask[c] = true;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for &outlier in &mask {
            let v = rng.gaussian();
            data.push(T::narrow(if outlier { v * outlier_scale } else { v }));
        }
    }
    Tensor::new(vec![rows, cols], data)
}
