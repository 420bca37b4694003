//! Normalized and randomized Hadamard rotations.
//!
//! A [`RotationOp`] represents `Ĥ = diag(signs) · H / √d` with `H` the
//! Sylvester Hadamard matrix: input coordinates are sign-flipped before the
//! transform, so fixed patterns such as a shared offset are spread out. Applying it to the rows of a matrix uses the
//! fast Walsh–Hadamard transform, `O(d log d)` per row.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// In-place unnormalized Walsh–Hadamard transform (Sylvester ordering).
pub fn fwht<T: Scalar>(x: &mut [T]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::UnsupportedDimension(d));
    }
    Ok(())
}

/// Orthonormal Sylvester Hadamard matrix, entries `±1/√d`.
pub fn hadamard_matrix<T: Scalar>(d: usize) -> Result<Tensor<T>> {
    check_dim(d)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            // Sylvester entry sign is the parity of popcount(i & j).
            let s = if (i & j).count_ones() % 2 == 0 { scale } else { -scale };
            data.push(T::narrow(s));
        }
    }
    Tensor::matrix(d, d, data)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotationOp {
    dim: usize,
    signs: Vec<i8>,
    seed: Option<u64>,
}

impl RotationOp {
    /// The plain normalized transform (all signs +1).
    pub fn identity_signs(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            dim,
            signs: vec![1; dim],
            seed: None,
        })
    }

    /// Normalized transform composed with i.i.d. random ±1 column signs.
    pub fn random(dim: usize, seed: u64) -> Result<Self> {
        check_dim(dim)?;
        let mut rng = SeededRng::new(seed);
        let signs = (0..dim).map(|_| rng.sign()).collect();
        Ok(Self {
            dim,
            signs,
            seed: Some(seed),
        })
    }

    pub fn from_signs(signs: Vec<i8>, seed: Option<u64>) -> Result<Self> {
        check_dim(signs.len())?;
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("rotation signs must be +1 or -1"));
        }
        Ok(Self {
            dim: signs.len(),
            signs,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Dense `Ĥ`.
    pub fn matrix<T: Scalar>(&self) -> Result<Tensor<T>> {
        let h = hadamard_matrix::<f64>(self.dim)?;
        let d = self.dim;
        let data = (0..d * d)
            .map(|k| T::narrow(h.data()[k] * self.signs[k / d] as f64))
            .collect();
        Tensor::matrix(d, d, data)
    }

    /// `row ← row · Ĥ` in place.
    #[inline]
    pub fn rotate_row<T: Scalar>(&self, row: &mut [T]) {
        debug_assert_eq!(row.len(), self.dim);
        let scale = T::narrow(1.0 / (self.dim as f64).sqrt());
        for (v, &s) in row.iter_mut().zip(&self.signs) {
            *v = if s > 0 { *v * scale } else { -(*v * scale) };
        }
        fwht(row);
    }
}

/// `X · Ĥ`, one fast transform per row.
pub fn apply_rotation<T: Scalar>(x: &Tensor<T>, rot: &RotationOp) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if c != rot.dim {
        return Err(Error::dim(format!(
            "rotation of dimension {} applied to {c} columns",
            rot.dim
        )));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(c) {
        rot.rotate_row(row);
    }
    debug_assert!(r * c == data.len());
    Ok(Tensor::from_parts_unchecked(vec![r, c], data))
}
