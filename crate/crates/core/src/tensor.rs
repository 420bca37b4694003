//! Dense row-major tensors and the reference floating point kernels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of rank 1 to 3.
///
/// Every constructor checks that the shape matches the data length and that
/// all entries are finite, so a `Tensor` in hand never carries NaN or Inf.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::dim(format!("rank {} not in 1..=3", shape.len())));
        }
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![T::zero(); len])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::matrix(n, n, data)
    }

    /// Constructor for kernels whose outputs are finite by construction.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts_unchecked(vec![c, r], out))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start >= end || end > r {
            return Err(Error::dim(format!("row range {start}..{end} of {r}")));
        }
        Ok(Self::from_parts_unchecked(
            vec![end - start, c],
            self.data[start * c..end * c].to_vec(),
        ))
    }

    /// Stack matrices with equal column counts.
    pub fn vstack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("nothing to stack"))?;
        let cols = first.dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::dim(format!("cannot stack {c} columns onto {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts_unchecked(vec![rows, cols], data))
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| v * factor).collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.widen() * v.widen()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.widen().abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute error when `b` is zero.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::dim(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let diff: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let norm = b.frobenius_norm();
    Ok(if norm > 0.0 { diff / norm } else { diff })
}

/// Mean squared difference between two tensors of equal shape.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::dim(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    // Four independent accumulators; the summation order is fixed, so results
    // are reproducible.
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x.widen() * y.widen())
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l].widen() * y[l].widen();
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Four dot products of `a` sharing its loads; each equals [`dot`] bit for bit.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: [&[T]; 4]) -> [f64; 4] {
    let mut acc = [[0.0f64; 4]; 4];
    let k4 = a.len() - a.len() % 4;
    for i in (0..k4).step_by(4) {
        let x = &a[i..i + 4];
        for (acc, b) in acc.iter_mut().zip(&b) {
            let y = &b[i..i + 4];
            for l in 0..4 {
                acc[l] += x[l].widen() * y[l].widen();
            }
        }
    }
    let mut out = [0.0; 4];
    for ((o, acc), b) in out.iter_mut().zip(&acc).zip(&b) {
        let tail: f64 = a[k4..]
            .iter()
            .zip(&b[k4..])
            .map(|(x, y)| x.widen() * y.widen())
            .sum();
        *o = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
    out
}

/// `C = A · Bᵀ` with `A: m×k`, `B: n×k`, accumulated in 64-bit floats.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b_transposed: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b_transposed.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "inner dimensions differ: {m}x{k} against {n}x{k2} (transposed)"
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    let n4 = n - n % 4;
    for i in 0..m {
        let ar = a.row(i);
        for j in (0..n4).step_by(4) {
            let d = dot4(ar, [0, 1, 2, 3].map(|t| b_transposed.row(j + t)));
            out.extend(d.map(T::narrow));
        }
        for j in n4..n {
            out.push(T::narrow(dot(ar, b_transposed.row(j))));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Which slices [`axis_stats`] reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// One statistic per row (columns are reduced).
    Rows,
    /// One statistic per column (rows are reduced).
    Cols,
}

/// Per-slice mean, population variance and max |x|.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisStats {
    pub axis: Axis,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub max_abs: Vec<f64>,
}

pub fn axis_stats<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Result<AxisStats> {
    let (r, c) = x.dims2()?;
    let (slices, per) = match axis {
        Axis::Rows => (r, c),
        Axis::Cols => (c, r),
    };
    let at = |s: usize, t: usize| match axis {
        Axis::Rows => x.data[s * c + t].widen(),
        Axis::Cols => x.data[t * c + s].widen(),
    };
    let mut mean = Vec::with_capacity(slices);
    let mut var = Vec::with_capacity(slices);
    let mut max_abs = Vec::with_capacity(slices);
    for s in 0..slices {
        let mut sum = 0.0;
        let mut mx: f64 = 0.0;
        for t in 0..per {
            let v = at(s, t);
            sum += v;
            mx = mx.max(v.abs());
        }
        let mu = sum / per as f64;
        let v = (0..per).map(|t| (at(s, t) - mu).powi(2)).sum::<f64>() / per as f64;
        mean.push(mu);
        var.push(v);
        max_abs.push(mx);
    }
    Ok(AxisStats {
        axis,
        mean,
        var,
        max_abs,
    })
}

/// Mean and population variance over every entry.
pub fn moments<T: Scalar>(values: &[T]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.widen()).sum::<f64>() / n;
    let var = values.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Excess kurtosis `E[(x−μ)⁴]/σ⁴ − 3` over all entries.
pub fn excess_kurtosis<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::dim(format!("kurtosis needs >= 4 entries, got {}", x.len())));
    }
    let (mean, var) = moments(&x.data);
    if var <= 0.0 {
        return Err(Error::numeric("kurtosis of a constant tensor"));
    }
    let m4 = x
        .data
        .iter()
        .map(|v| (v.widen() - mean).powi(4))
        .sum::<f64>()
        / x.len() as f64;
    Ok(m4 / (var * var) - 3.0)
}
