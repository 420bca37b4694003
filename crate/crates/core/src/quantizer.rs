//! Symmetric uniform quantization at tensor, row and column granularity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Step used for an all-zero group, where `max|x| / qmax` would be zero.
pub const ZERO_MAX_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitWidth {
    #[serde(rename = "4")]
    Int4,
    #[serde(rename = "6")]
    Int6,
    #[serde(rename = "8")]
    Int8,
}

impl BitWidth {
    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            4 => Ok(Self::Int4),
            6 => Ok(Self::Int6),
            8 => Ok(Self::Int8),
            b => Err(Error::invalid(format!("unsupported bit width {b}; use 4, 6 or 8"))),
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Self::Int4 => 4,
            Self::Int6 => 6,
            Self::Int8 => 8,
        }
    }

    /// Largest code, `2^(N−1) − 1`.
    pub fn qmax(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    /// Smallest code, `−2^(N−1)`.
    pub fn qmin(self) -> i32 {
        -(1 << (self.bits() - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One step per row. For activations this is per token; for a weight
    /// stored `d_out × d_in` it is per output channel.
    PerRow,
    PerColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Steps frozen from calibration data.
    Static,
    /// Steps recomputed from each input at run time (activations only).
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: BitWidth,
    pub granularity: Granularity,
    pub mode: Mode,
}

impl QuantSpec {
    pub fn new(bits: BitWidth, granularity: Granularity, mode: Mode) -> Self {
        Self {
            bits,
            granularity,
            mode,
        }
    }

    /// Per-output-channel static weights.
    pub fn weight(bits: BitWidth) -> Self {
        Self::new(bits, Granularity::PerRow, Mode::Static)
    }

    /// Per-token dynamic activations.
    pub fn activation(bits: BitWidth) -> Self {
        Self::new(bits, Granularity::PerRow, Mode::Dynamic)
    }

    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerRow => rows,
            Granularity::PerColumn => cols,
        }
    }
}

/// Integer codes plus one step per quantization group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T = f64> {
    pub shape: [usize; 2],
    pub codes: Vec<i8>,
    pub deltas: Vec<T>,
    pub spec: QuantSpec,
}

impl<T: Scalar> QuantizedTensor<T> {
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Step applying to element `(i, j)`.
    #[inline]
    pub fn delta_at(&self, i: usize, j: usize) -> T {
        match self.spec.granularity {
            Granularity::PerTensor => self.deltas[0],
            Granularity::PerRow => self.deltas[i],
            Granularity::PerColumn => self.deltas[j],
        }
    }

    pub fn dequantize(&self) -> Tensor<T> {
        let [r, c] = self.shape;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(T::from_i8(self.codes[i * c + j]).unwrap() * self.delta_at(i, j));
            }
        }
        Tensor::from_parts_unchecked(vec![r, c], out)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let [r, c] = self.shape;
        if self.codes.len() != r * c {
            return Err(Error::dim("code count does not match shape"));
        }
        if self.deltas.len() != self.spec.group_count(r, c) {
            return Err(Error::dim("delta count does not match granularity"));
        }
        if self.deltas.iter().any(|d| !(d.widen() > 0.0) || !d.is_finite()) {
            return Err(Error::numeric("quantization steps must be positive and finite"));
        }
        let (lo, hi) = (self.spec.bits.qmin(), self.spec.bits.qmax());
        if self.codes.iter().any(|&q| (q as i32) < lo || (q as i32) > hi) {
            return Err(Error::invalid("code outside the representable range"));
        }
        Ok(())
    }
}

/// `Δ = max|x| / (2^(N−1) − 1)`, falling back to [`ZERO_MAX_DELTA`] when the
/// slice is all zeros.
pub fn compute_delta<T: Scalar>(x: &[T], bits: BitWidth) -> Result<T> {
    let mut max = 0.0f64;
    for v in x {
        let v = v.widen();
        if !v.is_finite() {
            return Err(Error::numeric("non-finite value in quantization group"));
        }
        max = max.max(v.abs());
    }
    Ok(T::narrow(delta_from_max(max, bits)))
}

pub(crate) fn delta_from_max(max_abs: f64, bits: BitWidth) -> f64 {
    if max_abs > 0.0 {
        max_abs / bits.qmax() as f64
    } else {
        ZERO_MAX_DELTA
    }
}

/// `clamp(round(x / Δ), −2^(N−1), 2^(N−1) − 1)` with ties rounded away from
/// zero.
#[inline]
pub fn quantize_value<T: Scalar>(x: T, delta: T, bits: BitWidth) -> i8 {
    let y = x.widen() / delta.widen();
    if y.is_nan() {
        return 0;
    }
    // Half away from zero on |y| saturated at 256, where the fractional part
    // is exact.
    let a = y.abs().min(256.0);
    let t = a as i32;
    let r = t + i32::from(a - t as f64 >= 0.5);
    let q = if y < 0.0 { -r } else { r };
    q.clamp(bits.qmin(), bits.qmax()) as i8
}

pub fn quantize<T: Scalar>(x: &[T], delta: T, bits: BitWidth) -> Result<Vec<i8>> {
    if !(delta.widen() > 0.0) {
        return Err(Error::numeric(format!("step must be positive, got {delta}")));
    }
    Ok(x.iter().map(|&v| quantize_value(v, delta, bits)).collect())
}

pub fn dequantize<T: Scalar>(codes: &[i8], delta: T) -> Vec<T> {
    codes
        .iter()
        .map(|&q| T::from_i8(q).unwrap() * delta)
        .collect()
}

/// Steps computed from `x` itself, one per group.
pub fn group_deltas<T: Scalar>(x: &Tensor<T>, spec: QuantSpec) -> Result<Vec<T>> {
    let (r, c) = x.dims2()?;
    let data = x.data();
    Ok(match spec.granularity {
        Granularity::PerTensor => vec![compute_delta(data, spec.bits)?],
        Granularity::PerRow => (0..r)
            .map(|i| compute_delta(x.row(i), spec.bits))
            .collect::<Result<_>>()?,
        Granularity::PerColumn => {
            let mut max = vec![0.0f64; c];
            for i in 0..r {
                for (m, v) in max.iter_mut().zip(x.row(i)) {
                    *m = m.max(v.widen().abs());
                }
            }
            max.into_iter()
                .map(|m| T::narrow(delta_from_max(m, spec.bits)))
                .collect()
        }
    })
}

/// Quantize with explicitly supplied steps (static calibration ranges or
/// tuned steps).
pub fn quantize_with_deltas<T: Scalar>(
    x: &Tensor<T>,
    spec: QuantSpec,
    deltas: Vec<T>,
) -> Result<QuantizedTensor<T>> {
    let (r, c) = x.dims2()?;
    if deltas.len() != spec.group_count(r, c) {
        return Err(Error::dim(format!(
            "{} steps for {:?} on {r}x{c}",
            deltas.len(),
            spec.granularity
        )));
    }
    if deltas.iter().any(|d| !(d.widen() > 0.0)) {
        return Err(Error::numeric("quantization steps must be positive"));
    }
    let mut qt = QuantizedTensor {
        shape: [r, c],
        codes: Vec::with_capacity(r * c),
        deltas,
        spec,
    };
    for i in 0..r {
        for (j, &v) in x.row(i).iter().enumerate() {
            let d = qt.delta_at(i, j);
            qt.codes.push(quantize_value(v, d, spec.bits));
        }
    }
    Ok(qt)
}

pub fn quantize_tensor<T: Scalar>(x: &Tensor<T>, spec: QuantSpec) -> Result<QuantizedTensor<T>> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("expected rank 2, got {}", x.rank())));
    }
    let deltas = group_deltas(x, spec)?;
    quantize_with_deltas(x, spec, deltas)
}

/// Mean squared error between `x` and its quantize/dequantize round trip.
pub fn quant_mse<T: Scalar>(x: &Tensor<T>, spec: QuantSpec) -> Result<f64> {
    let q = quantize_tensor(x, spec)?;
    crate::tensor::mse(x, &q.dequantize())
}

/// `μ = max|x|·√g / ‖x‖_F`: 1 for a constant slice, `√g` for a one-hot one.
pub fn coherence<T: Scalar>(x: &[T]) -> Result<f64> {
    let norm = x.iter().map(|v| v.widen() * v.widen()).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::numeric("coherence of a zero or non-finite slice"));
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.widen().abs()));
    Ok(max * (x.len() as f64).sqrt() / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gen_gaussian, SeededRng};
    use proptest::prelude::*;

    const B4: BitWidth = BitWidth::Int4;
    const B8: BitWidth = BitWidth::Int8;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn delta_examples() {
        let d: f64 = compute_delta(&[0.7, -2.1, 1.4], B4).unwrap();
        assert!((d - 0.3).abs() < 1e-15);
        assert_eq!(compute_delta(&[0.0f64, 0.0, 0.0], B8).unwrap(), 1e-8);
        assert_eq!(compute_delta(&[127.0f64], B8).unwrap(), 1.0);
        assert!(matches!(compute_delta(&[f64::NAN], B8), Err(Error::Numeric(_))));
    }

    #[test]
    fn quantize_examples() {
        let codes = quantize(&[0.7f64, -2.1, 1.4], 0.3, B4).unwrap();
        assert_eq!(codes, vec![2, -7, 5]);
        let back = dequantize(&codes, 0.3f64);
        for (a, b) in back.iter().zip([0.6, -2.1, 1.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        let codes = quantize(&[10.0f64], 0.3, B4).unwrap();
        assert_eq!(codes, vec![7]);
        assert!((dequantize(&codes, 0.3f64)[0] - 2.1).abs() < 1e-12);
        assert!(quantize(&[1.0], 0.0, B4).is_err());
    }

    #[test]
    fn ties_round_away_from_zero() {
        assert_eq!(quantize(&[0.5, -0.5, 1.5, -2.5], 1.0, B8).unwrap(), vec![1, -1, 2, -3]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let x: Vec<f64> = (-7..=7).map(|k| k as f64 * 0.25).collect();
        let q = quantize(&x, 0.25, B4).unwrap();
        assert_eq!(dequantize(&q, 0.25), x);
    }

    #[test]
    fn granularity_examples() {
        let x = m(&[&[1., 1.], &[100., 100.]]);
        let per_row = quantize_tensor(&x, QuantSpec::new(B4, Granularity::PerRow, Mode::Dynamic))
            .unwrap();
        assert_eq!(per_row.deltas, vec![1.0 / 7.0, 100.0 / 7.0]);
        let back = per_row.dequantize();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() / b < 0.08);
        }
        let spec_t = QuantSpec::new(B4, Granularity::PerTensor, Mode::Static);
        let per_tensor = quantize_tensor(&x, spec_t).unwrap();
        assert_eq!(per_tensor.deltas, vec![100.0 / 7.0]);
        assert_eq!(&per_tensor.dequantize().data()[..2], &[0.0, 0.0]);

        let spec_r = QuantSpec::new(B4, Granularity::PerRow, Mode::Dynamic);
        assert!(quant_mse(&x, spec_r).unwrap() < quant_mse(&x, spec_t).unwrap());
    }

    #[test]
    fn constant_tensor_is_exact() {
        let x = Tensor::matrix(3, 4, vec![2.5; 12]).unwrap();
        for g in [Granularity::PerTensor, Granularity::PerRow, Granularity::PerColumn] {
            let q = quantize_tensor(&x, QuantSpec::new(B4, g, Mode::Static)).unwrap();
            assert!(q.codes.iter().all(|&c| c == q.codes[0]));
            assert_eq!(q.dequantize(), x);
            assert_eq!(quant_mse(&x, q.spec).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_non_matrix() {
        let x = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        assert!(matches!(
            quantize_tensor(&x, QuantSpec::weight(B8)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn group_counts() {
        let x: Tensor = gen_gaussian(&mut SeededRng::new(1), &[3, 5]).unwrap();
        for (g, n) in [
            (Granularity::PerTensor, 1),
            (Granularity::PerRow, 3),
            (Granularity::PerColumn, 5),
        ] {
            let q = quantize_tensor(&x, QuantSpec::new(B8, g, Mode::Static)).unwrap();
            assert_eq!(q.deltas.len(), n);
            q.validate().unwrap();
        }
    }

    #[test]
    fn coherence_examples() {
        let one_hot = [0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!((coherence(&one_hot).unwrap() - 3.0).abs() < 1e-12);
        assert!((coherence(&[2.0; 7]).unwrap() - 1.0).abs() < 1e-12);
        let mu = coherence(&[3.0, 4.0]).unwrap();
        assert!((mu - 4.0 * 2f64.sqrt() / 5.0).abs() < 1e-12);
        assert!((mu - 1.1314).abs() < 1e-4);
        assert!(coherence(&[0.0f64, 0.0]).is_err());
    }

    #[test]
    fn finer_groups_can_lose_on_lucky_grids() {
        // 34.308 lands close to the coarse per-tensor grid but between points
        // of its own row's finer grid, so per-row MSE is larger here.
        let x = m(&[&[34.30831914666855, -42.25131303969071], &[12.692945431099066, 0.0]]);
        let t = quant_mse(&x, QuantSpec::new(B4, Granularity::PerTensor, Mode::Static)).unwrap();
        let c = quant_mse(&x, QuantSpec::new(B4, Granularity::PerColumn, Mode::Static)).unwrap();
        assert!(c > t);
    }

    #[test]
    fn finer_groups_win_on_heavy_tailed_data() {
        for seed in 0..200 {
            let x: Tensor = crate::rng::gen_heavy_tailed(&mut SeededRng::new(seed), 32, 64, &[3, 40], 20.0).unwrap();
            for b in [BitWidth::Int4, BitWidth::Int6, BitWidth::Int8] {
                let t = quant_mse(&x, QuantSpec::new(b, Granularity::PerTensor, Mode::Static)).unwrap();
                let r = quant_mse(&x, QuantSpec::new(b, Granularity::PerRow, Mode::Dynamic)).unwrap();
                let c = quant_mse(&x, QuantSpec::new(b, Granularity::PerColumn, Mode::Static)).unwrap();
                assert!(r <= t && c <= t, "seed {seed} bits {b:?}");
            }
        }
    }

    fn matrix() -> impl Strategy<Value = Tensor> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
        })
    }

    fn bits() -> impl Strategy<Value = BitWidth> {
        prop_oneof![Just(BitWidth::Int4), Just(BitWidth::Int6), Just(BitWidth::Int8)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn codes_stay_in_range(x in prop::collection::vec(-1e3f64..1e3, 1..16),
                               delta in 1e-3f64..10.0, b in bits()) {
            for q in quantize(&x, delta, b).unwrap() {
                prop_assert!((q as i32) >= b.qmin() && (q as i32) <= b.qmax());
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(x in prop::collection::vec(-1e3f64..1e3, 1..32), b in bits()) {
            let d = compute_delta(&x, b).unwrap();
            let back = dequantize(&quantize(&x, d, b).unwrap(), d);
            for (v, r) in x.iter().zip(&back) {
                // Only the positive extreme may clamp; it maps to qmax exactly.
                prop_assert!((v - r).abs() <= d / 2.0 + 1e-9 * d);
            }
        }

        #[test]
        fn finer_group_steps_never_exceed_tensor_step(x in matrix(), b in bits()) {
            // The per-element rounding bound (Δ/2)² therefore only tightens
            // with finer groups.
            let t = group_deltas(&x, QuantSpec::new(b, Granularity::PerTensor, Mode::Static)).unwrap()[0];
            for g in [Granularity::PerRow, Granularity::PerColumn] {
                for d in group_deltas(&x, QuantSpec::new(b, g, Mode::Static)).unwrap() {
                    prop_assert!(d <= t);
                }
            }
        }

        #[test]
        fn positive_scaling_keeps_codes(x in matrix(), k in 0usize..4, b in bits()) {
            // Powers of two keep the scaled arithmetic exact.
            let c = [0.25, 0.5, 2.0, 8.0][k];
            let spec = QuantSpec::new(b, Granularity::PerRow, Mode::Dynamic);
            let q1 = quantize_tensor(&x, spec).unwrap();
            let q2 = quantize_tensor(&x.scale(c).unwrap(), spec).unwrap();
            prop_assert_eq!(&q1.codes, &q2.codes);
            for (d1, d2) in q1.deltas.iter().zip(&q2.deltas) {
                if *d1 != ZERO_MAX_DELTA {
                    prop_assert_eq!(d1 * c, *d2);
                }
            }
        }

        #[test]
        fn coherence_scale_free(x in prop::collection::vec(-10.0f64..10.0, 2..20), c in 0.01f64..100.0) {
            prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
            let scaled: Vec<f64> = x.iter().map(|v| -c * v).collect();
            let a = coherence(&x).unwrap();
            let b = coherence(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
