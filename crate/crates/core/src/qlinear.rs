//! Simulated low-bit linear layer.
//!
//! Weights are transformed offline (`W Ĥ diag(ĉ)`), quantized per output
//! channel and stored as codes. At run time the activations get the matching
//! online transform, are quantized per token, multiplied against the weight
//! codes with integer accumulation, and rescaled by `Δ_act[i] · Δ_w[j]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{
    delta_from_max, quantize_value, quantize_with_deltas, BitWidth, Granularity, Mode,
    QuantSpec, QuantizedTensor,
};
use crate::rotation::RotationOp;
use crate::scalar::Scalar;
use crate::smoothing::{
    channel_max_abs, fuse_weights, scale_row, smooth_scale_from_maxima, transform_activations,
    SmoothOrder, SmoothScale, DEFAULT_ALPHA,
};
use crate::tensor::{matmul, mse, Tensor};

/// Ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain round-to-nearest, no transforms.
    Naive,
    RotationOnly,
    ScaleOnly,
    /// Rotation followed by channel smoothing in the rotated space.
    Dsfq,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Naive,
        Variant::RotationOnly,
        Variant::ScaleOnly,
        Variant::Dsfq,
    ];

    pub fn has_rotation(self) -> bool {
        matches!(self, Variant::RotationOnly | Variant::Dsfq)
    }

    pub fn has_smoothing(self) -> bool {
        matches!(self, Variant::ScaleOnly | Variant::Dsfq)
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Naive => 0,
            Variant::RotationOnly => 1,
            Variant::ScaleOnly => 2,
            Variant::Dsfq => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown scheme tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::RotationOnly => "rotation",
            Variant::ScaleOnly => "scale",
            Variant::Dsfq => "dsfq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub variant: Variant,
    pub weight: QuantSpec,
    pub act: QuantSpec,
    pub alpha: f64,
    /// Seed for the random rotation signs; `None` uses the plain transform.
    pub rotation_seed: Option<u64>,
    pub order: SmoothOrder,
    /// Skip quantization entirely (transforms are still applied).
    pub full_precision: bool,
}

impl QuantScheme {
    /// Per-output-channel weights, dynamic per-token activations.
    pub fn new(variant: Variant, weight_bits: BitWidth, act_bits: BitWidth) -> Self {
        Self {
            variant,
            weight: QuantSpec::weight(weight_bits),
            act: QuantSpec::activation(act_bits),
            alpha: DEFAULT_ALPHA,
            rotation_seed: Some(0),
            order: SmoothOrder::RotateThenScale,
            full_precision: false,
        }
    }

    pub fn full_precision() -> Self {
        Self {
            full_precision: true,
            ..Self::new(Variant::Naive, BitWidth::Int8, BitWidth::Int8)
        }
    }

    pub fn with_rotation_seed(mut self, seed: Option<u64>) -> Self {
        self.rotation_seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.weight.mode != Mode::Static {
            return Err(Error::invalid("weights must use static quantization"));
        }
        if self.weight.granularity == Granularity::PerColumn {
            return Err(Error::invalid(
                "weight steps cannot vary along the summed input dimension",
            ));
        }
        match (self.act.mode, self.act.granularity) {
            (_, Granularity::PerColumn) => Err(Error::invalid(
                "activation steps cannot vary along the summed input dimension",
            )),
            (Mode::Static, Granularity::PerRow) => Err(Error::invalid(
                "static activation ranges must be per tensor",
            )),
            _ => Ok(()),
        }
    }
}

/// Tunable per-layer parameters, everything a built layer depends on besides
/// the raw weight and the scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub rotation: Option<RotationOp>,
    pub smooth: Option<SmoothScale>,
    /// Multipliers on the max-derived weight steps, one per group (all 1
    /// initially).
    pub weight_delta_scale: Vec<f64>,
    /// Frozen activation step for static activation quantization.
    pub act_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum WeightStore<T> {
    Quantized {
        q: QuantizedTensor<T>,
        /// Codes widened for the integer kernel.
        wide: Vec<i16>,
    },
    Float(Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinear<T = f64> {
    scheme: QuantScheme,
    in_features: usize,
    out_features: usize,
    params: LayerParams,
    weights: WeightStore<T>,
}

/// Activations after the online transform and per-token quantization.
#[derive(Debug, Clone)]
pub struct QuantizedActs<T> {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i16>,
    pub deltas: Vec<T>,
}

/// Partial sums stay exact in `i32` over this many terms for 8-bit codes.
const I32_CHUNK: usize = 1 << 15;

#[inline]
fn dot_codes(a: &[i16], b: &[i16]) -> i64 {
    let mut total = 0i64;
    for (ca, cb) in a.chunks(I32_CHUNK).zip(b.chunks(I32_CHUNK)) {
        let s: i32 = ca.iter().zip(cb).map(|(&x, &y)| x as i32 * y as i32).sum();
        total += s as i64;
    }
    total
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// Integer dot products of every row of `x` (`m × k`) with every row of
    /// `w` (`n × k`) into `out` (`m × n`). `k` must be a multiple of 8 and
    /// small enough for exact `i32` sums.
    pub(super) fn dot_all(x: &[i16], w: &[i16], k: usize, out: &mut [i32]) {
        assert!(k > 0 && k % 8 == 0 && x.len() % k == 0 && w.len() % k == 0);
        let (m, n) = (x.len() / k, w.len() / k);
        assert_eq!(out.len(), m * n);
        if k % 16 == 0 && is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked; shapes were checked above.
            unsafe { dot_all_avx2(x, w, k, m, n, out) };
            return;
        }
        for i in 0..m {
            let xr = &x[i * k..(i + 1) * k];
            let mut j = 0;
            while j + 4 <= n {
                // SAFETY: SSE2 is part of the x86_64 baseline; the row slices
                // have length k.
                let acc = unsafe { dot4_sse2(xr, &w[j * k..(j + 4) * k], k) };
                out[i * n + j..i * n + j + 4].copy_from_slice(&acc);
                j += 4;
            }
            for j in j..n {
                out[i * n + j] = scalar_dot(xr, &w[j * k..(j + 1) * k]);
            }
        }
    }

    fn scalar_dot(a: &[i16], b: &[i16]) -> i32 {
        a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
    }

    unsafe fn dot4_sse2(x: &[i16], w: &[i16], k: usize) -> [i32; 4] {
        let mut acc = [_mm_setzero_si128(); 4];
        for t in (0..k).step_by(8) {
            let xv = _mm_loadu_si128(x.as_ptr().add(t) as *const __m128i);
            for (l, a) in acc.iter_mut().enumerate() {
                let wv = _mm_loadu_si128(w.as_ptr().add(l * k + t) as *const __m128i);
                *a = _mm_add_epi32(*a, _mm_madd_epi16(xv, wv));
            }
        }
        acc.map(|a| {
            let mut lanes = [0i32; 4];
            _mm_storeu_si128(lanes.as_mut_ptr() as *mut __m128i, a);
            lanes.iter().sum()
        })
    }

    #[target_feature(enable = "avx2")]
    unsafe fn hsum4(a: [__m256i; 4]) -> [i32; 4] {
        let h = _mm256_hadd_epi32(_mm256_hadd_epi32(a[0], a[1]), _mm256_hadd_epi32(a[2], a[3]));
        let sum = _mm_add_epi32(_mm256_castsi256_si128(h), _mm256_extracti128_si256(h, 1));
        let mut lanes = [0i32; 4];
        _mm_storeu_si128(lanes.as_mut_ptr() as *mut __m128i, sum);
        lanes
    }

    #[target_feature(enable = "avx2")]
    unsafe fn dot_all_avx2(x: &[i16], w: &[i16], k: usize, m: usize, n: usize, out: &mut [i32]) {
        let xp = x.as_ptr();
        let wp = w.as_ptr();
        let n4 = n - n % 4;
        let mut i = 0;
        while i + 2 <= m {
            for j in (0..n4).step_by(4) {
                let mut a0 = [_mm256_setzero_si256(); 4];
                let mut a1 = [_mm256_setzero_si256(); 4];
                for t in (0..k).step_by(16) {
                    let x0 = _mm256_loadu_si256(xp.add(i * k + t) as *const __m256i);
                    let x1 = _mm256_loadu_si256(xp.add((i + 1) * k + t) as *const __m256i);
                    for l in 0..4 {
                        let wv = _mm256_loadu_si256(wp.add((j + l) * k + t) as *const __m256i);
                        a0[l] = _mm256_add_epi32(a0[l], _mm256_madd_epi16(x0, wv));
                        a1[l] = _mm256_add_epi32(a1[l], _mm256_madd_epi16(x1, wv));
                    }
                }
                out[i * n + j..i * n + j + 4].copy_from_slice(&hsum4(a0));
                out[(i + 1) * n + j..(i + 1) * n + j + 4].copy_from_slice(&hsum4(a1));
            }
            i += 2;
        }
        while i < m {
            for j in (0..n4).step_by(4) {
                let mut a0 = [_mm256_setzero_si256(); 4];
                for t in (0..k).step_by(16) {
                    let x0 = _mm256_loadu_si256(xp.add(i * k + t) as *const __m256i);
                    for (l, a) in a0.iter_mut().enumerate() {
                        let wv = _mm256_loadu_si256(wp.add((j + l) * k + t) as *const __m256i);
                        *a = _mm256_add_epi32(*a, _mm256_madd_epi16(x0, wv));
                    }
                }
                out[i * n + j..i * n + j + 4].copy_from_slice(&hsum4(a0));
            }
            i += 1;
        }
        for i in 0..m {
            for j in n4..n {
                out[i * n + j] = scalar_dot(&x[i * k..(i + 1) * k], &w[j * k..(j + 1) * k]);
            }
        }
    }
}

fn check_accumulator(d_in: usize, act: BitWidth, weight: BitWidth) -> Result<()> {
    let bound = (d_in as u128) * (1u128 << (act.bits() - 1)) * (1u128 << (weight.bits() - 1));
    if bound > i64::MAX as u128 {
        return Err(Error::numeric(format!(
            "accumulator overflow possible for d_in = {d_in}"
        )));
    }
    Ok(())
}

impl<T: Scalar> QuantLinear<T> {
    /// Fuse the transforms into `w` (`d_out × d_in`) and quantize it.
    pub fn assemble(w: &Tensor<T>, scheme: QuantScheme, params: LayerParams) -> Result<Self> {
        Self::assemble_inner(w, scheme, params, false)
    }

    /// As [`QuantLinear::assemble`] with `w_rot` already rotated by the
    /// parameters' rotation. Only rotate-then-scale schemes accept this.
    pub(crate) fn assemble_prerotated(w_rot: &Tensor<T>, scheme: QuantScheme, params: LayerParams) -> Result<Self> {
        if scheme.order != SmoothOrder::RotateThenScale {
            return Err(Error::invalid("prerotated weights need rotate-then-scale order"));
        }
        Self::assemble_inner(w_rot, scheme, params, true)
    }

    fn assemble_inner(w: &Tensor<T>, scheme: QuantScheme, params: LayerParams, prerotated: bool) -> Result<Self> {
        scheme.validate()?;
        let (out_features, in_features) = w.dims2()?;
        if scheme.variant.has_rotation() != params.rotation.is_some()
            || scheme.variant.has_smoothing() != params.smooth.is_some()
        {
            return Err(Error::invalid(format!(
                "parameters do not match the {} scheme",
                scheme.variant.name()
            )));
        }
        let groups = scheme.weight.group_count(out_features, in_features);
        if params.weight_delta_scale.len() != groups {
            return Err(Error::dim(format!(
                "{} step multipliers for {groups} weight groups",
                params.weight_delta_scale.len()
            )));
        }
        if scheme.act.mode == Mode::Static && params.act_delta.is_none() && !scheme.full_precision {
            return Err(Error::invalid("static activation quantization needs a calibrated range"));
        }
        check_accumulator(in_features, scheme.act.bits, scheme.weight.bits)?;
        let rot = if prerotated { None } else { params.rotation.as_ref() };
        let fused = fuse_weights(w, rot, params.smooth.as_ref(), scheme.order)?;
        let weights = if scheme.full_precision {
            WeightStore::Float(fused)
        } else {
            let base = crate::quantizer::group_deltas(&fused, scheme.weight)?;
            let deltas = base
                .iter()
                .zip(&params.weight_delta_scale)
                .map(|(&d, &m)| T::narrow(d.widen() * m))
                .collect();
            let q = quantize_with_deltas(&fused, scheme.weight, deltas)?;
            let wide = q.codes.iter().map(|&c| c as i16).collect();
            WeightStore::Quantized { q, wide }
        };
        Ok(Self {
            scheme,
            in_features,
            out_features,
            params,
            weights,
        })
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn rotation(&self) -> Option<&RotationOp> {
        self.params.rotation.as_ref()
    }

    pub fn smooth(&self) -> Option<&SmoothScale> {
        self.params.smooth.as_ref()
    }

    /// Quantized weight block, `None` for full-precision layers.
    pub fn weight_codes(&self) -> Option<&QuantizedTensor<T>> {
        match &self.weights {
            WeightStore::Quantized { q, .. } => Some(q),
            WeightStore::Float(_) => None,
        }
    }

    /// Rebuild from stored parts (used when loading model files).
    pub fn from_stored(
        scheme: QuantScheme,
        params: LayerParams,
        q: QuantizedTensor<T>,
    ) -> Result<Self> {
        scheme.validate()?;
        q.validate()?;
        let wide = q.codes.iter().map(|&c| c as i16).collect();
        Ok(Self {
            scheme,
            in_features: q.cols(),
            out_features: q.rows(),
            params,
            weights: WeightStore::Quantized { q, wide },
        })
    }

    /// Online transform of `x` in place, row by row.
    fn transform_in_place(&self, data: &mut [T]) {
        let rot = self.params.rotation.as_ref();
        let sc = self.params.smooth.as_ref();
        for row in data.chunks_exact_mut(self.in_features) {
            match self.scheme.order {
                SmoothOrder::RotateThenScale => {
                    if let Some(r) = rot {
                        r.rotate_row(row);
                    }
                    if let Some(s) = sc {
                        scale_row(row, s.c_hat(), true);
                    }
                }
                SmoothOrder::ScaleThenRotate => {
                    if let Some(s) = sc {
                        scale_row(row, s.c_hat(), true);
                    }
                    if let Some(r) = rot {
                        r.rotate_row(row);
                    }
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (m, k) = x.dims2()?;
        if k != self.in_features {
            return Err(Error::dim(format!(
                "layer expects {} input features, got {k}",
                self.in_features
            )));
        }
        Ok(m)
    }

    /// Transformed activations before quantization.
    pub fn transform_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.check_input(x)?;
        let mut data = x.data().to_vec();
        self.transform_in_place(&mut data);
        Tensor::new(vec![m, self.in_features], data)
    }

    /// Transform and quantize activations.
    pub fn quantize_input(&self, x: &Tensor<T>) -> Result<QuantizedActs<T>> {
        let m = self.check_input(x)?;
        let mut data = x.data().to_vec();
        self.transform_in_place(&mut data);
        self.quantize_transformed(m, data)
    }

    /// `x` after the rotation alone, when the rotation is applied before the
    /// scaling. Pass the result to [`Self::forward_prerotated`].
    pub fn prerotate(&self, x: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let rot = match (&self.params.rotation, self.scheme.order) {
            (Some(r), SmoothOrder::RotateThenScale) => r,
            _ => return Ok(None),
        };
        let m = self.check_input(x)?;
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(self.in_features) {
            rot.rotate_row(row);
        }
        Ok(Some(Tensor::new(vec![m, self.in_features], data)?))
    }

    /// Same as [`Self::forward_quantized`] on the input whose
    /// [`Self::prerotate`] result is `xr`.
    pub fn forward_prerotated(&self, xr: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.check_input(xr)?;
        if let (WeightStore::Quantized { q, wide }, Mode::Dynamic, Granularity::PerRow) =
            (&self.weights, self.scheme.act.mode, self.scheme.act.granularity)
        {
            return Ok(integer_matmul(&self.quantize_rows_scaled(m, xr.data())?, wide, q));
        }
        let mut data = xr.data().to_vec();
        if let Some(s) = &self.params.smooth {
            for row in data.chunks_exact_mut(self.in_features) {
                scale_row(row, s.c_hat(), true);
            }
        }
        match &self.weights {
            WeightStore::Float(w) => matmul(&Tensor::new(vec![m, self.in_features], data)?, w),
            WeightStore::Quantized { q, wide } => {
                Ok(integer_matmul(&self.quantize_transformed(m, data)?, wide, q))
            }
        }
    }

    /// Integer forward pass on already quantized activations.
    pub fn forward_acts(&self, acts: &QuantizedActs<T>) -> Result<Tensor<T>> {
        if acts.cols != self.in_features {
            return Err(Error::dim(format!(
                "layer expects {} input features, got {}",
                self.in_features, acts.cols
            )));
        }
        match &self.weights {
            WeightStore::Quantized { q, wide } => Ok(integer_matmul(acts, wide, q)),
            WeightStore::Float(_) => Err(Error::invalid("full-precision layer has no integer path")),
        }
    }

    /// Per-row dynamic quantization of rotated rows, dividing by the
    /// smoothing factors on the way.
    fn quantize_rows_scaled(&self, m: usize, data: &[T]) -> Result<QuantizedActs<T>> {
        let k = self.in_features;
        let bits = self.scheme.act.bits;
        let mut codes = vec![0i16; m * k];
        let mut deltas = Vec::with_capacity(m);
        let mut buf = vec![T::zero(); k];
        for (row, out) in data.chunks_exact(k).zip(codes.chunks_exact_mut(k)) {
            buf.copy_from_slice(row);
            if let Some(s) = &self.params.smooth {
                scale_row(&mut buf, s.c_hat(), true);
            }
            let mx = buf.iter().fold(0.0f64, |a, v| a.max(v.widen().abs()));
            let d = T::narrow(delta_from_max(mx, bits));
            if !d.is_finite() {
                return Err(Error::numeric(format!("activation step {d}")));
            }
            for (c, &v) in out.iter_mut().zip(&buf) {
                *c = quantize_value(v, d, bits) as i16;
            }
            deltas.push(d);
        }
        Ok(QuantizedActs {
            rows: m,
            cols: k,
            codes,
            deltas,
        })
    }

    fn quantize_transformed(&self, m: usize, data: Vec<T>) -> Result<QuantizedActs<T>> {
        let k = self.in_features;
        let bits = self.scheme.act.bits;
        let deltas: Vec<T> = match (self.scheme.act.mode, self.scheme.act.granularity) {
            (Mode::Static, _) => {
                vec![T::narrow(self.params.act_delta.expect("validated at build")); m]
            }
            (Mode::Dynamic, Granularity::PerRow) => data
                .chunks_exact(k)
                .map(|r| {
                    let mx = r.iter().fold(0.0f64, |a, v| a.max(v.widen().abs()));
                    T::narrow(delta_from_max(mx, bits))
                })
                .collect(),
            (Mode::Dynamic, _) => {
                let mx = data.iter().fold(0.0f64, |a, v| a.max(v.widen().abs()));
                vec![T::narrow(delta_from_max(mx, bits)); m]
            }
        };
        if let Some(d) = deltas.iter().find(|d| !d.is_finite()) {
            return Err(Error::numeric(format!("activation step {d}")));
        }
        let mut codes = Vec::with_capacity(m * k);
        for (row, &d) in data.chunks_exact(k).zip(&deltas) {
            codes.extend(row.iter().map(|&v| quantize_value(v, d, bits) as i16));
        }
        Ok(QuantizedActs {
            rows: m,
            cols: k,
            codes,
            deltas,
        })
    }

    /// Integer-accumulation forward pass.
    pub fn forward_quantized(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (q, wide) = match &self.weights {
            WeightStore::Float(w) => {
                let xt = self.transform_input(x)?;
                return matmul(&xt, w);
            }
            WeightStore::Quantized { q, wide } => (q, wide),
        };
        let acts = self.quantize_input(x)?;
        Ok(integer_matmul(&acts, wide, q))
    }

    /// Quantize, dequantize back to floats, then multiply in floating point.
    /// Numerically equivalent to [`Self::forward_quantized`] up to rounding.
    pub fn forward_simulated(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let q = match &self.weights {
            WeightStore::Float(w) => return matmul(&self.transform_input(x)?, w),
            WeightStore::Quantized { q, .. } => q,
        };
        let acts = self.quantize_input(x)?;
        let deq: Vec<T> = acts
            .codes
            .chunks_exact(acts.cols)
            .zip(&acts.deltas)
            .flat_map(|(row, &d)| row.iter().map(move |&c| T::from_i16(c).unwrap() * d))
            .collect();
        let x_deq = Tensor::new(vec![acts.rows, acts.cols], deq)?;
        matmul(&x_deq, &q.dequantize())
    }
}

/// `out[i][j] = (Σ_t xq[i][t]·wq[j][t]) · Δx[i] · Δw[j]`.
pub(crate) fn integer_matmul<T: Scalar>(
    acts: &QuantizedActs<T>,
    wide: &[i16],
    q: &QuantizedTensor<T>,
) -> Tensor<T> {
    let (m, k, n) = (acts.rows, acts.cols, q.rows());
    let dw: Vec<f64> = (0..n).map(|j| q.delta_at(j, 0).widen()).collect();
    #[cfg(target_arch = "x86_64")]
    if k % 8 == 0 && k <= I32_CHUNK {
        let mut acc = vec![0i32; m * n];
        simd::dot_all(&acts.codes, wide, k, &mut acc);
        let mut out = vec![T::zero(); m * n];
        for ((o, row), dx) in out.chunks_exact_mut(n).zip(acc.chunks_exact(n)).zip(&acts.deltas) {
            let dx = dx.widen();
            for ((o, &a), &d) in o.iter_mut().zip(row).zip(&dw) {
                *o = T::narrow(a as f64 * dx * d);
            }
        }
        return Tensor::from_parts_unchecked(vec![m, n], out);
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let xr = &acts.codes[i * k..(i + 1) * k];
        let dx = acts.deltas[i].widen();
        for (j, &d) in dw.iter().enumerate() {
            let acc = dot_codes(xr, &wide[j * k..(j + 1) * k]);
            out.push(T::narrow(acc as f64 * dx * d));
        }
    }
    Tensor::from_parts_unchecked(vec![m, n], out)
}

/// Compute the scheme's rotation and smoothing from calibration activations,
/// then fuse and quantize `w`.
pub fn build_quant_linear<T: Scalar>(
    w: &Tensor<T>,
    calib_acts: &Tensor<T>,
    scheme: QuantScheme,
) -> Result<QuantLinear<T>> {
    let act_max = channel_max_abs(calib_acts)?;
    build_quant_linear_from_maxima(w, &act_max, calib_acts, scheme)
}

/// As [`build_quant_linear`], with the raw per-channel activation maxima
/// supplied (running maxima over a calibration set). Only the static range
/// for static activation quantization still reads `calib_acts`.
pub fn build_quant_linear_from_maxima<T: Scalar>(
    w: &Tensor<T>,
    act_max: &[f64],
    calib_acts: &Tensor<T>,
    scheme: QuantScheme,
) -> Result<QuantLinear<T>> {
    scheme.validate()?;
    let (d_out, d_in) = w.dims2()?;
    let (_, k) = calib_acts.dims2()?;
    if k != d_in || act_max.len() != d_in {
        return Err(Error::dim(format!(
            "calibration activations have {k} columns, layer has {d_in} inputs"
        )));
    }
    let rotation = if scheme.variant.has_rotation() {
        Some(match scheme.rotation_seed {
            Some(seed) => RotationOp::random(d_in, seed)?,
            None => RotationOp::identity_signs(d_in)?,
        })
    } else {
        None
    };
    let smooth = if scheme.variant.has_smoothing() {
        let (a_max, w_max) = match (&rotation, scheme.order) {
            (Some(rot), SmoothOrder::RotateThenScale) => {
                let xr = transform_activations(calib_acts, Some(rot), None, scheme.order)?;
                let wr = fuse_weights(w, Some(rot), None, scheme.order)?;
                (channel_max_abs(&xr)?, channel_max_abs(&wr)?)
            }
            _ => (act_max.to_vec(), channel_max_abs(w)?),
        };
        Some(smooth_scale_from_maxima(&a_max, &w_max, scheme.alpha)?)
    } else {
        None
    };
    let mut params = LayerParams {
        rotation,
        smooth,
        weight_delta_scale: vec![1.0; scheme.weight.group_count(d_out, d_in)],
        act_delta: None,
    };
    if scheme.act.mode == Mode::Static {
        let probe = QuantLinear::assemble(
            w,
            QuantScheme {
                full_precision: true,
                ..scheme
            },
            params.clone(),
        )?;
        let xt = probe.transform_input(calib_acts)?;
        params.act_delta = Some(delta_from_max(xt.max_abs(), scheme.act.bits));
    }
    QuantLinear::assemble(w, scheme, params)
}

/// Full-precision output `X Wᵀ`.
pub fn forward_reference<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(x, w)
}

/// Mean squared difference between the reference and quantized outputs.
pub fn quant_layer_loss<T: Scalar>(layer: &QuantLinear<T>, w: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    mse(&forward_reference(w, x)?, &layer.forward_quantized(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gen_gaussian, gen_heavy_tailed, SeededRng};
    use crate::tensor::relative_error;

    const ALL_BITS: [BitWidth; 3] = [BitWidth::Int4, BitWidth::Int6, BitWidth::Int8];

    fn scheme(v: Variant, b: BitWidth) -> QuantScheme {
        QuantScheme::new(v, b, b)
    }

    #[test]
    fn naive_on_grid_is_exact() {
        // Small integers with the max of every row equal to 127 sit on the
        // 8-bit grid with step 1.
        let w = Tensor::from_rows(&[vec![127.0, -3.0, 5.0, 0.0], vec![2.0, 127.0, -1.0, 9.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![127.0, 1.0, 2.0, -4.0], vec![-127.0, 0.0, 7.0, 3.0]]).unwrap();
        let layer = build_quant_linear(&w, &x, scheme(Variant::Naive, BitWidth::Int8)).unwrap();
        assert_eq!(layer.forward_quantized(&x).unwrap(), forward_reference(&w, &x).unwrap());
        assert_eq!(quant_layer_loss(&layer, &w, &x).unwrap(), 0.0);
    }

    #[test]
    fn reference_is_matmul() {
        let mut rng = SeededRng::new(1);
        let w: Tensor = gen_gaussian(&mut rng, &[6, 8]).unwrap();
        let x: Tensor = gen_gaussian(&mut rng, &[3, 8]).unwrap();
        assert_eq!(forward_reference(&w, &x).unwrap(), matmul(&x, &w).unwrap());
        let eye = Tensor::identity(8).unwrap();
        assert_eq!(forward_reference(&eye, &x).unwrap(), x);
    }

    #[test]
    fn integer_path_matches_float_simulation() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let w: Tensor = gen_gaussian(&mut rng, &[24, 64]).unwrap();
            let x: Tensor = gen_heavy_tailed(&mut rng, 30, 64, &[1, 9], 20.0).unwrap();
            for v in Variant::ALL {
                for b in ALL_BITS {
                    let layer = build_quant_linear(&w, &x, scheme(v, b)).unwrap();
                    let a = layer.forward_quantized(&x).unwrap();
                    let s = layer.forward_simulated(&x).unwrap();
                    assert!(relative_error(&a, &s).unwrap() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let mut rng = SeededRng::new(2);
        let w: Tensor = gen_gaussian(&mut rng, &[8, 16]).unwrap();
        let x: Tensor = gen_gaussian(&mut rng, &[3, 16]).unwrap();
        let layer = build_quant_linear(&w, &x, scheme(Variant::Dsfq, BitWidth::Int4)).unwrap();
        let dup = Tensor::vstack(&[x.clone(), x.slice_rows(1, 2).unwrap()]).unwrap();
        let y = layer.forward_quantized(&dup).unwrap();
        assert_eq!(y.row(1), y.row(3));
        assert_eq!(y.slice_rows(0, 3).unwrap(), layer.forward_quantized(&x).unwrap());
    }

    #[test]
    fn scheme_degeneracies() {
        let mut rng = SeededRng::new(3);
        let w: Tensor = gen_gaussian(&mut rng, &[16, 32]).unwrap();
        let x: Tensor = gen_heavy_tailed(&mut rng, 40, 32, &[0, 7], 20.0).unwrap();
        let b = BitWidth::Int4;

        // Unit smoothing: DSFQ collapses to rotation only.
        let rot_only = build_quant_linear(&w, &x, scheme(Variant::RotationOnly, b).with_rotation_seed(None)).unwrap();
        let dsfq = QuantLinear::assemble(
            &w,
            scheme(Variant::Dsfq, b),
            LayerParams {
                rotation: Some(RotationOp::identity_signs(32).unwrap()),
                smooth: Some(SmoothScale::ones(32)),
                weight_delta_scale: vec![1.0; 16],
                act_delta: None,
            },
        )
        .unwrap();
        assert_eq!(rot_only.weight_codes().unwrap().codes, dsfq.weight_codes().unwrap().codes);
        assert_eq!(rot_only.forward_quantized(&x).unwrap(), dsfq.forward_quantized(&x).unwrap());

        // DSFQ smoothing factors come from rotated statistics.
        let dsfq = build_quant_linear(&w, &x, scheme(Variant::Dsfq, b)).unwrap();
        let rot = dsfq.rotation().unwrap();
        let expected = crate::smoothing::compute_smooth_scale(
            &crate::rotation::apply_rotation(&x, rot).unwrap(),
            &crate::rotation::apply_rotation(&w, rot).unwrap(),
            0.5,
        )
        .unwrap();
        assert_eq!(dsfq.smooth().unwrap(), &expected);
    }

    #[test]
    fn dsfq_beats_naive_on_heavy_tails() {
        let mut rng = SeededRng::new(4);
        let w: Tensor = gen_gaussian(&mut rng, &[32, 64]).unwrap();
        let calib: Tensor = gen_heavy_tailed(&mut rng, 64, 64, &[2, 20, 41, 60], 20.0).unwrap();
        let eval: Tensor = gen_heavy_tailed(&mut rng, 64, 64, &[2, 20, 41, 60], 20.0).unwrap();
        let loss = |v| {
            let l = build_quant_linear(&w, &calib, scheme(v, BitWidth::Int4)).unwrap();
            quant_layer_loss(&l, &w, &eval).unwrap()
        };
        assert!(loss(Variant::Dsfq) < loss(Variant::Naive));
    }

    #[test]
    fn loss_falls_with_bits() {
        let mut rng = SeededRng::new(5);
        let w: Tensor = gen_gaussian(&mut rng, &[16, 64]).unwrap();
        let x: Tensor = gen_heavy_tailed(&mut rng, 48, 64, &[5], 20.0).unwrap();
        let losses: Vec<f64> = ALL_BITS
            .iter()
            .map(|&b| {
                let l = build_quant_linear(&w, &x, scheme(Variant::Dsfq, b)).unwrap();
                quant_layer_loss(&l, &w, &x).unwrap()
            })
            .collect();
        assert!(losses[2] <= losses[1] && losses[1] <= losses[0], "{losses:?}");
    }

    #[test]
    fn full_precision_is_lossless_up_to_rounding() {
        let mut rng = SeededRng::new(6);
        let w: Tensor = gen_gaussian(&mut rng, &[8, 16]).unwrap();
        let x: Tensor = gen_gaussian(&mut rng, &[5, 16]).unwrap();
        let l = build_quant_linear(&w, &x, QuantScheme::full_precision()).unwrap();
        assert_eq!(l.forward_quantized(&x).unwrap(), matmul(&x, &w).unwrap());
    }

    #[test]
    fn static_per_tensor_activations() {
        let mut rng = SeededRng::new(7);
        let w: Tensor = gen_gaussian(&mut rng, &[8, 16]).unwrap();
        let x: Tensor = gen_gaussian(&mut rng, &[5, 16]).unwrap();
        let mut s = scheme(Variant::Naive, BitWidth::Int8);
        s.act = QuantSpec::new(BitWidth::Int8, Granularity::PerTensor, Mode::Static);
        let l = build_quant_linear(&w, &x, s).unwrap();
        let expected = x.max_abs() / 127.0;
        assert_eq!(l.params().act_delta, Some(expected));
        let acts = l.quantize_input(&x).unwrap();
        assert!(acts.deltas.iter().all(|&d| d == expected));

        s.act = QuantSpec::new(BitWidth::Int8, Granularity::PerRow, Mode::Static);
        assert!(build_quant_linear(&w, &x, s).is_err());
        s.act = QuantSpec::new(BitWidth::Int8, Granularity::PerColumn, Mode::Dynamic);
        assert!(build_quant_linear(&w, &x, s).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let w: Tensor = Tensor::zeros(&[4, 12]).unwrap();
        let x: Tensor = Tensor::zeros(&[3, 12]).unwrap();
        assert!(matches!(
            build_quant_linear(&w, &x, scheme(Variant::RotationOnly, BitWidth::Int8)),
            Err(Error::UnsupportedDimension(12))
        ));
        let l = build_quant_linear(&w, &x, scheme(Variant::Naive, BitWidth::Int8)).unwrap();
        assert!(l.forward_quantized(&Tensor::zeros(&[3, 8]).unwrap()).is_err());
        let x8: Tensor = Tensor::zeros(&[3, 8]).unwrap();
        assert!(build_quant_linear(&w, &x8, scheme(Variant::Naive, BitWidth::Int8)).is_err());
    }

    #[test]
    fn overflow_guard() {
        assert!(check_accumulator(1 << 16, BitWidth::Int8, BitWidth::Int8).is_ok());
        assert!(check_accumulator(usize::MAX >> 1, BitWidth::Int8, BitWidth::Int8).is_err());
    }

    #[test]
    fn fused_and_unfused_paths_agree() {
        let mut rng = SeededRng::new(8);
        let w: Tensor = gen_gaussian(&mut rng, &[16, 32]).unwrap();
        let x: Tensor = gen_heavy_tailed(&mut rng, 20, 32, &[3], 20.0).unwrap();
        let s = scheme(Variant::Dsfq, BitWidth::Int4);
        let fused = build_quant_linear(&w, &x, s).unwrap();
        let first = fused.forward_quantized(&x).unwrap();
        for _ in 0..100 {
            // Re-fusing from the raw weight on every call must not change
            // anything.
            let per_call = QuantLinear::assemble(&w, s, fused.params().clone()).unwrap();
            assert_eq!(per_call.forward_quantized(&x).unwrap(), first);
        }
    }

    #[test]
    fn integer_kernel_matches_scalar_sums() {
        let mut rng = SeededRng::new(11);
        for k in [1, 7, 8, 16, 24, 40, 64, 128] {
            for n in [1, 3, 4, 5, 9] {
                let m = 3;
                let codes: Vec<i8> = (0..n * k).map(|_| rng.below(16) as i8 - 8).collect();
                let deltas: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
                let q = QuantizedTensor {
                    shape: [n, k],
                    codes: codes.clone(),
                    deltas: deltas.clone(),
                    spec: QuantSpec::weight(BitWidth::Int4),
                };
                let wide: Vec<i16> = codes.iter().map(|&c| c as i16).collect();
                let acts = QuantizedActs {
                    rows: m,
                    cols: k,
                    codes: (0..m * k).map(|_| rng.below(16) as i16 - 8).collect(),
                    deltas: vec![0.5, 1.0, 2.0],
                };
                let out = integer_matmul(&acts, &wide, &q);
                for i in 0..m {
                    for j in 0..n {
                        let acc: i64 = (0..k)
                            .map(|t| acts.codes[i * k + t] as i64 * codes[j * k + t] as i64)
                            .sum();
                        let want = acc as f64 * acts.deltas[i] * deltas[j];
                        assert_eq!(out.get(i, j), want, "k={k} n={n} ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn cached_entry_points_match_forward() {
        let mut rng = SeededRng::new(12);
        let w: Tensor = gen_gaussian(&mut rng, &[16, 32]).unwrap();
        let x: Tensor = gen_heavy_tailed(&mut rng, 20, 32, &[3], 20.0).unwrap();
        for v in Variant::ALL {
            let layer = build_quant_linear(&w, &x, scheme(v, BitWidth::Int4)).unwrap();
            let want = layer.forward_quantized(&x).unwrap();
            let acts = layer.quantize_input(&x).unwrap();
            assert_eq!(layer.forward_acts(&acts).unwrap(), want);
            match layer.prerotate(&x).unwrap() {
                Some(xr) => assert_eq!(layer.forward_prerotated(&xr).unwrap(), want),
                None => assert!(!v.has_rotation()),
            }
        }
    }
}
