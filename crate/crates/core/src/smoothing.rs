//! Channel smoothing in the rotated space.
//!
//! With `Ĥ` orthonormal and `ĉ > 0`,
//! `X Wᵀ = (X Ĥ diag(ĉ)⁻¹) (W Ĥ diag(ĉ))ᵀ`: activations are rotated and
//! divided by `ĉ` online, weights are rotated and multiplied by `ĉ` once,
//! offline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{apply_rotation, RotationOp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 1e4;

/// Per-input-channel smoothing factors `ĉ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothScale {
    c_hat: Vec<f64>,
    alpha: f64,
}

impl SmoothScale {
    pub fn new(c_hat: Vec<f64>, alpha: f64) -> Result<Self> {
        if let Some(c) = c_hat.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
            return Err(Error::numeric(format!("smoothing factor must be positive, got {c}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { c_hat, alpha })
    }

    pub fn ones(dim: usize) -> Self {
        Self {
            c_hat: vec![1.0; dim],
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn c_hat(&self) -> &[f64] {
        &self.c_hat
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.c_hat.len()
    }

    /// Copy with `ĉ[range]` multiplied by `factor`, clipped to the usual
    /// bounds.
    pub fn scaled_range(&self, range: std::ops::Range<usize>, factor: f64) -> Self {
        let mut c_hat = self.c_hat.clone();
        for c in &mut c_hat[range] {
            *c = (*c * factor).clamp(SCALE_MIN, SCALE_MAX);
        }
        Self {
            c_hat,
            alpha: self.alpha,
        }
    }
}

/// Which transform comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothOrder {
    #[default]
    RotateThenScale,
    ScaleThenRotate,
}

/// Column-wise max |x|.
pub fn channel_max_abs<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (r, c) = x.dims2()?;
    let mut max = vec![0.0f64; c];
    for i in 0..r {
        for (m, v) in max.iter_mut().zip(x.row(i)) {
            *m = m.max(v.widen().abs());
        }
    }
    Ok(max)
}

/// `ĉ_i = max|X_i|^α / max|W_i|^(1−α)` from per-channel maxima. Channels where
/// either maximum is zero get 1; results are clipped to
/// `[SCALE_MIN, SCALE_MAX]`.
pub fn smooth_scale_from_maxima(act_max: &[f64], weight_max: &[f64], alpha: f64) -> Result<SmoothScale> {
    if act_max.len() != weight_max.len() {
        return Err(Error::dim(format!(
            "{} activation channels vs {} weight channels",
            act_max.len(),
            weight_max.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let c_hat = act_max
        .iter()
        .zip(weight_max)
        .map(|(&a, &w)| {
            if a > 0.0 && w > 0.0 {
                (a.powf(alpha) / w.powf(1.0 - alpha)).clamp(SCALE_MIN, SCALE_MAX)
            } else {
                1.0
            }
        })
        .collect();
    SmoothScale::new(c_hat, alpha)
}

/// Smoothing factors from already-rotated activations `X Ĥ` (`m × d`) and
/// weights `W Ĥ` (`n × d`).
pub fn compute_smooth_scale<T: Scalar>(
    x_rot: &Tensor<T>,
    w_rot: &Tensor<T>,
    alpha: f64,
) -> Result<SmoothScale> {
    let (_, dx) = x_rot.dims2()?;
    let (_, dw) = w_rot.dims2()?;
    if dx != dw {
        return Err(Error::dim(format!("{dx} activation columns vs {dw} weight columns")));
    }
    smooth_scale_from_maxima(&channel_max_abs(x_rot)?, &channel_max_abs(w_rot)?, alpha)
}

fn scale_columns<T: Scalar>(x: &Tensor<T>, factors: &[f64], divide: bool) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if factors.len() != c {
        return Err(Error::dim(format!("{} factors for {c} columns", factors.len())));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(c) {
        scale_row(row, factors, divide);
    }
    Tensor::new(vec![r, c], data)
}

#[inline]
pub(crate) fn scale_row<T: Scalar>(row: &mut [T], factors: &[f64], divide: bool) {
    for (v, &f) in row.iter_mut().zip(factors) {
        *v = if divide {
            T::narrow(v.widen() / f)
        } else {
            T::narrow(v.widen() * f)
        };
    }
}

fn check(dim: usize, rot: Option<&RotationOp>, sc: Option<&SmoothScale>) -> Result<()> {
    if let Some(r) = rot {
        if r.dim() != dim {
            return Err(Error::dim(format!("rotation dim {} vs {dim} channels", r.dim())));
        }
    }
    if let Some(s) = sc {
        if s.dim() != dim {
            return Err(Error::dim(format!("{} smoothing factors vs {dim} channels", s.dim())));
        }
    }
    Ok(())
}

/// Online activation transform `X Ĥ diag(ĉ)⁻¹` (or `X diag(ĉ)⁻¹ Ĥ`).
pub fn transform_activations<T: Scalar>(
    x: &Tensor<T>,
    rot: Option<&RotationOp>,
    sc: Option<&SmoothScale>,
    order: SmoothOrder,
) -> Result<Tensor<T>> {
    check(x.dims2()?.1, rot, sc)?;
    let mut out = x.clone();
    let rotate = |t: &Tensor<T>| match rot {
        Some(r) => apply_rotation(t, r),
        None => Ok(t.clone()),
    };
    let scale = |t: &Tensor<T>| match sc {
        Some(s) => scale_columns(t, s.c_hat(), true),
        None => Ok(t.clone()),
    };
    match order {
        SmoothOrder::RotateThenScale => {
            out = rotate(&out)?;
            out = scale(&out)?;
        }
        SmoothOrder::ScaleThenRotate => {
            out = scale(&out)?;
            out = rotate(&out)?;
        }
    }
    Ok(out)
}

/// Offline weight transform `W Ĥ diag(ĉ)` (or `W diag(ĉ) Ĥ`), with `W`
/// stored `d_out × d_in`.
pub fn fuse_weights<T: Scalar>(
    w: &Tensor<T>,
    rot: Option<&RotationOp>,
    sc: Option<&SmoothScale>,
    order: SmoothOrder,
) -> Result<Tensor<T>> {
    check(w.dims2()?.1, rot, sc)?;
    let rotate = |t: &Tensor<T>| match rot {
        Some(r) => apply_rotation(t, r),
        None => Ok(t.clone()),
    };
    let scale = |t: &Tensor<T>| match sc {
        Some(s) => scale_columns(t, s.c_hat(), false),
        None => Ok(t.clone()),
    };
    match order {
        SmoothOrder::RotateThenScale => scale(&rotate(w)?),
        SmoothOrder::ScaleThenRotate => rotate(&scale(w)?),
    }
}

/// Rotate-then-scale weight fusion, computed once ahead of inference.
pub fn fuse_offline<T: Scalar>(w: &Tensor<T>, rot: &RotationOp, sc: &SmoothScale) -> Result<Tensor<T>> {
    fuse_weights(w, Some(rot), Some(sc), SmoothOrder::RotateThenScale)
}

/// `(X Ĥ diag(ĉ)⁻¹, W Ĥ diag(ĉ))`.
pub fn apply_dual_smooth<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    rot: &RotationOp,
    sc: &SmoothScale,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, dx) = x.dims2()?;
    let (_, dw) = w.dims2()?;
    if dx != dw {
        return Err(Error::dim(format!("{dx} activation columns vs {dw} weight columns")));
    }
    let xs = transform_activations(x, Some(rot), Some(sc), SmoothOrder::RotateThenScale)?;
    Ok((xs, fuse_offline(w, rot, sc)?))
}
