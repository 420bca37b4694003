use crate::error::{Error, Result};
use crate::qlinear::QuantLinear;
use crate::rng::SeededRng;
use crate::tensor::{matmul, Tensor};

use super::config::ToyModelConfig;

const NORM_EPS: f64 = 1e-6;
/// Pre-activation offset of the amplifier units: only tokens whose designated
/// channel is well above the typical normalized magnitude fire.
const AMPLIFIER_THRESHOLD: f64 = 2.0;
const QKV_GAIN: f64 = 0.4;

/// Anything that maps `m × d_in` activations to `m × d_out`.
pub trait Linear {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

/// A raw `d_out × d_in` weight.
impl Linear for Tensor {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        matmul(x, self)
    }
}

impl Linear for QuantLinear<f64> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_quantized(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Attention restricted to tokens of the same frame.
    Frame,
    /// Attention over every token of the scene.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub kind: BlockKind,
    pub norm1: Vec<f64>,
    /// Offset added after both normalizations.
    pub norm_bias: Vec<f64>,
    /// `3d × d`, rows are q, k, v outputs.
    pub qkv: Tensor,
    pub proj: Tensor,
    pub norm2: Vec<f64>,
    pub fc1: Tensor,
    /// Kept in floating point and added after the fc1 product.
    pub fc1_bias: Vec<f64>,
    pub fc2: Tensor,
}

/// Every intermediate of one block pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Tensor,
    /// Normalized input, fed to `qkv`.
    pub n1: Tensor,
    pub qkv_out: Tensor,
    /// Attention output, fed to `proj`.
    pub attn: Tensor,
    pub h: Tensor,
    /// Normalized `h`, fed to `fc1`.
    pub n2: Tensor,
    /// GELU output, fed to `fc2`.
    pub g: Tensor,
    pub out: Tensor,
}

impl BlockTrace {
    /// Input of linear `index` (0 qkv, 1 proj, 2 fc1, 3 fc2).
    pub fn linear_input(&self, index: usize) -> &Tensor {
        match index {
            0 => &self.n1,
            1 => &self.attn,
            2 => &self.n2,
            _ => &self.g,
        }
    }
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Result<Tensor> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| std * rng.gaussian()).collect())
}

fn gains(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| (1.0 + 0.1 * rng.gaussian()).max(0.5)).collect()
}

impl BlockWeights {
    pub(super) fn random(
        cfg: &ToyModelConfig,
        index: usize,
        outlier_channels: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (d, h) = (cfg.d, cfg.hidden());
        let kind = if index % 2 == 0 {
            BlockKind::Frame
        } else {
            BlockKind::Global
        };
        let norm1 = gains(rng, d);
        let mut norm_bias = vec![0.0; d];
        for &c in outlier_channels {
            norm_bias[c] = f64::from(rng.sign()) * cfg.norm_bias;
        }
        let qkv = gaussian_matrix(rng, 3 * d, d, QKV_GAIN / (d as f64).sqrt())?;
        let proj = gaussian_matrix(rng, d, d, 0.5 / (d as f64).sqrt())?;
        let norm2 = gains(rng, d);
        let fc1 = gaussian_matrix(rng, h, d, 1.0 / (d as f64).sqrt())?;
        let fc2 = gaussian_matrix(rng, d, h, 0.5 / (h as f64).sqrt())?;
        let mut fc1_bias = vec![0.0; h];

        // Units 0 and 1 read ±channel c and write it back with the same sign,
        // above a threshold, so large values on c keep growing.
        let (mut fc1, mut fc2) = (fc1.into_data(), fc2.into_data());
        if let Some(&c) = outlier_channels.first() {
            for (unit, sign) in [(0usize, 1.0), (1, -1.0)] {
                for k in 0..d {
                    fc1[unit * d + k] = if k == c { sign } else { 0.0 };
                    fc2[k * h + unit] = if k == c { sign * cfg.amplifier_gain } else { 0.0 };
                }
                fc1_bias[unit] = -AMPLIFIER_THRESHOLD - sign * norm_bias[c];
            }
        }
        Ok(Self {
            kind,
            norm1,
            norm_bias,
            qkv,
            proj,
            norm2,
            fc1: Tensor::matrix(h, d, fc1)?,
            fc1_bias,
            fc2: Tensor::matrix(d, h, fc2)?,
        })
    }

    /// The four raw linear weights in execution order.
    pub fn linears(&self) -> [&Tensor; 4] {
        [&self.qkv, &self.proj, &self.fc1, &self.fc2]
    }

    pub fn forward_fp(&self, cfg: &ToyModelConfig, x: &Tensor) -> Result<BlockTrace> {
        let [a, b, c, d] = self.linears();
        self.forward_with(cfg, x, [a, b, c, d])
    }

    pub fn forward_with(
        &self,
        cfg: &ToyModelConfig,
        x: &Tensor,
        lins: [&dyn Linear; 4],
    ) -> Result<BlockTrace> {
        let n1 = rms_norm(x, &self.norm1, &self.norm_bias)?;
        let qkv_out = lins[0].apply(&n1)?;
        let attn = attention(cfg, self.kind, &qkv_out)?;
        let h = add(x, &lins[1].apply(&attn)?)?;
        let n2 = rms_norm(&h, &self.norm2, &self.norm_bias)?;
        let g = self.mlp_act(&lins[2].apply(&n2)?)?;
        let out = add(&h, &lins[3].apply(&g)?)?;
        Ok(BlockTrace {
            input: x.clone(),
            n1,
            qkv_out,
            attn,
            h,
            n2,
            g,
            out,
        })
    }

    /// Block output when linears `from..` are replaced by `lins[from..]`,
    /// reusing `trace` for everything computed before linear `from`.
    pub fn resume(
        &self,
        cfg: &ToyModelConfig,
        trace: &BlockTrace,
        from: usize,
        lins: [&dyn Linear; 4],
    ) -> Result<Tensor> {
        let mut attn_owned = None;
        if from == 0 {
            attn_owned = Some(attention(cfg, self.kind, &lins[0].apply(&trace.n1)?)?);
        }
        let mut h_owned = None;
        if from <= 1 {
            let attn = attn_owned.as_ref().unwrap_or(&trace.attn);
            h_owned = Some(add(&trace.input, &lins[1].apply(attn)?)?);
        }
        let h = h_owned.as_ref().unwrap_or(&trace.h);
        let mut g_owned = None;
        if from <= 2 {
            let n2 = rms_norm(h, &self.norm2, &self.norm_bias)?;
            g_owned = Some(self.mlp_act(&lins[2].apply(&n2)?)?);
        }
        let g = g_owned.as_ref().unwrap_or(&trace.g);
        add(h, &lins[3].apply(g)?)
    }

    fn mlp_act(&self, u: &Tensor) -> Result<Tensor> {
        let (r, c) = u.dims2()?;
        let mut data = u.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(&self.fc1_bias) {
                *v = gelu(*v + b);
            }
        }
        finite(vec![r, c], data)
    }
}

fn finite(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(shape, data).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("forward diverged: {m}")),
        e => e,
    })
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    finite(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Per-token RMS normalization with a per-channel gain and offset.
pub fn rms_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if gain.len() != c || bias.len() != c {
        return Err(Error::dim(format!("{} gains for {c} channels", gain.len())));
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        out.extend(row.iter().zip(gain).zip(bias).map(|((v, g), b)| v * inv * g + b));
    }
    finite(vec![r, c], out)
}

/// Multi-head softmax attention over `qkv` (`rows × 3d`). Frame blocks attend
/// within groups of `s + 5` rows, global blocks within whole scenes.
pub fn attention(cfg: &ToyModelConfig, kind: BlockKind, qkv: &Tensor) -> Result<Tensor> {
    let (rows, c) = qkv.dims2()?;
    let d = cfg.d;
    if c != 3 * d {
        return Err(Error::dim(format!("qkv has {c} columns, expected {}", 3 * d)));
    }
    let group = match kind {
        BlockKind::Frame => cfg.tokens_per_frame(),
        BlockKind::Global => cfg.tokens_per_scene(),
    };
    if rows % group != 0 {
        return Err(Error::dim(format!("{rows} tokens do not split into groups of {group}")));
    }
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let data = qkv.data();
    let mut out = vec![0.0; rows * d];
    let mut scores = vec![0.0; group];
    for g0 in (0..rows).step_by(group) {
        for head in 0..cfg.heads {
            let (qo, ko, vo) = (head * hd, d + head * hd, 2 * d + head * hd);
            for i in g0..g0 + group {
                let q = &data[i * c + qo..i * c + qo + hd];
                let mut max = f64::NEG_INFINITY;
                for (t, j) in (g0..g0 + group).enumerate() {
                    let k = &data[j * c + ko..j * c + ko + hd];
                    let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[t] = s;
                    max = max.max(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let o = &mut out[i * d + head * hd..i * d + head * hd + hd];
                for (t, j) in (g0..g0 + group).enumerate() {
                    let p = scores[t] / denom;
                    let v = &data[j * c + vo..j * c + vo + hd];
                    for (acc, vv) in o.iter_mut().zip(v) {
                        *acc += p * vv;
                    }
                }
            }
        }
    }
    finite(vec![rows, d], out)
}
