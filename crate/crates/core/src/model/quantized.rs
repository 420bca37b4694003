use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{decode_quantized, encode_quantized, quantized_block_len, Cursor};
use crate::qlinear::{build_quant_linear, LayerParams, QuantLinear, QuantScheme, Variant};
use crate::rng::derive_seed;
use crate::rotation::RotationOp;
use crate::smoothing::SmoothScale;
use crate::tensor::{mse, Tensor};

use super::block::{BlockTrace, BlockWeights, Linear};
use super::config::ToyModelConfig;
use super::scene::Scene;
use super::ToyModel;

/// Names of the four linears of a block, in execution order.
pub const LINEAR_NAMES: [&str; 4] = ["qkv", "proj", "fc1", "fc2"];

const QMDL_MAGIC: &[u8; 4] = b"QMDL";
const QMDL_VERSION: u8 = 1;

/// Scheme for linear `lin` of block `block`: the rotation seed is derived per
/// layer so every layer gets its own signs.
pub fn layer_scheme(scheme: &QuantScheme, block: usize, lin: usize) -> QuantScheme {
    let index = (block * LINEAR_NAMES.len() + lin) as u64;
    scheme.with_rotation_seed(scheme.rotation_seed.map(|s| derive_seed(s, index)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub linears: Vec<QuantLinear>,
}

impl QuantBlock {
    /// Build each linear of `weights` from its calibration input.
    pub fn build(
        weights: &BlockWeights,
        inputs: [&Tensor; 4],
        scheme: &QuantScheme,
        block: usize,
    ) -> Result<Self> {
        let linears = weights
            .linears()
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(i, (w, x))| build_quant_linear(w, x, layer_scheme(scheme, block, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { linears })
    }

    pub fn lins(&self) -> [&dyn Linear; 4] {
        [
            &self.linears[0],
            &self.linears[1],
            &self.linears[2],
            &self.linears[3],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub scheme: QuantScheme,
    pub blocks: Vec<QuantBlock>,
}

/// Inputs of every linear of every block over a calibration set, from a
/// full-precision forward pass.
#[derive(Debug, Clone)]
pub struct CalibrationActivations {
    pub traces: Vec<BlockTrace>,
}

impl CalibrationActivations {
    pub fn collect(model: &ToyModel, calib_set: &[Scene]) -> Result<Self> {
        if calib_set.is_empty() {
            return Err(Error::invalid("empty calibration set"));
        }
        let mut cur = model.register_batch(calib_set)?;
        let mut traces = Vec::with_capacity(model.blocks().len());
        for block in model.blocks() {
            let trace = block.forward_fp(model.config(), &cur)?;
            cur = trace.out.clone();
            traces.push(trace);
        }
        Ok(Self { traces })
    }
}

/// Replace every linear by a quantized one built from full-precision
/// calibration activations.
pub fn quantize_model(model: &ToyModel, calib_set: &[Scene], scheme: QuantScheme) -> Result<QuantizedModel> {
    quantize_from_activations(model, &CalibrationActivations::collect(model, calib_set)?, scheme)
}

/// As [`quantize_model`], reusing activations already collected.
pub fn quantize_from_activations(
    model: &ToyModel,
    acts: &CalibrationActivations,
    scheme: QuantScheme,
) -> Result<QuantizedModel> {
    if acts.traces.len() != model.blocks().len() {
        return Err(Error::dim(format!(
            "{} activation traces for {} blocks",
            acts.traces.len(),
            model.blocks().len()
        )));
    }
    let blocks = model
        .blocks()
        .iter()
        .zip(&acts.traces)
        .enumerate()
        .map(|(b, (w, t))| {
            let inputs = [0, 1, 2, 3].map(|i| t.linear_input(i));
            QuantBlock::build(w, inputs, &scheme, b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel { scheme, blocks })
}

impl ToyModel {
    /// Final features with every linear replaced by its quantized version.
    pub fn forward_quantized_tokens(&self, qmodel: &QuantizedModel, x: &Tensor) -> Result<Tensor> {
        if qmodel.blocks.len() != self.blocks.len() {
            return Err(Error::dim(format!(
                "quantized model has {} blocks, model has {}",
                qmodel.blocks.len(),
                self.blocks.len()
            )));
        }
        let mut cur = x.clone();
        for (block, qb) in self.blocks.iter().zip(&qmodel.blocks) {
            cur = block.forward_with(&self.cfg, &cur, qb.lins())?.out;
        }
        Ok(cur)
    }
}

/// Registered evaluation tokens and their full-precision features.
#[derive(Debug, Clone)]
pub struct EvalReference {
    scenes: usize,
    tokens: Tensor,
    features: Tensor,
}

impl EvalReference {
    pub fn new(model: &ToyModel, eval_set: &[Scene]) -> Result<Self> {
        if eval_set.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let tokens = model.register_batch(eval_set)?;
        let features = model.forward_tokens(&tokens)?.output;
        Ok(Self {
            scenes: eval_set.len(),
            tokens,
            features,
        })
    }

    /// Mean per-scene final-feature MSE of `qmodel`.
    pub fn loss(&self, model: &ToyModel, qmodel: &QuantizedModel) -> Result<f64> {
        let q = model.forward_quantized_tokens(qmodel, &self.tokens)?;
        let n = self.features.rows() / self.scenes;
        let mut total = 0.0;
        for i in 0..self.scenes {
            total += mse(
                &self.features.slice_rows(i * n, (i + 1) * n)?,
                &q.slice_rows(i * n, (i + 1) * n)?,
            )?;
        }
        Ok(total / self.scenes as f64)
    }
}

/// Mean over `eval_set` of the per-scene final-feature MSE.
pub fn model_quant_loss(model: &ToyModel, qmodel: &QuantizedModel, eval_set: &[Scene]) -> Result<f64> {
    EvalReference::new(model, eval_set)?.loss(model, qmodel)
}

/// JSON written next to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: ToyModelConfig,
    pub scheme: QuantScheme,
    pub layers: Vec<String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) -> Result<()> {
    put_u32(out, vs.len())?;
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn get_f64s(cur: &mut Cursor) -> Result<Vec<f64>> {
    let n = cur.u32()? as usize;
    (0..n).map(|_| cur.f64()).collect()
}

/// Layer records:
///
/// ```text
/// "QMDL" | u8 version | u32 layer count | records...
/// record: u32 name len | name | u8 scheme tag
///         | u8 has rotation [| u8 has seed | u64 seed | u32 dim | i8 signs]
///         | u8 has smoothing [| f64 alpha | u32 dim | f64 c_hat]
///         | u32 groups | f64 step multipliers
///         | u8 has static range [| f64 act step] | QQTS block
/// ```
pub fn encode_quantized_model(qmodel: &QuantizedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(QMDL_MAGIC);
    out.push(QMDL_VERSION);
    put_u32(&mut out, qmodel.blocks.len() * LINEAR_NAMES.len())?;
    for (b, block) in qmodel.blocks.iter().enumerate() {
        for (lin, name) in block.linears.iter().zip(LINEAR_NAMES) {
            let name = format!("block{b}.{name}");
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(lin.scheme().variant.tag());
            let p = lin.params();
            match &p.rotation {
                Some(r) => {
                    out.push(1);
                    match r.seed() {
                        Some(s) => {
                            out.push(1);
                            out.extend_from_slice(&s.to_le_bytes());
                        }
                        None => out.push(0),
                    }
                    put_u32(&mut out, r.dim())?;
                    out.extend(r.signs().iter().map(|&s| s as u8));
                }
                None => out.push(0),
            }
            match &p.smooth {
                Some(s) => {
                    out.push(1);
                    out.extend_from_slice(&s.alpha().to_le_bytes());
                    put_f64s(&mut out, s.c_hat())?;
                }
                None => out.push(0),
            }
            put_f64s(&mut out, &p.weight_delta_scale)?;
            match p.act_delta {
                Some(a) => {
                    out.push(1);
                    out.extend_from_slice(&a.to_le_bytes());
                }
                None => out.push(0),
            }
            let q = lin.weight_codes().ok_or_else(|| {
                Error::invalid("full-precision layers have no quantized weights to store")
            })?;
            out.extend(encode_quantized(q)?);
        }
    }
    Ok(out)
}

fn flag(cur: &mut Cursor) -> Result<bool> {
    match cur.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Format(format!("bad flag byte {v}"))),
    }
}

pub fn decode_quantized_model(buf: &[u8], scheme: QuantScheme) -> Result<QuantizedModel> {
    let fmt = |e: Error| match e {
        Error::Format(_) => e,
        e => Error::Format(e.to_string()),
    };
    let mut cur = Cursor::new(buf);
    if cur.take(4)? != QMDL_MAGIC {
        return Err(Error::Format("bad magic, expected QMDL".into()));
    }
    let version = cur.u8()?;
    if version != QMDL_VERSION {
        return Err(Error::Format(format!("unsupported QMDL version {version}")));
    }
    let n = cur.u32()? as usize;
    if n % LINEAR_NAMES.len() != 0 {
        return Err(Error::Format(format!("{n} layers is not a whole number of blocks")));
    }
    let mut blocks = Vec::with_capacity(n / LINEAR_NAMES.len());
    for b in 0..n / LINEAR_NAMES.len() {
        let mut linears = Vec::with_capacity(LINEAR_NAMES.len());
        for (i, expected) in LINEAR_NAMES.iter().enumerate() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
            if name != format!("block{b}.{expected}") {
                return Err(Error::Format(format!("unexpected layer {name:?}")));
            }
            let variant = Variant::from_tag(cur.u8()?).map_err(fmt)?;
            if variant != scheme.variant {
                return Err(Error::Format(format!("{name} uses scheme {}", variant.name())));
            }
            let rotation = if flag(&mut cur)? {
                let seed = if flag(&mut cur)? { Some(cur.u64()?) } else { None };
                let dim = cur.u32()? as usize;
                let signs = cur.take(dim)?.iter().map(|&s| s as i8).collect();
                Some(RotationOp::from_signs(signs, seed).map_err(fmt)?)
            } else {
                None
            };
            let smooth = if flag(&mut cur)? {
                let alpha = cur.f64()?;
                Some(SmoothScale::new(get_f64s(&mut cur)?, alpha).map_err(fmt)?)
            } else {
                None
            };
            let weight_delta_scale = get_f64s(&mut cur)?;
            let act_delta = if flag(&mut cur)? { Some(cur.f64()?) } else { None };
            let block_len = quantized_block_len(cur.rest())?;
            let q = decode_quantized(cur.take(block_len)?)?;
            let params = LayerParams {
                rotation,
                smooth,
                weight_delta_scale,
                act_delta,
            };
            let ls = layer_scheme(&scheme, b, i);
            linears.push(QuantLinear::from_stored(ls, params, q).map_err(fmt)?);
        }
        blocks.push(QuantBlock { linears });
    }
    cur.finish()?;
    Ok(QuantizedModel { scheme, blocks })
}

/// Write `model.qmdl` and `model.json` into `dir`.
pub fn write_quantized_model(
    dir: impl AsRef<Path>,
    qmodel: &QuantizedModel,
    manifest: &ModelManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("model.qmdl"), encode_quantized_model(qmodel)?)?;
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn read_quantized_model(dir: impl AsRef<Path>) -> Result<(QuantizedModel, ModelManifest)> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
    let qmodel = decode_quantized_model(&fs::read(dir.join("model.qmdl"))?, manifest.scheme)?;
    Ok((qmodel, manifest))
}

/// Layer names in file order.
pub fn layer_names(n_blocks: usize) -> Vec<String> {
    (0..n_blocks)
        .flat_map(|b| LINEAR_NAMES.iter().map(move |n| format!("block{b}.{n}")))
        .collect()
}
