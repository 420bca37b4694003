//! Block-wise calibration of smoothing factors and weight steps.
//!
//! Blocks are calibrated front to back. Each block sees the output of the
//! already calibrated (quantized) blocks before it, is quantized from the
//! full-precision activations it produces on that input, and then has its
//! parameters refined by a derivative-free coordinate search over
//! multiplicative grids.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockWeights, Linear, QuantBlock, QuantizedModel, Scene, ToyModel, ToyModelConfig};
use crate::qlinear::{QuantLinear, QuantScheme};
use crate::rotation::apply_rotation;
use crate::smoothing::SmoothOrder;
use crate::tensor::{matmul, mse, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    /// Multipliers tried in every sweep but the last.
    pub grid: Vec<f64>,
    /// Multipliers tried in the final sweep.
    pub refine_grid: Vec<f64>,
    /// Total sweeps over a block's parameters, the last one refining.
    pub passes: usize,
    /// Smoothing channels sharing one multiplier.
    pub chunk: usize,
    pub tune_smooth: bool,
    pub tune_delta: bool,
    /// Learning rates of the gradient-trained original; not used by the
    /// search, kept for reference.
    pub lr_smooth: f64,
    pub lr_delta: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.5, 0.8, 1.0, 1.25, 2.0],
            refine_grid: vec![0.9, 0.95, 1.0, 1.05, 1.1],
            passes: 3,
            chunk: 8,
            tune_smooth: true,
            tune_delta: true,
            lr_smooth: 5e-3,
            lr_delta: 5e-2,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        for g in [&self.grid, &self.refine_grid] {
            if !g.contains(&1.0) {
                return Err(Error::invalid("every grid must contain the multiplier 1.0"));
            }
            if g.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
                return Err(Error::invalid("grid multipliers must be positive"));
            }
        }
        if self.passes == 0 || self.chunk == 0 {
            return Err(Error::invalid("passes and chunk must be positive"));
        }
        Ok(())
    }

    fn grid_for(&self, sweep: usize) -> &[f64] {
        if sweep + 1 == self.passes && self.passes > 1 {
            &self.refine_grid
        } else {
            &self.grid
        }
    }
}

/// Per-block entry of the calibration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLog {
    pub block: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub passes: usize,
    /// Accepted parameter updates.
    pub accepted: usize,
    /// Block loss after every accepted update, starting with the initial loss.
    pub loss_trace: Vec<f64>,
    pub wall_time_s: f64,
}

/// MSE between the outputs of the full-precision block and the block with
/// `lins` substituted, on input `x`.
pub fn block_recon_loss(
    cfg: &ToyModelConfig,
    block: &BlockWeights,
    lins: [&dyn Linear; 4],
    x: &Tensor,
) -> Result<f64> {
    let fp = block.forward_fp(cfg, x)?;
    mse(&fp.out, &block.forward_with(cfg, x, lins)?.out)
}

/// Squared output error of each output channel.
fn column_errors(reference: &Tensor, out: &Tensor) -> Vec<f64> {
    let c = reference.cols();
    let mut err = vec![0.0; c];
    for (r, o) in reference.data().chunks_exact(c).zip(out.data().chunks_exact(c)) {
        for ((e, a), b) in err.iter_mut().zip(r).zip(o) {
            *e += (a - b) * (a - b);
        }
    }
    err
}

/// Full-precision weight of a linear, rotated ahead of time when the
/// scheme allows it.
enum Weight<'a> {
    Raw(&'a Tensor),
    Rotated(Tensor),
}

impl<'a> Weight<'a> {
    fn new(w: &'a Tensor, layer: &QuantLinear) -> Result<Self> {
        match layer.rotation() {
            Some(r) if layer.scheme().order == SmoothOrder::RotateThenScale => {
                Ok(Weight::Rotated(apply_rotation(w, r)?))
            }
            _ => Ok(Weight::Raw(w)),
        }
    }
}

fn rebuild(w: &Weight, layer: &QuantLinear, params: crate::qlinear::LayerParams) -> Result<QuantLinear> {
    match w {
        Weight::Raw(w) => QuantLinear::assemble(w, *layer.scheme(), params),
        Weight::Rotated(w) => QuantLinear::assemble_prerotated(w, *layer.scheme(), params),
    }
}

/// One search sweep over linear `layer` (full-precision weight `w`) with input
/// `x`: smoothing chunks in ascending channel order, then per-output-channel
/// weight steps. Candidates are scored by the layer's output error against
/// `x · wᵀ`; the returned layer never scores worse than the input one.
fn search_linear(w: &Tensor, layer: &QuantLinear, x: &Tensor, grid: &[f64], cfg: &CalibConfig) -> Result<QuantLinear> {
    let reference = matmul(x, w)?;
    let mut best = layer.clone();
    let mut best_loss = mse(&reference, &best.forward_quantized(x)?)?;
    let xr = layer.prerotate(x)?;
    let wf = Weight::new(w, layer)?;
    let w = &wf;
    let eval = |cand: &QuantLinear| match &xr {
        Some(xr) => cand.forward_prerotated(xr),
        None => cand.forward_quantized(x),
    };
    if cfg.tune_smooth {
        if let Some(smooth) = layer.smooth().cloned() {
            let mut smooth = smooth;
            let dim = smooth.dim();
            for start in (0..dim).step_by(cfg.chunk) {
                let range = start..(start + cfg.chunk).min(dim);
                let mut chosen = None;
                for &m in grid.iter().filter(|&&m| m != 1.0) {
                    let cand_smooth = smooth.scaled_range(range.clone(), m);
                    let mut params = best.params().clone();
                    params.smooth = Some(cand_smooth.clone());
                    let cand = rebuild(w, &best, params)?;
                    let loss = mse(&reference, &eval(&cand)?)?;
                    if loss < best_loss {
                        best_loss = loss;
                        chosen = Some((cand, cand_smooth));
                    }
                }
                if let Some((cand, s)) = chosen {
                    best = cand;
                    smooth = s;
                }
            }
        }
    }
    if cfg.tune_delta && best.weight_codes().is_some() {
        let base = best.params().weight_delta_scale.clone();
        let acts = best.quantize_input(x)?;
        let mut col_best = column_errors(&reference, &best.forward_acts(&acts)?);
        let mut scale = base.clone();
        for &m in grid.iter().filter(|&&m| m != 1.0) {
            let mut params = best.params().clone();
            params.weight_delta_scale = base.iter().map(|v| v * m).collect();
            let cand = rebuild(w, &best, params)?;
            let errs = column_errors(&reference, &cand.forward_acts(&acts)?);
            for (j, e) in errs.into_iter().enumerate() {
                if e < col_best[j] {
                    col_best[j] = e;
                    scale[j] = base[j] * m;
                }
            }
        }
        if scale != base {
            let mut params = best.params().clone();
            params.weight_delta_scale = scale;
            best = rebuild(w, &best, params)?;
        }
    }
    Ok(best)
}

/// Coordinate search over one block's quantized linears on input `x`. Each
/// linear is searched on the input it sees inside the quantized block; its
/// update is kept only if the block loss does not increase.
pub fn coordinate_search(
    mcfg: &ToyModelConfig,
    block: &BlockWeights,
    qblock: QuantBlock,
    x: &Tensor,
    cfg: &CalibConfig,
) -> Result<(QuantBlock, BlockLog)> {
    cfg.validate()?;
    let start = Instant::now();
    let fp_out = block.forward_fp(mcfg, x)?.out;
    let mut q = qblock;
    let mut loss = mse(&fp_out, &block.forward_with(mcfg, x, q.lins())?.out)?;
    let mut trace_losses = vec![loss];
    let mut accepted = 0;
    let mut sweeps = 0;
    let mut sweep = 0;
    while sweep < cfg.passes {
        sweeps += 1;
        let grid = cfg.grid_for(sweep);
        let mut changed = false;
        for i in 0..4 {
            let qtrace = block.forward_with(mcfg, x, q.lins())?;
            let w = block.linears()[i];
            let cand = search_linear(w, &q.linears[i], qtrace.linear_input(i), grid, cfg)?;
            if cand == q.linears[i] {
                continue;
            }
            let mut trial = q.clone();
            trial.linears[i] = cand;
            let out = block.resume(mcfg, &qtrace, i, trial.lins())?;
            let l = mse(&fp_out, &out)?;
            if l <= loss {
                q = trial;
                changed |= l < loss;
                loss = l;
                accepted += 1;
                trace_losses.push(loss);
            }
        }
        sweep += 1;
        // Skip the remaining coarse sweeps once one changes nothing.
        if !changed && sweep + 1 < cfg.passes {
            sweep = cfg.passes - 1;
        }
    }
    let log = BlockLog {
        block: 0,
        initial_loss: trace_losses[0],
        final_loss: loss,
        passes: sweeps,
        accepted,
        loss_trace: trace_losses,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((q, log))
}

/// Quantize and calibrate every block in order; block `k` is built and tuned
/// on the output of the calibrated blocks `0..k`.
pub fn calibrate_blockwise(
    model: &ToyModel,
    calib_set: &[Scene],
    scheme: QuantScheme,
    cfg: &CalibConfig,
) -> Result<(QuantizedModel, Vec<BlockLog>)> {
    if calib_set.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    cfg.validate()?;
    let mcfg = model.config();
    let mut x = model.register_batch(calib_set)?;
    let mut blocks = Vec::with_capacity(model.blocks().len());
    let mut logs = Vec::with_capacity(model.blocks().len());
    for (b, block) in model.blocks().iter().enumerate() {
        let fp = block.forward_fp(mcfg, &x)?;
        let inputs = [0, 1, 2, 3].map(|i| fp.linear_input(i));
        let qblock = QuantBlock::build(block, inputs, &scheme, b)?;
        let (qblock, mut log) = if scheme.full_precision {
            let l = mse(&fp.out, &block.forward_with(mcfg, &x, qblock.lins())?.out)?;
            let log = BlockLog {
                block: b,
                initial_loss: l,
                final_loss: l,
                passes: 0,
                accepted: 0,
                loss_trace: vec![l],
                wall_time_s: 0.0,
            };
            (qblock, log)
        } else {
            coordinate_search(mcfg, block, qblock, &x, cfg)?
        };
        log.block = b;
        x = block.forward_with(mcfg, &x, qblock.lins())?.out;
        blocks.push(qblock);
        logs.push(log);
    }
    Ok((QuantizedModel { scheme, blocks }, logs))
}
