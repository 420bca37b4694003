//! Miniature alternating-attention transformer.
//!
//! Each scene is `f` frames of `s` patch tokens. Every frame gets five special
//! tokens appended (one camera and four register tokens), drawn from one set
//! for the first frame and a second set shared by all later frames. Blocks
//! alternate between frame attention (tokens attend within their own frame)
//! and global attention (all tokens of a scene), each followed by an MLP.

mod block;
mod config;
mod quantized;
mod scene;

pub use block::{attention, gelu, rms_norm, BlockKind, BlockTrace, BlockWeights, Linear};
pub use config::ToyModelConfig;
pub use config::SPECIAL_TOKENS;
pub use quantized::{
    decode_quantized_model, encode_quantized_model, layer_names, quantize_from_activations, layer_scheme, model_quant_loss,
    quantize_model, read_quantized_model, write_quantized_model, CalibrationActivations,
    EvalReference, ModelManifest, QuantBlock, QuantizedModel, LINEAR_NAMES,
};
pub use scene::{
    gen_pool, gen_scene, read_pool, register_tokens, write_pool, DomainProfile, PoolEntry,
    PoolManifest, Scene, SceneLabel,
};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Full-precision model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    blocks: Vec<BlockWeights>,
    /// Special tokens of the first frame, `5 × d`.
    t_first: Tensor,
    /// Special tokens shared by later frames, `5 × d`.
    t_other: Tensor,
    outlier_channels: Vec<usize>,
}

/// Block inputs and final features of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Residual stream entering each block.
    pub block_inputs: Vec<Tensor>,
    pub output: Tensor,
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let outlier_channels = pick_channels(&mut rng, cfg.d, 4);
        let t_first = special_tokens(&mut rng, &cfg, &outlier_channels)?;
        let t_other = special_tokens(&mut rng, &cfg, &outlier_channels)?;
        let blocks = (0..cfg.n_blocks)
            .map(|b| BlockWeights::random(&cfg, b, &outlier_channels, &mut rng.child(b as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            blocks,
            t_first,
            t_other,
            outlier_channels,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn special_tokens(&self) -> (&Tensor, &Tensor) {
        (&self.t_first, &self.t_other)
    }

    /// Channels on which the special tokens carry their large values.
    pub fn outlier_channels(&self) -> &[usize] {
        &self.outlier_channels
    }

    /// Replace the special-token sets.
    pub fn with_special_tokens(mut self, t_first: Tensor, t_other: Tensor) -> Result<Self> {
        for t in [&t_first, &t_other] {
            if t.dims2()? != (SPECIAL_TOKENS, self.cfg.d) {
                return Err(Error::dim(format!("special tokens must be {SPECIAL_TOKENS}x{}", self.cfg.d)));
            }
        }
        self.t_first = t_first;
        self.t_other = t_other;
        Ok(self)
    }

    pub fn register(&self, scene: &Scene) -> Result<Tensor> {
        register_tokens(scene, &self.t_first, &self.t_other)
    }

    /// Run registered tokens of `x.rows() / n` scenes through every block.
    pub fn forward_tokens(&self, x: &Tensor) -> Result<ForwardTrace> {
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            let next = block.forward_fp(&self.cfg, &cur)?.out;
            block_inputs.push(cur);
            cur = next;
        }
        Ok(ForwardTrace {
            block_inputs,
            output: cur,
        })
    }

    pub fn forward(&self, scene: &Scene) -> Result<ForwardTrace> {
        self.forward_tokens(&self.register(scene)?)
    }

    /// Registered tokens of several scenes stacked row-wise.
    pub fn register_batch(&self, scenes: &[Scene]) -> Result<Tensor> {
        let parts = scenes
            .iter()
            .map(|s| self.register(s))
            .collect::<Result<Vec<_>>>()?;
        Tensor::vstack(&parts)
    }
}

fn pick_channels(rng: &mut SeededRng, d: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = i + rng.below(d - i);
        all.swap(i, j);
    }
    let mut out = all[..k].to_vec();
    out.sort_unstable();
    out
}

fn special_tokens(rng: &mut SeededRng, cfg: &ToyModelConfig, channels: &[usize]) -> Result<Tensor> {
    crate::rng::gen_heavy_tailed(rng, 5, cfg.d, channels, cfg.special_token_scale)
}

