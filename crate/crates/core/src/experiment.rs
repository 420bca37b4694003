//! Run configuration, provenance and the seeded ablation harness.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::{calibrate_blockwise, BlockLog, CalibConfig};
use crate::error::{Error, Result};
use crate::model::{
    gen_pool, quantize_from_activations, quantize_model, CalibrationActivations, EvalReference, Scene,
    ToyModel, ToyModelConfig,
};
use crate::qlinear::{QuantScheme, Variant};
use crate::quantizer::{coherence, BitWidth, Granularity, Mode, QuantSpec};
use crate::sampling::{
    analyze_pool, diverse_sample, filter_pool, kmeans, random_sample, select_from_features,
    FilterMode, PoolFeatures, SelectConfig, DEFAULT_BUDGET, DEFAULT_CLUSTERS,
    DEFAULT_KEEP_FRACTION, DEFAULT_LAYER_FRACTION,
};
use crate::smoothing::{SmoothOrder, DEFAULT_ALPHA};
use crate::tensor::{excess_kurtosis, Tensor};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Caps the worker threads of the ablation harness.
pub const THREADS_ENV: &str = "QUANTSMOOTH_THREADS";

/// Weight and activation bit widths, written `w4a4`, `w6a6`, `w8a8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bits {
    pub weight: BitWidth,
    pub act: BitWidth,
}

impl Bits {
    pub const W4A4: Bits = Bits {
        weight: BitWidth::Int4,
        act: BitWidth::Int4,
    };

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bit setting {s:?} is not of the form w<N>a<N>"));
        let rest = s.strip_prefix('w').ok_or_else(bad)?;
        let (w, a) = rest.split_once('a').ok_or_else(bad)?;
        Ok(Self {
            weight: BitWidth::from_bits(w.parse().map_err(|_| bad())?)?,
            act: BitWidth::from_bits(a.parse().map_err(|_| bad())?)?,
        })
    }

    pub fn name(self) -> String {
        format!("w{}a{}", self.weight.bits(), self.act.bits())
    }
}

impl Serialize for Bits {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Bits::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Every tunable of a run in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ToyModelConfig,
    /// Pool size, split evenly over the domains.
    pub pool: usize,
    pub n_domains: usize,
    pub outlier_frac: f64,
    pub pool_seed: u64,
    /// Clean held-out scenes per domain used for evaluation.
    pub eval_per_domain: usize,
    pub eval_seed: u64,
    pub bits: Bits,
    pub scheme: Variant,
    pub alpha: f64,
    pub keep_fraction: f64,
    pub filter_mode: FilterMode,
    pub clusters: usize,
    pub budget: usize,
    pub layer_fraction: f64,
    /// Include special-token rows in the frame-correlation vectors.
    pub include_special: bool,
    pub seeds: Vec<u64>,
    pub calib: CalibConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ToyModelConfig::default(),
            pool: 400,
            n_domains: 4,
            outlier_frac: 0.05,
            pool_seed: 0,
            eval_per_domain: 8,
            eval_seed: 1_000_000,
            bits: Bits::W4A4,
            scheme: Variant::Dsfq,
            alpha: DEFAULT_ALPHA,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            filter_mode: FilterMode::KeepLowest,
            clusters: DEFAULT_CLUSTERS,
            budget: DEFAULT_BUDGET,
            layer_fraction: DEFAULT_LAYER_FRACTION,
            include_special: true,
            seeds: (0..5).collect(),
            calib: CalibConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.calib.validate()?;
        if self.n_domains == 0 || self.pool == 0 || self.pool % self.n_domains != 0 {
            return Err(Error::invalid(format!(
                "pool of {} does not split over {} domains",
                self.pool, self.n_domains
            )));
        }
        if !(0.0..=0.2).contains(&self.outlier_frac) {
            return Err(Error::invalid("outlier_frac must lie in [0, 0.2]"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid("keep_fraction must lie in (0, 1]"));
        }
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if self.clusters == 0 || self.budget == 0 || self.eval_per_domain == 0 {
            return Err(Error::invalid("clusters, budget and eval_per_domain must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn provenance(&self, seed: u64) -> Provenance {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.hash(),
            seed,
        }
    }

    pub fn quant_scheme(&self, variant: Variant) -> QuantScheme {
        QuantScheme {
            alpha: self.alpha,
            ..QuantScheme::new(variant, self.bits.weight, self.bits.act)
        }
    }

    pub fn select_config(&self, seed: u64) -> SelectConfig {
        SelectConfig {
            keep_fraction: self.keep_fraction,
            filter_mode: self.filter_mode,
            clusters: self.clusters,
            budget: self.budget,
            seed,
        }
    }

    pub fn gen_pool(&self) -> Result<Vec<Scene>> {
        gen_pool(
            &self.model,
            self.n_domains,
            self.pool / self.n_domains,
            self.outlier_frac,
            self.pool_seed,
        )
    }

    pub fn gen_eval_set(&self) -> Result<Vec<Scene>> {
        gen_pool(&self.model, self.n_domains, self.eval_per_domain, 0.0, self.eval_seed)
    }
}

/// Embedded in every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

/// Runs `f` over `items` on at most `QUANTSMOOTH_THREADS` workers, keeping
/// the input order.
pub fn par_map<I, O, F>(items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync + Send,
{
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Activation statistics of one linear input, before and after the scheme's
/// online transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStats {
    pub block: usize,
    pub linear: String,
    pub kurtosis: f64,
    pub max_abs: f64,
    /// Mean per-token coherence.
    pub coherence: f64,
    pub transformed_kurtosis: f64,
    pub transformed_max_abs: f64,
    pub transformed_coherence: f64,
}

/// Residual-stream statistics at a block input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block: usize,
    pub kurtosis: f64,
    pub special_max_abs: f64,
    pub patch_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub provenance: Provenance,
    pub scheme: Variant,
    pub blocks: Vec<BlockStats>,
    pub linears: Vec<LinearStats>,
}

fn mean_coherence(x: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..x.rows() {
        if let Ok(mu) = coherence(x.row(i)) {
            total += mu;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::numeric("every token is zero"));
    }
    Ok(total / n as f64)
}

/// Kurtosis, extremes and coherence along the full-precision forward pass of
/// `scenes`, with the transforms of `variant` built from the same scenes.
pub fn distribution_stats(
    cfg: &RunConfig,
    model: &ToyModel,
    scenes: &[Scene],
    variant: Variant,
    seed: u64,
) -> Result<DistributionStats> {
    let mcfg = model.config();
    let scheme = cfg.quant_scheme(variant);
    let q = quantize_model(model, scenes, scheme)?;
    let x = model.register_batch(scenes)?;
    let trace = model.forward_tokens(&x)?;
    let per_frame = mcfg.tokens_per_frame();
    let mut blocks = Vec::new();
    let mut linears = Vec::new();
    for (b, (block, qb)) in model.blocks().iter().zip(&q.blocks).enumerate() {
        let input = &trace.block_inputs[b];
        let (mut special, mut patch) = (0.0f64, 0.0f64);
        for i in 0..input.rows() {
            let m = input.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if i % per_frame >= mcfg.s {
                special = special.max(m);
            } else {
                patch = patch.max(m);
            }
        }
        blocks.push(BlockStats {
            block: b,
            kurtosis: excess_kurtosis(input)?,
            special_max_abs: special,
            patch_max_abs: patch,
        });
        let fp = block.forward_fp(mcfg, input)?;
        for (l, layer) in qb.linears.iter().enumerate() {
            let a = fp.linear_input(l);
            let t = layer.transform_input(a)?;
            linears.push(LinearStats {
                block: b,
                linear: crate::model::LINEAR_NAMES[l].to_string(),
                kurtosis: excess_kurtosis(a)?,
                max_abs: a.max_abs(),
                coherence: mean_coherence(a)?,
                transformed_kurtosis: excess_kurtosis(&t)?,
                transformed_max_abs: t.max_abs(),
                transformed_coherence: mean_coherence(&t)?,
            });
        }
    }
    Ok(DistributionStats {
        provenance: cfg.provenance(seed),
        scheme: variant,
        blocks,
        linears,
    })
}

/// Which comparison an ablation run performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Naive, rotation-only, scale-only and DSFQ. Seed `s` uses the toy
    /// model with seed `s`, a random calibration draw and rotation seed `s`;
    /// steps and scales come straight from the calibration maxima.
    Schemes,
    /// Activation granularity under DSFQ: dynamic per-token, dynamic
    /// per-tensor and static per-tensor. Seeds draw calibration sets.
    Granularity,
    /// Rotate-then-scale against scale-then-rotate under DSFQ.
    Order,
    /// Calibration-set selection strategies followed by block-wise
    /// calibration on the fixed pool. Seeds drive the selection.
    Sampling,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::Schemes,
        AblationKind::Granularity,
        AblationKind::Order,
        AblationKind::Sampling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Schemes => "schemes",
            AblationKind::Granularity => "granularity",
            AblationKind::Order => "order",
            AblationKind::Sampling => "sampling",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }

    pub fn default_arms(self) -> Vec<String> {
        let arms: &[&str] = match self {
            AblationKind::Schemes => &["naive", "rotation", "scale", "dsfq"],
            AblationKind::Granularity => &["dynamic_token", "dynamic_tensor", "static_tensor"],
            AblationKind::Order => &["rotate_scale", "scale_rotate"],
            AblationKind::Sampling => &["random", "filtered", "clustered", "nfds"],
        };
        arms.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    /// Final loss per seed, in seed order.
    pub losses: Vec<f64>,
    pub mean: f64,
    /// Population variance over seeds.
    pub variance: f64,
    /// Loss before block-wise calibration, per seed (sampling only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncalibrated: Option<Vec<f64>>,
    /// Planted outliers in each seed's calibration set (sampling only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers_selected: Option<Vec<usize>>,
    /// Whether every block's loss trace was non-increasing in every seed
    /// (sampling only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks_monotone: Option<bool>,
}

/// A pairwise claim checked on the arm results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    /// Fraction of seeds on which the claim holds, for per-seed claims.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub provenance: Provenance,
    pub kind: AblationKind,
    pub bits: Bits,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
    pub verdicts: Vec<Verdict>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// One row per arm and seed; numbers match the JSON report.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,arm,seed,loss,uncalibrated,outliers_selected\n");
        for a in &self.arms {
            for (i, (&seed, loss)) in self.seeds.iter().zip(&a.losses).enumerate() {
                let unc = a.uncalibrated.as_ref().map(|v| json_num(v[i])).unwrap_or_default();
                let outl = a
                    .outliers_selected
                    .as_ref()
                    .map(|v| v[i].to_string())
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{seed},{},{unc},{outl}",
                    self.kind.name(),
                    a.arm,
                    json_num(*loss)
                );
            }
        }
        out
    }
}

fn json_num(v: f64) -> String {
    serde_json::to_string(&v).expect("finite number")
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

fn arm_result(arm: &str, losses: Vec<f64>) -> ArmResult {
    let (mean, variance) = mean_var(&losses);
    ArmResult {
        arm: arm.to_string(),
        losses,
        mean,
        variance,
        uncalibrated: None,
        outliers_selected: None,
        blocks_monotone: None,
    }
}

fn pick(pool: &[Scene], positions: &[usize]) -> Vec<Scene> {
    positions.iter().map(|&i| pool[i].clone()).collect()
}

/// Everything an ablation needs, generated once.
pub struct Workspace {
    pub cfg: RunConfig,
    pub model: ToyModel,
    pub pool: Vec<Scene>,
    pub eval: Vec<Scene>,
    reference: EvalReference,
    features: Option<PoolFeatures>,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = cfg.gen_pool()?;
        Self::with_pool(cfg, pool)
    }

    pub fn with_pool(cfg: RunConfig, pool: Vec<Scene>) -> Result<Self> {
        cfg.validate()?;
        let model = ToyModel::new(cfg.model.clone())?;
        let eval = cfg.gen_eval_set()?;
        Ok(Self {
            reference: EvalReference::new(&model, &eval)?,
            model,
            eval,
            pool,
            cfg,
            features: None,
        })
    }

    pub fn features(&mut self) -> Result<&PoolFeatures> {
        if self.features.is_none() {
            self.features = Some(analyze_pool(
                &self.model,
                &self.pool,
                self.cfg.layer_fraction,
                self.cfg.include_special,
            )?);
        }
        Ok(self.features.as_ref().expect("just computed"))
    }

    /// Pool positions chosen by a sampling strategy.
    pub fn sample(&mut self, strategy: &str, seed: u64) -> Result<Vec<usize>> {
        let n = self.pool.len();
        let budget = self.cfg.budget;
        let ids: Vec<usize> = self.pool.iter().map(|s| s.id).collect();
        match strategy {
            "random" => random_sample(n, budget, seed),
            "filtered" => {
                let (keep, mode) = (self.cfg.keep_fraction, self.cfg.filter_mode);
                let (scores, _) = crate::sampling::noise_scores(&self.features()?.records)?;
                let kept = filter_pool(&ids, &scores, keep, mode)?;
                Ok(random_sample(kept.len(), budget, seed)?.iter().map(|&p| kept[p]).collect())
            }
            "clustered" => {
                let k = self.cfg.clusters;
                let clusters = kmeans(&self.features()?.corr, k, seed)?;
                diverse_sample(&clusters, budget, seed)
            }
            "nfds" => {
                let sc = self.cfg.select_config(seed);
                Ok(select_from_features(&ids, self.features()?, &sc)?.selected)
            }
            s => Err(Error::invalid(format!("unknown sampling strategy {s:?}"))),
        }
    }

    pub fn run_ablation(&mut self, kind: AblationKind, arms: &[String]) -> Result<AblationReport> {
        let seeds = self.cfg.seeds.clone();
        let arms_out = match kind {
            AblationKind::Schemes => self.schemes(arms, &seeds)?,
            AblationKind::Granularity | AblationKind::Order => self.scheme_variants(kind, arms, &seeds)?,
            AblationKind::Sampling => self.sampling(arms, &seeds)?,
        };
        let mut report = AblationReport {
            provenance: self.cfg.provenance(seeds[0]),
            kind,
            bits: self.cfg.bits,
            seeds,
            arms: arms_out,
            verdicts: Vec::new(),
        };
        report.verdicts = verdicts(&report);
        Ok(report)
    }

    fn schemes(&self, arms: &[String], seeds: &[u64]) -> Result<Vec<ArmResult>> {
        let variants = arms.iter().map(|a| Variant::parse(a)).collect::<Result<Vec<_>>>()?;
        let per_seed = par_map(seeds, |&seed| {
            let mcfg = ToyModelConfig {
                seed,
                ..self.cfg.model.clone()
            };
            let model = ToyModel::new(mcfg)?;
            let calib = pick(&self.pool, &random_sample(self.pool.len(), self.cfg.budget, seed)?);
            let acts = CalibrationActivations::collect(&model, &calib)?;
            let reference = EvalReference::new(&model, &self.eval)?;
            variants
                .iter()
                .map(|&v| {
                    let scheme = self.cfg.quant_scheme(v).with_rotation_seed(Some(seed));
                    reference.loss(&model, &quantize_from_activations(&model, &acts, scheme)?)
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        Ok(transpose(arms, &per_seed))
    }

    fn scheme_variants(&self, kind: AblationKind, arms: &[String], seeds: &[u64]) -> Result<Vec<ArmResult>> {
        let schemes = arms
            .iter()
            .map(|a| self.arm_scheme(kind, a))
            .collect::<Result<Vec<_>>>()?;
        let per_seed = par_map(seeds, |&seed| {
            let calib = pick(&self.pool, &random_sample(self.pool.len(), self.cfg.budget, seed)?);
            let acts = CalibrationActivations::collect(&self.model, &calib)?;
            schemes
                .iter()
                .map(|s| {
                    let scheme = s.with_rotation_seed(Some(seed));
                    self.reference.loss(&self.model, &quantize_from_activations(&self.model, &acts, scheme)?)
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        Ok(transpose(arms, &per_seed))
    }

    fn arm_scheme(&self, kind: AblationKind, arm: &str) -> Result<QuantScheme> {
        let base = self.cfg.quant_scheme(Variant::Dsfq);
        let bits = self.cfg.bits.act;
        let act = |g, m| QuantSpec::new(bits, g, m);
        Ok(match (kind, arm) {
            (AblationKind::Granularity, "dynamic_token") => base,
            (AblationKind::Granularity, "dynamic_tensor") => QuantScheme {
                act: act(Granularity::PerTensor, Mode::Dynamic),
                ..base
            },
            (AblationKind::Granularity, "static_tensor") => QuantScheme {
                act: act(Granularity::PerTensor, Mode::Static),
                ..base
            },
            (AblationKind::Order, "rotate_scale") => base,
            (AblationKind::Order, "scale_rotate") => QuantScheme {
                order: SmoothOrder::ScaleThenRotate,
                ..base
            },
            (k, a) => return Err(Error::invalid(format!("unknown {} arm {a:?}", k.name()))),
        })
    }

    fn sampling(&mut self, arms: &[String], seeds: &[u64]) -> Result<Vec<ArmResult>> {
        let mut jobs = Vec::new();
        for arm in arms {
            for &seed in seeds {
                jobs.push((arm.clone(), seed, self.sample(arm, seed)?));
            }
        }
        let scheme = self.cfg.quant_scheme(self.cfg.scheme);
        let runs = par_map(&jobs, |(_, _, positions)| {
            let calib = pick(&self.pool, positions);
            let before = self.reference.loss(&self.model, &quantize_model(&self.model, &calib, scheme)?)?;
            let (q, logs) = calibrate_blockwise(&self.model, &calib, scheme, &self.cfg.calib)?;
            let after = self.reference.loss(&self.model, &q)?;
            let outliers = calib.iter().filter(|s| s.is_outlier()).count();
            Ok((before, after, outliers, logs.iter().all(log_monotone)))
        })?;
        Ok(arms
            .iter()
            .zip(runs.chunks(seeds.len()))
            .map(|(arm, rs)| ArmResult {
                uncalibrated: Some(rs.iter().map(|r| r.0).collect()),
                outliers_selected: Some(rs.iter().map(|r| r.2).collect()),
                blocks_monotone: Some(rs.iter().all(|r| r.3)),
                ..arm_result(arm, rs.iter().map(|r| r.1).collect())
            })
            .collect())
    }
}

/// Non-increasing trace ending at the reported final loss.
pub fn log_monotone(log: &BlockLog) -> bool {
    log.loss_trace.windows(2).all(|w| w[1] <= w[0])
        && log.loss_trace.last() == Some(&log.final_loss)
        && log.final_loss <= log.initial_loss
}

fn transpose(arms: &[String], per_seed: &[Vec<f64>]) -> Vec<ArmResult> {
    arms.iter()
        .enumerate()
        .map(|(a, name)| arm_result(name, per_seed.iter().map(|row| row[a]).collect()))
        .collect()
}

fn per_seed_fraction(report: &AblationReport, pred: impl Fn(usize) -> bool) -> f64 {
    let n = report.seeds.len();
    (0..n).filter(|&i| pred(i)).count() as f64 / n as f64
}

/// Ordering claims for the arms present in a report.
pub fn verdicts(report: &AblationReport) -> Vec<Verdict> {
    let loss = |name: &str| report.arm(name).map(|a| a.losses.clone());
    let mut out = Vec::new();
    match report.kind {
        AblationKind::Schemes => {
            if let (Some(n), Some(r), Some(s), Some(d)) =
                (loss("naive"), loss("rotation"), loss("scale"), loss("dsfq"))
            {
                let f = per_seed_fraction(report, |i| d[i] < r[i] && r[i] < n[i] && d[i] < s[i]);
                out.push(Verdict {
                    claim: "dsfq < rotation < naive and dsfq < scale".into(),
                    fraction: Some(f),
                    holds: f >= 0.9,
                });
            }
        }
        AblationKind::Granularity => {
            if let (Some(dt), Some(st)) = (loss("dynamic_token"), loss("static_tensor")) {
                let f = per_seed_fraction(report, |i| dt[i] <= st[i]);
                out.push(Verdict {
                    claim: "dynamic_token <= static_tensor".into(),
                    fraction: Some(f),
                    holds: f == 1.0,
                });
            }
        }
        AblationKind::Order => {
            if let (Some(a), Some(b)) = (report.arm("rotate_scale"), report.arm("scale_rotate")) {
                out.push(Verdict {
                    claim: "mean rotate_scale <= mean scale_rotate".into(),
                    fraction: None,
                    holds: a.mean <= b.mean,
                });
            }
        }
        AblationKind::Sampling => {
            if let (Some(n), Some(r)) = (report.arm("nfds"), report.arm("random")) {
                out.push(Verdict {
                    claim: "mean nfds <= mean random".into(),
                    fraction: None,
                    holds: n.mean <= r.mean,
                });
                out.push(Verdict {
                    claim: "variance nfds <= variance random".into(),
                    fraction: None,
                    holds: n.variance <= r.variance,
                });
            }
            for a in &report.arms {
                if let (Some(unc), Some(mono)) = (&a.uncalibrated, a.blocks_monotone) {
                    let f = per_seed_fraction(report, |i| a.losses[i] <= unc[i]);
                    out.push(Verdict {
                        claim: format!("{} calibrated <= uncalibrated", a.arm),
                        fraction: Some(f),
                        holds: f == 1.0 && mono,
                    });
                }
            }
        }
    }
    out
}
