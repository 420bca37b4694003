use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use quantsmooth::calibrate::{calibrate_blockwise, BlockLog};
use quantsmooth::experiment::{
    distribution_stats, AblationKind, Bits, Provenance, RunConfig, Workspace,
};
use quantsmooth::model::{
    layer_names, model_quant_loss, read_pool, read_quantized_model, write_pool,
    write_quantized_model, ModelManifest, Scene, ToyModel,
};
use quantsmooth::qlinear::Variant;
use quantsmooth::sampling::{
    analyze_pool, noise_scores, select_from_features, FilterMode, LayerStatRecord, PoolFeatures,
    ScoreStats,
};
use quantsmooth::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "quantsmooth", version, about = "Rotation + smoothing PTQ toolkit on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic scene pool.
    GenPool {
        #[command(flatten)]
        common: Common,
    },
    /// Compute per-scene noise scores and frame-correlation features.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
    },
    /// Filter, cluster and sample a calibration set from a scores file.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Quantize the toy model and calibrate it block by block.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        /// Selection file; without it the first `budget` scenes are used.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Skip the search and keep the statistics-derived parameters.
        #[arg(long)]
        no_search: bool,
    },
    /// Evaluate a quantized model on the held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Activation distribution statistics along the forward pass.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Run ablation arms across the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reuse a generated pool instead of generating one.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        kind: KindArg,
        /// Comma-separated arm names; defaults to every arm of the kind.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Schemes,
    Granularity,
    Order,
    Sampling,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FilterArg {
    KeepLowest,
    DropHighest,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// w4a4, w6a6 or w8a8.
    #[arg(long)]
    bits: Option<String>,
    #[arg(long, value_parser = ["naive", "rotation", "scale", "dsfq"])]
    scheme: Option<String>,
    #[arg(long)]
    keep: Option<f64>,
    #[arg(long, value_enum)]
    filter_mode: Option<FilterArg>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    layer_fraction: Option<f64>,
}

impl Common {
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::from_json(&fs::read_to_string(path)?)?,
            (None, Some(cfg)) => cfg,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(b) = &self.bits {
            cfg.bits = Bits::parse(b)?;
        }
        if let Some(s) = &self.scheme {
            cfg.scheme = Variant::parse(s)?;
        }
        if let Some(k) = self.keep {
            cfg.keep_fraction = k;
        }
        if let Some(m) = self.filter_mode {
            cfg.filter_mode = match m {
                FilterArg::KeepLowest => FilterMode::KeepLowest,
                FilterArg::DropHighest => FilterMode::DropHighest,
            };
        }
        if let Some(k) = self.clusters {
            cfg.clusters = k;
        }
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(l) = self.layer_fraction {
            cfg.layer_fraction = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn seed_of(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Config files written next to directory outputs.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    provenance: Provenance,
    config: RunConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreEntry {
    sample_id: usize,
    layers: Vec<usize>,
    mean: Vec<f64>,
    var: Vec<f64>,
    score: f64,
    frame_corr: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoresFile {
    provenance: Provenance,
    config: RunConfig,
    stats: ScoreStats,
    samples: Vec<ScoreEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Assignment {
    sample_id: usize,
    cluster: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibSetFile {
    provenance: Provenance,
    config: RunConfig,
    seed: u64,
    keep_fraction: f64,
    filter_mode: FilterMode,
    clusters: usize,
    budget: usize,
    selected: Vec<usize>,
    assignments: Vec<Assignment>,
}

#[derive(Serialize)]
struct CalibrationLog {
    provenance: Provenance,
    blocks: Vec<LogEntry>,
}

#[derive(Serialize)]
struct LogEntry {
    block: usize,
    initial_loss: f64,
    final_loss: f64,
    passes: usize,
    accepted: usize,
    loss_trace: Vec<f64>,
}

#[derive(Serialize)]
struct TimingEntry {
    block: usize,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct EvalReport {
    provenance: Provenance,
    scheme: Variant,
    bits: Bits,
    eval_scenes: usize,
    model_quant_loss: f64,
    block_output_mse: Vec<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPool { common } => gen_pool(&common),
        Command::Score { common, pool } => score(&common, &pool),
        Command::Select { common, scores } => select(&common, &scores),
        Command::Calibrate {
            common,
            pool,
            calib,
            no_search,
        } => calibrate(&common, &pool, calib.as_deref(), no_search),
        Command::Eval { common, model } => eval(&common, &model),
        Command::Stats { common, pool, calib } => stats(&common, &pool, calib.as_deref()),
        Command::Ablate {
            common,
            pool,
            kind,
            arms,
        } => ablate(&common, pool.as_deref(), kind, arms),
    }
}

fn gen_pool(common: &Common) -> Result<()> {
    let mut cfg = common.resolve(None)?;
    if let Some(seed) = common.seed {
        cfg.pool_seed = seed;
    }
    let scenes = cfg.gen_pool()?;
    let prov = cfg.provenance(cfg.pool_seed);
    write_pool(&common.out, &scenes, Some(prov.clone()))?;
    write_json(
        &common.out.join("config.json"),
        &RunRecord {
            provenance: prov,
            config: cfg,
        },
    )
}

/// Pool scenes plus the configuration they were generated with, if present.
fn load_pool(dir: &Path) -> Result<(Vec<Scene>, Option<RunConfig>)> {
    let (_, scenes) = read_pool(dir, false)?;
    let rec = dir.join("config.json");
    let cfg = if rec.exists() {
        Some(read_json::<RunRecord>(&rec)?.config)
    } else {
        None
    };
    Ok((scenes, cfg))
}

fn check_pool(cfg: &RunConfig, scenes: &[Scene]) -> Result<()> {
    let shape = scenes.first().map(|s| (s.frames.len(), s.frames[0].rows(), s.frames[0].cols()));
    let m = &cfg.model;
    if shape != Some((m.f, m.s, m.d)) {
        return Err(Error::InvalidInput(format!(
            "pool scenes {shape:?} do not match the model's f={} s={} d={}",
            m.f, m.s, m.d
        )));
    }
    Ok(())
}

fn score(common: &Common, pool_dir: &Path) -> Result<()> {
    let (scenes, base) = load_pool(pool_dir)?;
    let cfg = common.resolve(base)?;
    check_pool(&cfg, &scenes)?;
    let model = ToyModel::new(cfg.model.clone())?;
    let features = analyze_pool(&model, &scenes, cfg.layer_fraction, cfg.include_special)?;
    let (scores, stats) = noise_scores(&features.records)?;
    let mut samples: Vec<ScoreEntry> = features
        .records
        .into_iter()
        .zip(scores)
        .zip(features.corr)
        .map(|((r, score), frame_corr)| ScoreEntry {
            sample_id: r.sample_id,
            layers: r.layers,
            mean: r.mean,
            var: r.var,
            score,
            frame_corr,
        })
        .collect();
    samples.sort_by_key(|s| s.sample_id);
    write_json(
        &common.out,
        &ScoresFile {
            provenance: cfg.provenance(seed_of(&cfg)),
            config: cfg,
            stats,
            samples,
        },
    )
}

fn select(common: &Common, scores_path: &Path) -> Result<()> {
    let file: ScoresFile = read_json(scores_path)?;
    let cfg = common.resolve(Some(file.config))?;
    let seed = seed_of(&cfg);
    let ids: Vec<usize> = file.samples.iter().map(|s| s.sample_id).collect();
    let features = PoolFeatures {
        records: file
            .samples
            .iter()
            .map(|s| LayerStatRecord {
                sample_id: s.sample_id,
                layers: s.layers.clone(),
                mean: s.mean.clone(),
                var: s.var.clone(),
            })
            .collect(),
        corr: file.samples.iter().map(|s| s.frame_corr.clone()).collect(),
    };
    let sel = select_from_features(&ids, &features, &cfg.select_config(seed))?;
    let assignments = sel
        .filtered
        .iter()
        .zip(&sel.clusters.assignments)
        .map(|(&p, &cluster)| Assignment {
            sample_id: ids[p],
            cluster,
        })
        .collect();
    let mut selected: Vec<usize> = sel.selected.iter().map(|&p| ids[p]).collect();
    selected.sort_unstable();
    write_json(
        &common.out,
        &CalibSetFile {
            provenance: cfg.provenance(seed),
            seed,
            keep_fraction: cfg.keep_fraction,
            filter_mode: cfg.filter_mode,
            clusters: cfg.clusters,
            budget: cfg.budget,
            selected,
            assignments,
            config: cfg,
        },
    )
}

fn calib_scenes(scenes: &[Scene], calib: Option<&Path>, budget: usize) -> Result<Vec<Scene>> {
    let Some(path) = calib else {
        return Ok(scenes.iter().take(budget).cloned().collect());
    };
    let file: CalibSetFile = read_json(path)?;
    file.selected
        .iter()
        .map(|id| {
            scenes
                .iter()
                .find(|s| s.id == *id)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("scene {id} is not in the pool")))
        })
        .collect()
}

fn calibrate(common: &Common, pool_dir: &Path, calib: Option<&Path>, no_search: bool) -> Result<()> {
    let (scenes, base) = load_pool(pool_dir)?;
    let cfg = common.resolve(base)?;
    check_pool(&cfg, &scenes)?;
    let seed = seed_of(&cfg);
    let model = ToyModel::new(cfg.model.clone())?;
    let set = calib_scenes(&scenes, calib, cfg.budget)?;
    let scheme = cfg.quant_scheme(cfg.scheme);
    let start = Instant::now();
    let (qmodel, logs) = if no_search {
        let q = quantsmooth::model::quantize_model(&model, &set, scheme)?;
        (q, Vec::<BlockLog>::new())
    } else {
        calibrate_blockwise(&model, &set, scheme, &cfg.calib)?
    };
    let total = start.elapsed().as_secs_f64();
    let prov = cfg.provenance(seed);
    let manifest = ModelManifest {
        tool_version: prov.tool_version.clone(),
        config_hash: prov.config_hash.clone(),
        seed,
        model: cfg.model.clone(),
        scheme,
        layers: layer_names(cfg.model.n_blocks),
    };
    write_quantized_model(&common.out, &qmodel, &manifest)?;
    write_json(
        &common.out.join("calibration_log.json"),
        &CalibrationLog {
            provenance: prov.clone(),
            blocks: logs
                .iter()
                .map(|l| LogEntry {
                    block: l.block,
                    initial_loss: l.initial_loss,
                    final_loss: l.final_loss,
                    passes: l.passes,
                    accepted: l.accepted,
                    loss_trace: l.loss_trace.clone(),
                })
                .collect(),
        },
    )?;
    let mut timing: Vec<TimingEntry> = logs
        .iter()
        .map(|l| TimingEntry {
            block: l.block,
            wall_time_s: l.wall_time_s,
        })
        .collect();
    timing.push(TimingEntry {
        block: usize::MAX,
        wall_time_s: total,
    });
    fs::write(
        common.out.join("calibration_timing.json"),
        serde_json::to_string_pretty(&timing)? + "\n",
    )?;
    write_json(
        &common.out.join("config.json"),
        &RunRecord {
            provenance: prov,
            config: cfg,
        },
    )
}

fn eval(common: &Common, model_dir: &Path) -> Result<()> {
    let rec = model_dir.join("config.json");
    let base = if rec.exists() {
        Some(read_json::<RunRecord>(&rec)?.config)
    } else {
        None
    };
    let cfg = common.resolve(base)?;
    let (qmodel, manifest) = read_quantized_model(model_dir)?;
    if manifest.model != cfg.model {
        return Err(Error::InvalidInput(
            "model file was built for a different toy-model configuration".into(),
        ));
    }
    let model = ToyModel::new(cfg.model.clone())?;
    let eval_set = cfg.gen_eval_set()?;
    let loss = model_quant_loss(&model, &qmodel, &eval_set)?;
    let x = model.register_batch(&eval_set)?;
    let (mut a, mut b) = (x.clone(), x);
    let mut block_output_mse = Vec::new();
    for (w, qb) in model.blocks().iter().zip(&qmodel.blocks) {
        a = w.forward_fp(&cfg.model, &a)?.out;
        b = w.forward_with(&cfg.model, &b, qb.lins())?.out;
        block_output_mse.push(quantsmooth::tensor::mse(&a, &b)?);
    }
    let bits = Bits {
        weight: qmodel.scheme.weight.bits,
        act: qmodel.scheme.act.bits,
    };
    write_json(
        &common.out,
        &EvalReport {
            provenance: cfg.provenance(manifest.seed),
            scheme: qmodel.scheme.variant,
            bits,
            eval_scenes: eval_set.len(),
            model_quant_loss: loss,
            block_output_mse,
        },
    )
}

fn stats(common: &Common, pool_dir: &Path, calib: Option<&Path>) -> Result<()> {
    let (scenes, base) = load_pool(pool_dir)?;
    let cfg = common.resolve(base)?;
    check_pool(&cfg, &scenes)?;
    let model = ToyModel::new(cfg.model.clone())?;
    let set = calib_scenes(&scenes, calib, cfg.budget)?;
    let report = distribution_stats(&cfg, &model, &set, cfg.scheme, seed_of(&cfg))?;
    write_json(&common.out, &report)
}

fn ablate(common: &Common, pool_dir: Option<&Path>, kind: KindArg, arms: Vec<String>) -> Result<()> {
    let (mut ws, cfg) = match pool_dir {
        Some(dir) => {
            let (scenes, base) = load_pool(dir)?;
            let cfg = common.resolve(base)?;
            check_pool(&cfg, &scenes)?;
            (Workspace::with_pool(cfg.clone(), scenes)?, cfg)
        }
        None => {
            let cfg = common.resolve(None)?;
            (Workspace::new(cfg.clone())?, cfg)
        }
    };
    let kinds: Vec<AblationKind> = match kind {
        KindArg::Schemes => vec![AblationKind::Schemes],
        KindArg::Granularity => vec![AblationKind::Granularity],
        KindArg::Order => vec![AblationKind::Order],
        KindArg::Sampling => vec![AblationKind::Sampling],
        KindArg::All => AblationKind::ALL.to_vec(),
    };
    if !arms.is_empty() && kinds.len() > 1 {
        return Err(Error::InvalidInput("--arms needs a single --kind".into()));
    }
    fs::create_dir_all(&common.out)?;
    for k in kinds {
        let arms = if arms.is_empty() { k.default_arms() } else { arms.clone() };
        let report = ws.run_ablation(k, &arms)?;
        write_json(&common.out.join(format!("report_{}.json", k.name())), &report)?;
        fs::write(common.out.join(format!("report_{}.csv", k.name())), report.to_csv())?;
    }
    write_json(
        &common.out.join("config.json"),
        &RunRecord {
            provenance: cfg.provenance(seed_of(&cfg)),
            config: cfg,
        },
    )
}
