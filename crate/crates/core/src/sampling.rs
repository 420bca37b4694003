//! Noise-filtered diverse sampling of calibration scenes.
//!
//! Candidates are scored by how far their deep-layer activation statistics
//! sit from the pool's robust moments, the noisiest are dropped, and the rest
//! are clustered on frame-correlation vectors and sampled proportionally per
//! cluster.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Scene, ToyModel, SPECIAL_TOKENS};
use crate::rng::SeededRng;
use crate::tensor::{moments, Tensor};

/// Variance floor of the robust moments.
pub const SCORE_EPSILON: f64 = 1e-6;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.2;
pub const DEFAULT_CLUSTERS: usize = 8;
pub const DEFAULT_BUDGET: usize = 40;
pub const DEFAULT_LAYER_FRACTION: f64 = 0.5;
pub const KMEANS_TOLERANCE: f64 = 1e-6;
pub const KMEANS_MAX_ITERS: usize = 100;

/// Activation mean and variance of one sample at each selected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStatRecord {
    pub sample_id: usize,
    pub layers: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Robust moments of the pool, one entry per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub nu: Vec<f64>,
    pub tau: Vec<f64>,
    pub epsilon: f64,
}

/// The last `⌈fraction · n_blocks⌉` block indices.
pub fn deep_layers(n_blocks: usize, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("layer fraction {fraction} not in (0, 1]")));
    }
    let k = ((fraction * n_blocks as f64).ceil() as usize).clamp(1, n_blocks);
    Ok((n_blocks - k..n_blocks).collect())
}

/// Mean and population variance over every element of each tensor.
pub fn layer_record(sample_id: usize, layers: &[usize], acts: &[&Tensor]) -> LayerStatRecord {
    let (mean, var) = acts.iter().map(|a| moments(a.data())).unzip();
    LayerStatRecord {
        sample_id,
        layers: layers.to_vec(),
        mean,
        var,
    }
}

/// Deep-layer statistics and final-feature frame correlations of every
/// scene, from one forward pass per scene.
#[derive(Debug, Clone)]
pub struct PoolFeatures {
    pub records: Vec<LayerStatRecord>,
    pub corr: Vec<Vec<f64>>,
}

const BATCH: usize = 16;

pub fn analyze_pool(
    model: &ToyModel,
    pool: &[Scene],
    layer_fraction: f64,
    include_special: bool,
) -> Result<PoolFeatures> {
    if pool.is_empty() {
        return Err(Error::invalid("empty pool"));
    }
    let cfg = model.config();
    let layers = deep_layers(cfg.n_blocks, layer_fraction)?;
    let n = cfg.tokens_per_scene();
    let mut records = Vec::with_capacity(pool.len());
    let mut corr = Vec::with_capacity(pool.len());
    for chunk in pool.chunks(BATCH) {
        let trace = model.forward_tokens(&model.register_batch(chunk)?)?;
        for (i, scene) in chunk.iter().enumerate() {
            let acts = layers
                .iter()
                .map(|&l| trace.block_inputs[l].slice_rows(i * n, (i + 1) * n))
                .collect::<Result<Vec<_>>>()?;
            records.push(layer_record(scene.id, &layers, &acts.iter().collect::<Vec<_>>()));
            let out = trace.output.slice_rows(i * n, (i + 1) * n)?;
            corr.push(frame_corr_vector(&out, cfg.s, cfg.f, include_special)?);
        }
    }
    Ok(PoolFeatures { records, corr })
}

pub fn collect_layer_stats(
    model: &ToyModel,
    pool: &[Scene],
    layer_fraction: f64,
) -> Result<Vec<LayerStatRecord>> {
    Ok(analyze_pool(model, pool, layer_fraction, true)?.records)
}

fn pop_moments(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Root of the summed squared z-scores of each record's means and variances
/// against the pool moments.
pub fn noise_scores(records: &[LayerStatRecord]) -> Result<(Vec<f64>, ScoreStats)> {
    if records.len() < 2 {
        return Err(Error::DegeneratePool(format!(
            "noise scores need at least 2 samples, got {}",
            records.len()
        )));
    }
    let layers = records[0].mean.len();
    if records
        .iter()
        .any(|r| r.mean.len() != layers || r.var.len() != layers)
    {
        return Err(Error::dim("records cover different layer sets"));
    }
    let mut st = ScoreStats {
        mu: Vec::with_capacity(layers),
        sigma: Vec::with_capacity(layers),
        nu: Vec::with_capacity(layers),
        tau: Vec::with_capacity(layers),
        epsilon: SCORE_EPSILON,
    };
    for j in 0..layers {
        let (mu, vm) = pop_moments(records.iter().map(|r| r.mean[j]));
        let (nu, vs) = pop_moments(records.iter().map(|r| r.var[j]));
        st.mu.push(mu);
        st.sigma.push((vm + SCORE_EPSILON).sqrt());
        st.nu.push(nu);
        st.tau.push((vs + SCORE_EPSILON).sqrt());
    }
    let scores = records
        .iter()
        .map(|r| {
            (0..layers)
                .map(|j| {
                    let a = (r.mean[j] - st.mu[j]) / st.sigma[j];
                    let b = (r.var[j] - st.nu[j]) / st.tau[j];
                    a * a + b * b
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect::<Vec<_>>();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite noise score"));
    }
    Ok((scores, st))
}

/// How the keep fraction is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep the `⌈T·|pool|⌉` lowest scores.
    #[default]
    KeepLowest,
    /// Drop the `⌊T·|pool|⌋` highest scores.
    DropHighest,
}

/// Positions of the kept samples, in ascending score order (ties by id).
pub fn filter_pool(ids: &[usize], scores: &[f64], fraction: f64, mode: FilterMode) -> Result<Vec<usize>> {
    if ids.len() != scores.len() {
        return Err(Error::dim(format!("{} ids for {} scores", ids.len(), scores.len())));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("keep fraction {fraction} not in (0, 1]")));
    }
    let n = ids.len();
    let keep = match mode {
        FilterMode::KeepLowest => (fraction * n as f64).ceil() as usize,
        FilterMode::DropHighest => n - (fraction * n as f64).floor() as usize,
    }
    .min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    order.truncate(keep);
    Ok(order)
}

/// Cosine similarity of each later frame with the first, on the flattened
/// per-frame token blocks of `a` (`(s + 5)·f × d`, frame-major).
pub fn frame_corr_vector(a: &Tensor, s: usize, f: usize, include_special: bool) -> Result<Vec<f64>> {
    let (n, d) = a.dims2()?;
    let per = s + SPECIAL_TOKENS;
    if n != per * f || f < 2 {
        return Err(Error::dim(format!("{n} tokens do not match {f} frames of {per}")));
    }
    let width = if include_special { per } else { s } * d;
    let frame = |t: usize| &a.data()[t * per * d..t * per * d + width];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a0 = frame(0);
    let n0 = norm(a0);
    (1..f)
        .map(|t| {
            let at = frame(t);
            let nt = norm(at);
            if n0 == 0.0 || nt == 0.0 {
                return Err(Error::numeric(format!("frame {} has zero norm", if n0 == 0.0 { 0 } else { t })));
            }
            let c = a0.iter().zip(at).map(|(x, y)| x * y).sum::<f64>() / (n0 * nt);
            Ok(c.clamp(-1.0, 1.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub seed: u64,
    pub iterations: usize,
    /// Within-cluster sum of squares after each Lloyd update.
    pub sse_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn sse(&self, vectors: &[Vec<f64>]) -> f64 {
        sse(vectors, &self.centroids, &self.assignments)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sse(vectors: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    vectors
        .iter()
        .zip(assign)
        .map(|(v, &a)| dist2(v, &centroids[a]))
        .sum()
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 || vectors.len() < k {
        return Err(Error::invalid(format!(
            "k-means with K = {k} needs at least K vectors, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::dim("vectors differ in length"));
    }
    let mut rng = SeededRng::new(seed);
    let mut centroids = vec![vectors[rng.below(vectors.len())].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| dist2(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            rng.below(vectors.len())
        };
        centroids.push(vectors[pick].clone());
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(dist2(v, &centroids[centroids.len() - 1]));
        }
    }

    let mut assign: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids)).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        repair_empty(vectors, &mut centroids, &mut assign);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            let new: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
            shift = shift.max(dist2(c, &new).sqrt());
            *c = new;
        }
        history.push(sse(vectors, &centroids, &assign));
        assign = vectors.iter().map(|v| nearest(v, &centroids)).collect();
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    repair_empty(vectors, &mut centroids, &mut assign);
    Ok(ClusterModel {
        centroids,
        assignments: assign,
        seed,
        iterations,
        sse_history: history,
    })
}

/// Move each empty cluster's centroid onto the point farthest from its own
/// centroid, taken from a cluster with more than one member.
fn repair_empty(vectors: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..vectors.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&i, &j| {
                dist2(&vectors[i], &centroids[assign[i]])
                    .partial_cmp(&dist2(&vectors[j], &centroids[assign[j]]))
                    .unwrap_or(Ordering::Equal)
                    .then(j.cmp(&i))
            })
            .expect("at least K vectors");
        centroids[empty] = vectors[far].clone();
        assign[far] = empty;
    }
}

/// Per-cluster quotas: `round(budget · size / total)`, then corrected to sum
/// to `budget` by adding to the largest clusters (or taking from the
/// smallest), never exceeding a cluster's size.
pub fn quotas(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if budget == 0 {
        return Err(Error::invalid("budget must be positive"));
    }
    if budget > total {
        return Err(Error::invalid(format!("budget {budget} exceeds {total} candidates")));
    }
    let mut q: Vec<usize> = sizes
        .iter()
        .map(|&s| ((budget * s) as f64 / total as f64).round() as usize)
        .map(|v| v.min(budget))
        .zip(sizes)
        .map(|(v, &s)| v.min(s))
        .collect();
    // Largest first, ties by cluster index.
    let mut by_size: Vec<usize> = (0..sizes.len()).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut assigned: usize = q.iter().sum();
    while assigned < budget {
        let k = *by_size
            .iter()
            .find(|&&k| q[k] < sizes[k])
            .expect("budget within total");
        q[k] += 1;
        assigned += 1;
    }
    while assigned > budget {
        let k = *by_size
            .iter()
            .rev()
            .find(|&&k| q[k] > 0)
            .expect("positive quota exists");
        q[k] -= 1;
        assigned -= 1;
    }
    Ok(q)
}

fn sample_without_replacement(items: &mut [usize], count: usize, rng: &mut SeededRng) -> Vec<usize> {
    for i in 0..count {
        let j = i + rng.below(items.len() - i);
        items.swap(i, j);
    }
    items[..count].to_vec()
}

/// Positions (into the clustered vectors) chosen by proportional per-cluster
/// uniform sampling, sorted ascending.
pub fn diverse_sample(model: &ClusterModel, budget: usize, seed: u64) -> Result<Vec<usize>> {
    let q = quotas(&model.cluster_sizes(), budget)?;
    let mut out = Vec::with_capacity(budget);
    for (k, &quota) in q.iter().enumerate() {
        let mut members: Vec<usize> = (0..model.assignments.len())
            .filter(|&i| model.assignments[i] == k)
            .collect();
        let mut rng = SeededRng::new(seed).child(k as u64);
        out.extend(sample_without_replacement(&mut members, quota, &mut rng));
    }
    out.sort_unstable();
    Ok(out)
}

/// `budget` uniform positions out of `n`, sorted ascending.
pub fn random_sample(n: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget == 0 || budget > n {
        return Err(Error::invalid(format!("cannot draw {budget} of {n}")));
    }
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = sample_without_replacement(&mut items, budget, &mut SeededRng::new(seed));
    out.sort_unstable();
    Ok(out)
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("not a probability vector"));
    }
    Ok(())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

/// Grid search over the probability simplex in `n` dimensions with spacing
/// `step`; returns the maximum-entropy point (first found on ties).
pub fn max_entropy_oracle(n: usize, step: f64) -> Result<Vec<f64>> {
    if n == 0 || !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid("need n >= 1 and step in (0, 1]"));
    }
    let units = (1.0 / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut counts = vec![0usize; n];
    fn walk(i: usize, left: usize, counts: &mut Vec<usize>, units: usize, best: &mut (f64, Vec<f64>)) {
        if i == counts.len() - 1 {
            counts[i] = left;
            let p: Vec<f64> = counts.iter().map(|&c| c as f64 / units as f64).collect();
            let h = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
            if h > best.0 + 1e-15 {
                *best = (h, p);
            }
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            walk(i + 1, left - c, counts, units, best);
        }
    }
    walk(0, units, &mut counts, units, &mut best);
    Ok(best.1)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("labelings must be non-empty and equally long"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Result of the full selection pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub scores: Vec<f64>,
    pub stats: ScoreStats,
    /// Positions into the pool that survived filtering.
    pub filtered: Vec<usize>,
    pub clusters: ClusterModel,
    /// Selected positions into the pool, ascending.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub keep_fraction: f64,
    pub filter_mode: FilterMode,
    pub clusters: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            keep_fraction: DEFAULT_KEEP_FRACTION,
            filter_mode: FilterMode::KeepLowest,
            clusters: DEFAULT_CLUSTERS,
            budget: DEFAULT_BUDGET,
            seed: 0,
        }
    }
}

/// Filter, cluster and sample, given precomputed pool features.
pub fn select_from_features(ids: &[usize], features: &PoolFeatures, cfg: &SelectConfig) -> Result<Selection> {
    let (scores, stats) = noise_scores(&features.records)?;
    let filtered = filter_pool(ids, &scores, cfg.keep_fraction, cfg.filter_mode)?;
    let vectors: Vec<Vec<f64>> = filtered.iter().map(|&i| features.corr[i].clone()).collect();
    let clusters = kmeans(&vectors, cfg.clusters, cfg.seed)?;
    let picked = diverse_sample(&clusters, cfg.budget, cfg.seed)?;
    let mut selected: Vec<usize> = picked.iter().map(|&p| filtered[p]).collect();
    selected.sort_unstable();
    Ok(Selection {
        scores,
        stats,
        filtered,
        clusters,
        selected,
    })
}
