use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::Provenance;
use crate::format::{read_tensor, write_tensor};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::config::{ToyModelConfig, SPECIAL_TOKENS};

const MANIFEST: &str = "manifest.json";
const ORACLE: &str = "oracle.json";

/// Correlation of frames 1..f with frame 0 for the first four domains.
const PROFILES: [[f64; 3]; 4] = [
    [0.95, 0.90, 0.85],
    [0.20, 0.15, 0.10],
    [0.90, 0.20, 0.90],
    [0.20, 0.90, 0.20],
];
const PROFILE_JITTER: f64 = 0.05;
const OUTLIER_GAIN: f64 = 2.0;
const OUTLIER_SPIKES: usize = 2;
const OUTLIER_SPIKE_RANGE: (f64, f64) = (15.0, 30.0);

/// Generator ground truth for a scene. Only tests and reports read it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub domain_id: usize,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    /// `f` tensors of `s × d` patch tokens.
    pub frames: Vec<Tensor>,
    pub label: Option<SceneLabel>,
}

impl Scene {
    pub fn new(id: usize, frames: Vec<Tensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("scene without frames"))?
            .dims2()?;
        for f in &frames {
            if f.dims2()? != first {
                return Err(Error::dim("frames of one scene must share a shape"));
            }
        }
        Ok(Self {
            id,
            frames,
            label: None,
        })
    }

    pub fn domain_id(&self) -> Option<usize> {
        self.label.map(|l| l.domain_id)
    }

    pub fn is_outlier(&self) -> bool {
        self.label.is_some_and(|l| l.is_outlier)
    }
}

/// Target correlation of each later frame with the first.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProfile {
    pub rho: Vec<f64>,
}

impl DomainProfile {
    pub fn for_domain(domain_id: usize, frames: usize) -> Self {
        let mut rng = SeededRng::new(0x5CE4E).child(domain_id as u64);
        let rho = (0..frames - 1)
            .map(|t| match PROFILES.get(domain_id) {
                Some(p) => p[t % p.len()],
                None => 0.1 + 0.85 * rng.uniform(),
            })
            .collect();
        Self { rho }
    }
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// One scene of `domain_id`. Frame 0 is Gaussian; frame `t` mixes it with
/// fresh noise so its correlation with frame 0 is close to the domain profile.
pub fn gen_scene(cfg: &ToyModelConfig, domain_id: usize, rng: &mut SeededRng) -> Result<Scene> {
    let (s, d, f) = (cfg.s, cfg.d, cfg.f);
    let profile = DomainProfile::for_domain(domain_id, f);
    let base: Vec<f64> = (0..s * d).map(|_| rng.gaussian()).collect();
    let mut frames = Vec::with_capacity(f);
    frames.push(Tensor::matrix(s, d, base.iter().map(|&v| f32_exact(v)).collect())?);
    for &rho in &profile.rho {
        let r = (rho + PROFILE_JITTER * (2.0 * rng.uniform() - 1.0)).clamp(-1.0, 1.0);
        let keep = (1.0 - r * r).sqrt();
        let data = base
            .iter()
            .map(|&b| f32_exact(r * b + keep * rng.gaussian()))
            .collect();
        frames.push(Tensor::matrix(s, d, data)?);
    }
    let mut scene = Scene::new(0, frames)?;
    scene.label = Some(SceneLabel {
        domain_id,
        is_outlier: false,
    });
    Ok(scene)
}

/// Scale every patch token and plant large spikes on random channels.
fn inflate(scene: &mut Scene, rng: &mut SeededRng) -> Result<()> {
    let (lo, hi) = OUTLIER_SPIKE_RANGE;
    for frame in &mut scene.frames {
        let (s, d) = frame.dims2()?;
        let mut data: Vec<f64> = frame.data().iter().map(|v| v * OUTLIER_GAIN).collect();
        for row in data.chunks_exact_mut(d) {
            for _ in 0..OUTLIER_SPIKES {
                let c = rng.below(d);
                let mag = lo + (hi - lo) * rng.uniform();
                row[c] = f64::from(rng.sign()) * mag;
            }
        }
        *frame = Tensor::matrix(s, d, data.into_iter().map(f32_exact).collect())?;
    }
    if let Some(l) = scene.label.as_mut() {
        l.is_outlier = true;
    }
    Ok(())
}

/// `n_domains × per_domain` scenes, domains interleaved by id. Exactly
/// `round(outlier_frac · total)` scenes are inflated outliers.
pub fn gen_pool(
    cfg: &ToyModelConfig,
    n_domains: usize,
    per_domain: usize,
    outlier_frac: f64,
    seed: u64,
) -> Result<Vec<Scene>> {
    if !(0.0..=0.2).contains(&outlier_frac) {
        return Err(Error::invalid(format!("outlier_frac {outlier_frac} not in [0, 0.2]")));
    }
    if n_domains == 0 || per_domain == 0 {
        return Err(Error::invalid("pool must have at least one domain and one scene"));
    }
    let total = n_domains * per_domain;
    let root = SeededRng::new(seed);
    let mut order: Vec<usize> = (0..total).collect();
    let mut pick = root.child(u64::MAX);
    for i in (1..total).rev() {
        order.swap(i, pick.below(i + 1));
    }
    let n_out = (outlier_frac * total as f64).round() as usize;
    let mut outlier = vec![false; total];
    for &i in &order[..n_out] {
        outlier[i] = true;
    }
    (0..total)
        .map(|id| {
            let mut rng = root.child(id as u64);
            let mut scene = gen_scene(cfg, id % n_domains, &mut rng)?;
            scene.id = id;
            if outlier[id] {
                inflate(&mut scene, &mut rng)?;
            }
            Ok(scene)
        })
        .collect()
}

/// Frame-major `(s + 5)·f × d` tokens: each frame's patches followed by
/// `t_first` (frame 0) or `t_other` (later frames).
pub fn register_tokens(scene: &Scene, t_first: &Tensor, t_other: &Tensor) -> Result<Tensor> {
    let (s, d) = scene.frames[0].dims2()?;
    for t in [t_first, t_other] {
        if t.dims2()? != (SPECIAL_TOKENS, d) {
            return Err(Error::dim(format!(
                "special tokens are {:?}, expected {SPECIAL_TOKENS}x{d}",
                t.shape()
            )));
        }
    }
    let mut data = Vec::with_capacity((s + SPECIAL_TOKENS) * d * scene.frames.len());
    for (i, frame) in scene.frames.iter().enumerate() {
        if frame.dims2()? != (s, d) {
            return Err(Error::dim("frames of one scene must share a shape"));
        }
        data.extend_from_slice(frame.data());
        data.extend_from_slice(if i == 0 { t_first } else { t_other }.data());
    }
    Tensor::matrix(data.len() / d, d, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub scene_id: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolManifest {
    pub f: usize,
    pub s: usize,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub scenes: Vec<PoolEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleEntry {
    scene_id: usize,
    domain_id: usize,
    is_outlier: bool,
}

/// Write each scene as an `f × s × d` QTSR file plus `manifest.json`; labels
/// go to a separate `oracle.json`.
pub fn write_pool(
    dir: impl AsRef<Path>,
    scenes: &[Scene],
    provenance: Option<Provenance>,
) -> Result<PoolManifest> {
    let dir = dir.as_ref();
    let first = scenes.first().ok_or_else(|| Error::invalid("empty pool"))?;
    let (s, d) = first.frames[0].dims2()?;
    let f = first.frames.len();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    let mut oracle = Vec::new();
    for scene in scenes {
        if scene.frames.len() != f || scene.frames[0].dims2()? != (s, d) {
            return Err(Error::dim(format!("scene {} differs in shape", scene.id)));
        }
        let file = format!("scene_{:05}.qtsr", scene.id);
        let mut data = Vec::with_capacity(f * s * d);
        for fr in &scene.frames {
            data.extend_from_slice(fr.data());
        }
        write_tensor(dir.join(&file), &Tensor::new(vec![f, s, d], data)?)?;
        entries.push(PoolEntry {
            scene_id: scene.id,
            file,
        });
        if let Some(label) = scene.label {
            oracle.push(OracleEntry {
                scene_id: scene.id,
                domain_id: label.domain_id,
                is_outlier: label.is_outlier,
            });
        }
    }
    let manifest = PoolManifest {
        f,
        s,
        d,
        provenance,
        scenes: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if !oracle.is_empty() {
        fs::write(dir.join(ORACLE), serde_json::to_string_pretty(&oracle)? + "\n")?;
    }
    Ok(manifest)
}

/// Read a pool directory. Labels are attached only when `with_labels` is set
/// and an oracle file exists.
pub fn read_pool(dir: impl AsRef<Path>, with_labels: bool) -> Result<(PoolManifest, Vec<Scene>)> {
    let dir = dir.as_ref();
    let manifest: PoolManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for e in &manifest.scenes {
        let t: Tensor = read_tensor(dir.join(&e.file))?;
        if t.shape() != [manifest.f, manifest.s, manifest.d] {
            return Err(Error::Format(format!(
                "{} has shape {:?}, manifest says {}x{}x{}",
                e.file,
                t.shape(),
                manifest.f,
                manifest.s,
                manifest.d
            )));
        }
        let per = manifest.s * manifest.d;
        let frames = t
            .data()
            .chunks_exact(per)
            .map(|c| Tensor::matrix(manifest.s, manifest.d, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        scenes.push(Scene::new(e.scene_id, frames)?);
    }
    let oracle_path = dir.join(ORACLE);
    if with_labels && oracle_path.exists() {
        let oracle: Vec<OracleEntry> = serde_json::from_slice(&fs::read(oracle_path)?)?;
        for o in oracle {
            if let Some(sc) = scenes.iter_mut().find(|s| s.id == o.scene_id) {
                sc.label = Some(SceneLabel {
                    domain_id: o.domain_id,
                    is_outlier: o.is_outlier,
                });
            }
        }
    }
    Ok((manifest, scenes))
}
