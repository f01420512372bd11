//! Deterministic desk-scale model zoos.
//!
//! A zoo is a set of networks with one architecture, each trained from its
//! own seed on a synthetic Gaussian-blob classification task. Blob centres
//! are fixed by the task seed so every model solves the same problem; the
//! per-model seed drives initialisation, sample draws and minibatch order.
//!
//! Directory layout:
//!
//! ```text
//! <zoo>/manifest.json
//! <zoo>/benign/<id>.mzw
//! <zoo>/attacked/x<X>/manifest.json
//! <zoo>/attacked/x<X>/<id>.mzw
//! ```

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::netcore::{train_sgd, Loss, Network, Samples, TrainConfig};
use crate::rng;
use crate::stegattack::{embed_fill, AttackMode, AttackSpec, Payload, LABEL_BENIGN, META_LABEL};
use crate::tensorstore::{Arch, ModelRecord, WeightVector};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobTask {
    pub classes: usize,
    /// Standard deviation of each blob.
    pub spread: f64,
    /// Blob centres sit evenly on a circle of this radius.
    pub radius: f64,
    /// Distance of the circle's centre from the origin, toward the first
    /// class. Non-zero keeps the all-zero input off the decision boundary.
    pub shift: f64,
    /// Samples per model.
    pub samples: usize,
    pub seed: u64,
}

impl BlobTask {
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let offset = rng::seeded(rng::derive_seed(self.seed, 0xB10B)).gen_range(0.0..TAU);
        (0..self.classes)
            .map(|k| {
                let angle = offset + TAU * k as f64 / self.classes as f64;
                [
                    self.radius * angle.cos() + self.shift * offset.cos(),
                    self.radius * angle.sin() + self.shift * offset.sin(),
                ]
            })
            .collect()
    }

    /// Draws a balanced sample set with one-hot targets.
    pub fn sample(&self, seed: u64) -> Samples {
        let centers = self.centers();
        let mut rng = rng::seeded(seed);
        let mut inputs = Vec::with_capacity(self.samples);
        let mut targets = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let class = i % self.classes;
            let c = centers[class];
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            inputs.push(vec![c[0] + self.spread * dx, c[1] + self.spread * dy]);
            let mut t = vec![0.0; self.classes];
            t[class] = 1.0;
            targets.push(t);
        }
        Samples { inputs, targets }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

/// Payload digest and severity for an attacked zoo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub payload_sha256: String,
    pub payload_bits: usize,
    pub x_lsb: u32,
    pub mode: AttackMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub zoo_id: String,
    pub arch: Arch,
    pub count: usize,
    pub task: BlobTask,
    pub train: TrainSettings,
    pub accuracy_floor: f64,
    /// Per-model initial weights are a shared zoo base plus this fraction of
    /// the fan-in bound as seeded uniform noise. `1.0` or more approaches
    /// fully independent initialisation.
    pub init_jitter: f64,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ZooManifest {
    /// `count` models of `arch` with per-model seeds derived from `seed`.
    /// The blob task has one class per output unit.
    pub fn new(zoo_id: impl Into<String>, arch: Arch, count: usize, seed: u64) -> Result<Self> {
        if arch.input_width() != 2 {
            return Err(Error::Argument(format!("blob task needs 2 inputs, arch {arch} has {}", arch.input_width())));
        }
        let classes = arch.output_width();
        if classes < 2 {
            return Err(Error::Argument("blob task needs at least 2 output classes".into()));
        }
        Ok(ZooManifest {
            zoo_id: zoo_id.into(),
            count,
            task: BlobTask { classes, spread: 0.6, radius: 2.0, shift: 1.0, samples: 200, seed },
            train: TrainSettings { epochs: 60, lr: 0.05, batch: 16 },
            accuracy_floor: 0.9,
            init_jitter: 0.05,
            seeds: (0..count as u64).map(|i| rng::derive_seed(seed, 1000 + i)).collect(),
            provenance: None,
            arch,
        })
    }

    /// The default zoo: 200 tanh MLPs of shape 2-8-8-2.
    pub fn desk_default(zoo_id: impl Into<String>, seed: u64) -> Self {
        ZooManifest::new(zoo_id, "2-8-8-2".parse().expect("valid arch"), 200, seed).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.count < 2 {
            return Err(Error::Argument(format!("a zoo needs at least 2 models, got {}", self.count)));
        }
        if self.seeds.len() != self.count {
            return Err(Error::Argument(format!("{} seeds for {} models", self.seeds.len(), self.count)));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Argument("per-model seeds must be distinct".into()));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::Argument(format!("init_jitter must be finite and non-negative, got {}", self.init_jitter)));
        }
        if self.task.classes != self.arch.output_width() || self.arch.input_width() != 2 {
            return Err(Error::Argument("blob task shape does not match the architecture".into()));
        }
        Ok(())
    }

    pub fn model_id(&self, index: usize) -> String {
        format!("{}-{index:04}", self.zoo_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Shared base initialisation (from the task seed) plus per-model jitter.
fn member_init(manifest: &ZooManifest, seed: u64) -> Result<Network> {
    let base = Network::init(&manifest.arch, rng::derive_seed(manifest.task.seed, 0xBA5E))?;
    let mut rng = rng::stream(seed, 2);
    let bounds = manifest.arch.layer_dims().flat_map(|(out, inp)| {
        std::iter::repeat_n(1.0 / (inp as f64).sqrt(), out * inp + out)
    });
    let w = base
        .weights()
        .0
        .iter()
        .zip(bounds)
        .map(|(&v, bound)| (v as f64 + manifest.init_jitter * bound * rng.gen_range(-1.0..1.0)) as f32)
        .collect();
    let record = ModelRecord::unflatten(manifest.arch.clone(), &WeightVector(w), BTreeMap::new())?;
    Ok(Network::from_model(&record))
}

/// Trains one zoo member.
pub fn train_member(manifest: &ZooManifest, index: usize) -> Result<ModelRecord> {
    let seed = manifest.seeds[index];
    let data = manifest.task.sample(rng::derive_seed(seed, 1));
    let init = member_init(manifest, seed)?;
    let cfg = TrainConfig {
        epochs: manifest.train.epochs,
        lr: manifest.train.lr,
        batch: manifest.train.batch,
        loss: Loss::CrossEntropy,
        seed: rng::derive_seed(seed, 3),
    };
    let trained = train_sgd(&init, &data, &cfg)?;
    let accuracy = trained.net.accuracy(&data)?;
    if accuracy < manifest.accuracy_floor {
        return Err(Error::Generation { seed, accuracy, floor: manifest.accuracy_floor });
    }
    let mut meta = BTreeMap::new();
    meta.insert("id".to_string(), manifest.model_id(index));
    meta.insert("zoo".to_string(), manifest.zoo_id.clone());
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert(META_LABEL.to_string(), LABEL_BENIGN.to_string());
    meta.insert("train_accuracy".to_string(), format!("{accuracy}"));
    Ok(trained.net.to_model(meta))
}

/// Trains every member in parallel; output order follows the manifest.
pub fn generate_zoo(manifest: &ZooManifest) -> Result<Vec<ModelRecord>> {
    manifest.validate()?;
    (0..manifest.count).into_par_iter().map(|i| train_member(manifest, i)).collect()
}

/// Applies the fill attack with the same `X` and payload to every model.
pub fn attack_zoo(zoo: &[ModelRecord], x: u32, payload: &Payload) -> Result<Vec<ModelRecord>> {
    let spec = AttackSpec::new(x, AttackMode::Fill)?;
    if payload.is_empty() {
        return Err(Error::Argument("attack payload must be non-empty".into()));
    }
    zoo.par_iter().map(|m| embed_fill(m, spec, payload)).collect()
}

pub fn benign_dir(zoo_dir: &Path) -> PathBuf {
    zoo_dir.join("benign")
}

pub fn attacked_dir(zoo_dir: &Path, x: u32) -> PathBuf {
    zoo_dir.join("attacked").join(format!("x{x}"))
}

fn model_file_name(m: &ModelRecord, index: usize) -> String {
    match m.id() {
        Some(id) => format!("{id}.mzw"),
        None => format!("{index:04}.mzw"),
    }
}

pub fn save_models(dir: &Path, models: &[ModelRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in models.iter().enumerate() {
        m.save(dir.join(model_file_name(m, i)))?;
    }
    Ok(())
}

/// Loads every `.mzw` in `dir`, sorted by file name.
pub fn load_models(dir: &Path) -> Result<Vec<ModelRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mzw"))
        .collect();
    paths.sort();
    paths.par_iter().map(ModelRecord::load).collect()
}

pub fn save_zoo(zoo_dir: &Path, manifest: &ZooManifest, models: &[ModelRecord]) -> Result<()> {
    std::fs::create_dir_all(zoo_dir).map_err(|e| Error::io(zoo_dir, e))?;
    manifest.save(zoo_dir.join("manifest.json"))?;
    save_models(&benign_dir(zoo_dir), models)
}

pub fn save_attacked(
    zoo_dir: &Path,
    manifest: &ZooManifest,
    x: u32,
    payload: &Payload,
    models: &[ModelRecord],
) -> Result<()> {
    let dir = attacked_dir(zoo_dir, x);
    save_models(&dir, models)?;
    let mut m = manifest.clone();
    m.provenance = Some(Provenance {
        payload_sha256: payload.digest(),
        payload_bits: payload.len(),
        x_lsb: x,
        mode: AttackMode::Fill,
    });
    m.save(dir.join("manifest.json"))
}

/// Severities with an `attacked/x<X>` directory, ascending.
pub fn attacked_levels(zoo_dir: &Path) -> Result<Vec<u32>> {
    let dir = zoo_dir.join("attacked");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut levels: Vec<u32> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix('x')?.parse().ok())
        .collect();
    levels.sort_unstable();
    Ok(levels)
}
