//! Per-model steganalysis features and labelled feature datasets.
//!
//! Three feature families:
//!
//! - `loss`: autoencoder reconstruction error of the z-scored weight vector (1-D).
//! - `grads`: the flattened backprop gradient for an all-zero input (n_W-D).
//! - `weights`: the raw weight vector (n_W-D).
//!
//! Datasets are written as CSV with header `model_id,label,x_lsb,f0,…`.
//! Finite values use Rust's shortest round-trip formatting; infinities are
//! `inf`/`-inf`; NaN is written as `nan:0x<f64 bits>` so payload bits survive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::netcore::{train_sgd, Loss, Network, Samples, TrainConfig};
use crate::rng;
use crate::stegattack::{LABEL_BENIGN, LABEL_MALICIOUS, META_LABEL, META_X_LSB};
use crate::tensorstore::{Activation, Arch, ModelRecord};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn of(m: &ModelRecord) -> Result<Label> {
        match m.meta.get(META_LABEL).map(String::as_str) {
            Some(LABEL_MALICIOUS) => Ok(Label::Malicious),
            Some(LABEL_BENIGN) | None => Ok(Label::Benign),
            Some(other) => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }

    pub fn is_malicious(self) -> bool {
        self == Label::Malicious
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => LABEL_BENIGN,
            Label::Malicious => LABEL_MALICIOUS,
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            LABEL_BENIGN => Ok(Label::Benign),
            LABEL_MALICIOUS => Ok(Label::Malicious),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Loss,
    Grads,
    Weights,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Loss, FeatureKind::Grads, FeatureKind::Weights];
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Loss => "loss",
            FeatureKind::Grads => "grads",
            FeatureKind::Weights => "weights",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(FeatureKind::Loss),
            "grads" | "gradients" => Ok(FeatureKind::Grads),
            "weights" => Ok(FeatureKind::Weights),
            other => Err(Error::Argument(format!("unknown feature kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureRow {
    pub model_id: String,
    pub label: Label,
    /// 0 for benign rows.
    pub x_lsb: u32,
    pub features: Vec<f64>,
}

impl FeatureRow {
    fn bit_eq(&self, other: &FeatureRow) -> bool {
        self.model_id == other.model_id
            && self.label == other.label
            && self.x_lsb == other.x_lsb
            && self.features.len() == other.features.len()
            && self.features.iter().zip(&other.features).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug)]
pub struct FeatureDataset {
    pub kind: FeatureKind,
    pub rows: Vec<FeatureRow>,
}

impl FeatureDataset {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn bit_eq(&self, other: &FeatureDataset) -> bool {
        self.kind == other.kind
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.bit_eq(b))
    }

    /// Severity of the malicious rows, if they agree.
    pub fn severity(&self) -> Option<u32> {
        let levels: BTreeSet<u32> = self.rows.iter().filter(|r| r.label.is_malicious()).map(|r| r.x_lsb).collect();
        (levels.len() == 1).then(|| *levels.iter().next().unwrap())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model_id".to_string(), "label".into(), "x_lsb".into()];
        header.extend((0..self.dim()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.model_id.clone(), row.label.to_string(), row.x_lsb.to_string()];
            rec.extend(row.features.iter().map(|&v| format_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, kind: FeatureKind) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "model_id" || &header[1] != "label" || &header[2] != "x_lsb" {
            return Err(Error::Data(format!("{}: unexpected header", path.display())));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let features = rec.iter().skip(3).map(parse_f64).collect::<Result<Vec<_>>>()?;
            rows.push(FeatureRow {
                model_id: rec[0].to_string(),
                label: rec[1].parse()?,
                x_lsb: rec[2].parse().map_err(|_| Error::Data(format!("bad x_lsb {:?}", &rec[2])))?,
                features,
            });
        }
        Ok(FeatureDataset { kind, rows })
    }
}

pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        format!("nan:{:#018x}", v.to_bits())
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    if let Some(hex) = s.strip_prefix("nan:0x") {
        return u64::from_str_radix(hex, 16)
            .map(f64::from_bits)
            .map_err(|_| Error::Data(format!("bad NaN literal {s:?}")));
    }
    s.parse::<f64>().map_err(|_| Error::Data(format!("bad float {s:?}")))
}

/// Widens an f32 into f64, carrying NaN payload bits explicitly (a hardware
/// conversion may quiet signalling NaNs).
pub fn widen(v: f32) -> f64 {
    if v.is_nan() {
        let b = v.to_bits() as u64;
        f64::from_bits(((b >> 31) << 63) | (0x7FF << 52) | ((b & 0x7F_FFFF) << 29))
    } else {
        v as f64
    }
}

/// Deterministic benign train/held-out partition used by both the
/// autoencoder and the evaluation protocol. Ids are sorted and then shuffled
/// from `seed`; the first `round(train_frac·n)` form the training part. The
/// returned held-out list keeps the shuffled order.
pub fn benign_partition(ids: &[String], seed: u64, train_frac: f64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = ids.to_vec();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut rng::stream(seed, 0x5117));
    let n_train = ((ids.len() as f64) * train_frac).round() as usize;
    let held_out = ids.split_off(n_train.min(ids.len()));
    (ids, held_out)
}

pub const AE_TRAIN_FRACTION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Bottleneck width; `None` means `max(8, n_W / 8)`.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl AeConfig {
    pub fn with_seed(seed: u64) -> Self {
        AeConfig { hidden: None, epochs: 500, lr: 1e-3, batch: 1, seed }
    }

    pub fn bottleneck(&self, n_weights: usize) -> usize {
        self.hidden.unwrap_or_else(|| (n_weights / 8).max(8))
    }
}

/// An `n_W → h → n_W` autoencoder over z-scored weight vectors.
#[derive(Clone, Debug)]
pub struct AutoencoderModel {
    pub net: Network,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub seed: u64,
    /// Mean per-sample training loss for each epoch.
    pub history: Vec<f64>,
}

impl AutoencoderModel {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, m: &ModelRecord) -> Result<Vec<f64>> {
        let w = m.flatten();
        if w.len() != self.width() {
            return Err(Error::ArchMismatch(format!(
                "model has {} weights, autoencoder expects {}",
                w.len(),
                self.width()
            )));
        }
        Ok(w.0.iter().zip(&self.mean).zip(&self.std).map(|((&v, mu), sd)| (widen(v) - mu) / sd).collect())
    }

    /// Mean squared error between the normalised weights and their reconstruction.
    pub fn reconstruction_loss(&self, m: &ModelRecord) -> Result<f64> {
        let z = self.normalize(m)?;
        let out = self.net.forward(&z)?;
        Ok(Loss::Mse.value(&out, &z))
    }

    pub fn mean_loss(&self, models: &[ModelRecord]) -> Result<f64> {
        let losses = models.iter().map(|m| self.reconstruction_loss(m)).collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Stores the network as MZW1 with normalisation statistics in the meta
    /// map (f64 bit patterns in hex).
    pub fn to_record(&self) -> ModelRecord {
        let hex = |v: &[f64]| v.iter().map(|x| format!("{:016x}", x.to_bits())).collect::<Vec<_>>().join(",");
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "autoencoder".to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("norm_mean".to_string(), hex(&self.mean));
        meta.insert("norm_std".to_string(), hex(&self.std));
        self.net.to_model(meta)
    }

    pub fn from_record(m: &ModelRecord) -> Result<Self> {
        let unhex = |key: &str| -> Result<Vec<f64>> {
            let s = m.meta.get(key).ok_or_else(|| Error::Data(format!("autoencoder record lacks {key}")))?;
            s.split(',')
                .map(|t| {
                    u64::from_str_radix(t, 16)
                        .map(f64::from_bits)
                        .map_err(|_| Error::Data(format!("bad {key} entry {t:?}")))
                })
                .collect()
        };
        let mean = unhex("norm_mean")?;
        let std = unhex("norm_std")?;
        let seed = m.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        if mean.len() != m.arch().input_width() || std.len() != mean.len() {
            return Err(Error::Data("normalisation statistics do not match autoencoder width".into()));
        }
        Ok(AutoencoderModel { net: Network::from_model(m), mean, std, seed, history: Vec::new() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_record().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        AutoencoderModel::from_record(&ModelRecord::load(path)?)
    }
}

/// Fits per-dimension z-score statistics and trains the autoencoder on the
/// given benign models only.
pub fn train_autoencoder(benign_train: &[ModelRecord], cfg: &AeConfig) -> Result<AutoencoderModel> {
    if benign_train.len() < 10 {
        return Err(Error::Data(format!(
            "autoencoder needs at least 10 benign models, got {}",
            benign_train.len()
        )));
    }
    let arch = benign_train[0].arch();
    if benign_train.iter().any(|m| m.arch() != arch) {
        return Err(Error::ArchMismatch("autoencoder training models differ in architecture".into()));
    }
    let n = arch.param_count();
    let vectors: Vec<Vec<f64>> = benign_train.iter().map(|m| m.flatten().0.iter().map(|&v| widen(v)).collect()).collect();
    let count = vectors.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / count).collect();
    let std: Vec<f64> = (0..n)
        .map(|j| {
            let var = vectors.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / count;
            let sd = var.sqrt();
            if sd > 1e-12 && sd.is_finite() { sd } else { 1.0 }
        })
        .collect();
    let z: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).zip(&std).map(|((x, mu), sd)| (x - mu) / sd).collect())
        .collect();

    let h = cfg.bottleneck(n);
    let ae_arch = Arch::new(vec![n, h, n], vec![Activation::Tanh, Activation::Identity])?;
    let init = Network::init(&ae_arch, rng::derive_seed(cfg.seed, 0xAE))?;
    let data = Samples::new(z.clone(), z)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch: cfg.batch,
        loss: Loss::Mse,
        seed: rng::derive_seed(cfg.seed, 0xAE + 1),
    };
    let out = train_sgd(&init, &data, &tc)?;
    Ok(AutoencoderModel { net: out.net, mean, std, seed: cfg.seed, history: out.history })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTarget {
    /// All-zero target vector.
    #[default]
    Zero,
    /// `1/k` in each of the k outputs.
    Uniform,
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(GradTarget::Zero),
            "uniform" => Ok(GradTarget::Uniform),
            other => Err(Error::Argument(format!("unknown gradient target {other:?}"))),
        }
    }
}

/// Backprop gradient for an all-zero input under MSE loss.
pub fn gradient_feature(m: &ModelRecord, target: GradTarget) -> Result<Vec<f64>> {
    let net = Network::from_model(m);
    let arch = m.arch();
    let x = vec![0.0; arch.input_width()];
    let k = arch.output_width();
    let t = match target {
        GradTarget::Zero => vec![0.0; k],
        GradTarget::Uniform => vec![1.0 / k as f64; k],
    };
    Ok(net.backprop(&x, &t, Loss::Mse)?.0)
}

pub fn weights_feature(m: &ModelRecord) -> Vec<f64> {
    m.flatten().0.iter().map(|&v| widen(v)).collect()
}

#[derive(Clone, Copy, Debug)]
pub enum Extractor<'a> {
    Loss(&'a AutoencoderModel),
    Grads(GradTarget),
    Weights,
}

impl Extractor<'_> {
    pub fn kind(&self) -> FeatureKind {
        match self {
            Extractor::Loss(_) => FeatureKind::Loss,
            Extractor::Grads(_) => FeatureKind::Grads,
            Extractor::Weights => FeatureKind::Weights,
        }
    }

    pub fn row(&self, m: &ModelRecord) -> Result<FeatureRow> {
        let features = match self {
            Extractor::Loss(ae) => vec![ae.reconstruction_loss(m)?],
            Extractor::Grads(t) => gradient_feature(m, *t)?,
            Extractor::Weights => weights_feature(m),
        };
        let label = Label::of(m)?;
        let x_lsb = match label {
            Label::Benign => 0,
            Label::Malicious => m
                .meta
                .get(META_X_LSB)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data("malicious model without x_lsb".into()))?,
        };
        let model_id = m.id().unwrap_or_default().to_string();
        Ok(FeatureRow { model_id, label, x_lsb, features })
    }
}

/// One row per benign model followed by one row per attacked model.
pub fn build_dataset(benign: &[ModelRecord], attacked: &[ModelRecord], extractor: Extractor<'_>) -> Result<FeatureDataset> {
    let arch = benign
        .first()
        .or(attacked.first())
        .ok_or_else(|| Error::Data("no models to extract features from".into()))?
        .arch();
    if benign.iter().chain(attacked).any(|m| m.arch() != arch) {
        return Err(Error::ArchMismatch("benign and attacked zoos must share one architecture".into()));
    }
    if let Extractor::Loss(ae) = extractor {
        if ae.width() != arch.param_count() {
            return Err(Error::ArchMismatch(format!(
                "autoencoder width {} vs n_W {}",
                ae.width(),
                arch.param_count()
            )));
        }
    }
    let rows = benign
        .par_iter()
        .chain(attacked.par_iter())
        .map(|m| extractor.row(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureDataset { kind: extractor.kind(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stegattack::Payload;
    use crate::tensorstore::WeightVector;
    use crate::zooforge::{attack_zoo, generate_zoo, ZooManifest};

    #[test]
    fn float_text_round_trip() {
        for v in [0.1, -0.0, 1e-310, f64::MAX, f64::INFINITY, f64::NEG_INFINITY, f64::from_bits(0x7FF0_0000_0000_0001)] {
            let back = parse_f64(&format_f64(v)).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v}");
        }
    }

    #[test]
    fn widen_keeps_nan_payload() {
        let snan = f32::from_bits(0x7F80_0001);
        let w = widen(snan);
        assert!(w.is_nan());
        assert_eq!(w.to_bits() >> 29 & 0x7F_FFFF, 1);
        assert_eq!(widen(1.5), 1.5);
    }

    #[test]
    fn gradient_of_zero_model_is_zero() {
        let arch: Arch = "2-8-8-2".parse().unwrap();
        let m = ModelRecord::unflatten(arch, &WeightVector(vec![0.0; 114]), BTreeMap::new()).unwrap();
        let g = gradient_feature(&m, GradTarget::Zero).unwrap();
        assert_eq!(g.len(), 114);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_is_deterministic_and_disjoint() {
        let ids: Vec<String> = (0..20).map(|i| format!("m{i:02}")).collect();
        let (a, b) = benign_partition(&ids, 3, 0.7);
        assert_eq!((a.len(), b.len()), (14, 6));
        let mut shuffled = ids.clone();
        shuffled.reverse();
        assert_eq!(benign_partition(&shuffled, 3, 0.7), (a.clone(), b.clone()));
        assert!(a.iter().all(|x| !b.contains(x)));
    }

    #[test]
    fn dataset_shapes_and_errors() {
        let manifest = ZooManifest::new("f", "2-4-2".parse().unwrap(), 12, 1).unwrap();
        let zoo = generate_zoo(&manifest).unwrap();
        let attacked = attack_zoo(&zoo, 23, &Payload::random(8, 1)).unwrap();
        let ds = build_dataset(&zoo, &attacked, Extractor::Weights).unwrap();
        assert_eq!(ds.len(), 24);
        assert_eq!(ds.dim(), manifest.arch.param_count());
        assert_eq!(ds.severity(), Some(23));
        let g = build_dataset(&zoo, &attacked, Extractor::Grads(GradTarget::Zero)).unwrap();
        assert_eq!(g.dim(), manifest.arch.param_count());

        let cfg = AeConfig { epochs: 5, ..AeConfig::with_seed(1) };
        let ae = train_autoencoder(&zoo, &cfg).unwrap();
        let l = build_dataset(&zoo, &attacked, Extractor::Loss(&ae)).unwrap();
        assert_eq!(l.dim(), 1);
        assert!(l.rows.iter().all(|r| r.features[0] >= 0.0));
        assert!(train_autoencoder(&zoo[..9], &cfg).is_err());

        let other = generate_zoo(&ZooManifest::new("g", "2-3-2".parse().unwrap(), 2, 1).unwrap()).unwrap();
        assert!(matches!(build_dataset(&zoo, &other, Extractor::Weights), Err(Error::ArchMismatch(_))));
        assert!(build_dataset(&other, &[], Extractor::Loss(&ae)).is_err());
    }

    #[test]
    fn identity_autoencoder_has_zero_loss() {
        let arch: Arch = "2-2:identity".parse().unwrap();
        let m = ModelRecord::unflatten(arch, &WeightVector(vec![0.5, -1.0, 2.0, 0.25, 3.0, -4.0]), BTreeMap::new()).unwrap();
        let eye: Vec<f32> = (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
        let ae_arch: Arch = "6-6:identity".parse().unwrap();
        let w = WeightVector([eye, vec![0.0; 6]].concat());
        let net = Network::from_model(&ModelRecord::unflatten(ae_arch, &w, BTreeMap::new()).unwrap());
        let ae = AutoencoderModel { net, mean: vec![0.0; 6], std: vec![1.0; 6], seed: 0, history: vec![] };
        assert_eq!(ae.reconstruction_loss(&m).unwrap(), 0.0);
    }
}
