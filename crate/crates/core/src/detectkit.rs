//! Detectors, metrics and the evaluation protocol.
//!
//! Positive class is always `malicious`.
//!
//! - [`ThresholdDetector`]: flags values above `μ + ε`, with `μ` the benign
//!   training mean and `ε` the smallest grid spacer whose benign-train false
//!   positive rate is at most `α`.
//! - [`TreeEnsemble`]: random forest (`rf`), gradient boosting on logistic
//!   loss (`gb`), and histogram gradient boosting (`hgb`).
//!
//! Protocols: unsupervised fits on 70% of the benign rows and tests on the
//! other 30% plus every malicious row; supervised trains on 80% of each class
//! and tests on the remaining 20%. Benign partitions come from
//! [`benign_partition`], the same split the autoencoder is trained on, so
//! benign test rows never overlap the autoencoder's training models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::featurex::{benign_partition, FeatureDataset, FeatureKind, Label, AE_TRAIN_FRACTION};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(truth: &[Label], predicted: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t.is_malicious(), p.is_malicious()) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Precision is 0 when nothing is flagged; recall is 0 when there are no
    /// positives; F1 is 0 when `P + R = 0`.
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let accuracy = ratio(self.tp + self.tn, self.total());
        let recall = ratio(self.tp, self.tp + self.fn_);
        let precision = ratio(self.tp, self.tp + self.fp);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Metrics { accuracy, recall, precision, f1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn evaluate(truth: &[Label], predicted: &[Label]) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Data(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
    }
    Ok(Confusion::from_labels(truth, predicted).metrics())
}

// ---------------------------------------------------------------------------
// MEAN + ε

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDetector {
    pub mean: f64,
    pub epsilon: f64,
    /// Benign-train false positive rate at the chosen ε.
    pub train_fpr: f64,
    /// Set when no grid value met `α`; ε is then the largest grid value.
    pub alpha_unmet: bool,
}

impl ThresholdDetector {
    pub fn threshold(&self) -> f64 {
        self.mean + self.epsilon
    }

    pub fn classify(&self, value: f64) -> Label {
        if value > self.threshold() { Label::Malicious } else { Label::Benign }
    }
}

/// `{0, 0.25, …, 5.0}·σ` of the training values (population σ).
pub fn sigma_grid(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (0..=20).map(|k| k as f64 * 0.25 * sigma).collect()
}

pub fn fit_threshold(benign_train: &[f64], grid: &[f64], alpha: f64) -> Result<ThresholdDetector> {
    if benign_train.len() < 10 {
        return Err(Error::Data(format!("threshold fit needs at least 10 values, got {}", benign_train.len())));
    }
    if grid.is_empty() || grid.iter().any(|&e| e.is_nan() || e < 0.0) {
        return Err(Error::Argument("ε grid must be non-empty and non-negative".into()));
    }
    if benign_train.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite training value".into()));
    }
    let mean = benign_train.iter().sum::<f64>() / benign_train.len() as f64;
    let fpr = |eps: f64| {
        benign_train.iter().filter(|&&v| v > mean + eps).count() as f64 / benign_train.len() as f64
    };
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let chosen = sorted.iter().copied().find(|&e| fpr(e) <= alpha);
    let (epsilon, alpha_unmet) = match chosen {
        Some(e) => (e, false),
        None => (*sorted.last().unwrap(), true),
    };
    Ok(ThresholdDetector { mean, epsilon, train_fpr: fpr(epsilon), alpha_unmet })
}

// ---------------------------------------------------------------------------
// Trees

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleVariant {
    Rf,
    Gb,
    Hgb,
}

impl fmt::Display for EnsembleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleVariant::Rf => "rf",
            EnsembleVariant::Gb => "gb",
            EnsembleVariant::Hgb => "hgb",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Gradient boosting shrinkage.
    pub learning_rate: f64,
    /// Features considered per split; `None` means all (boosting) or √d (forest).
    pub max_features: Option<usize>,
    /// Histogram bins per feature (hgb only).
    pub bins: usize,
}

impl EnsembleParams {
    pub fn defaults(variant: EnsembleVariant) -> Self {
        match variant {
            EnsembleVariant::Rf => EnsembleParams { n_trees: 100, max_depth: 8, learning_rate: 1.0, max_features: None, bins: 0 },
            EnsembleVariant::Gb => EnsembleParams { n_trees: 200, max_depth: 3, learning_rate: 0.1, max_features: None, bins: 0 },
            EnsembleVariant::Hgb => EnsembleParams { n_trees: 200, max_depth: 3, learning_rate: 0.1, max_features: None, bins: 256 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left; everything else, NaN
    /// included, goes right.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Column-major training matrix.
struct Columns {
    n: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn new(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        Columns { n: rows.len(), cols: (0..d).map(|j| rows.iter().map(|r| r[j]).collect()).collect() }
    }

    fn dim(&self) -> usize {
        self.cols.len()
    }
}

/// Per-feature histogram bins: `bin(x)` is the number of cut points `< x`,
/// so `bin(x) <= b ⟺ x <= cuts[b]`.
struct Binned {
    cuts: Vec<Vec<f64>>,
    codes: Vec<Vec<u16>>,
}

impl Binned {
    fn new(cols: &Columns, max_bins: usize) -> Self {
        let max_bins = max_bins.clamp(2, u16::MAX as usize);
        let cuts: Vec<Vec<f64>> = cols
            .cols
            .iter()
            .map(|col| {
                let mut v: Vec<f64> = col.iter().copied().filter(|x| !x.is_nan()).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                if v.len() <= max_bins {
                    v.windows(2).map(|w| midpoint(w[0], w[1])).collect()
                } else {
                    let mut c: Vec<f64> = (1..max_bins)
                        .map(|k| {
                            let pos = k * v.len() / max_bins;
                            midpoint(v[pos - 1], v[pos])
                        })
                        .collect();
                    c.dedup();
                    c
                }
            })
            .collect();
        let codes = cols
            .cols
            .iter()
            .zip(&cuts)
            .map(|(col, c)| col.iter().map(|&x| bin_of(c, x)).collect())
            .collect();
        Binned { cuts, codes }
    }
}

fn bin_of(cuts: &[f64], x: f64) -> u16 {
    if x.is_nan() {
        cuts.len() as u16
    } else {
        cuts.partition_point(|&c| c < x) as u16
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // Keep `a <= m < b` even when the gap is one ulp.
    if m >= b { a } else { m }
}

enum SplitSearch<'a> {
    /// Exhaustive over distinct values, via per-feature presorted row order.
    Exact { cols: &'a Columns, order: &'a [Vec<u32>] },
    Histogram { binned: &'a Binned },
}

struct TreeBuilder<'a> {
    search: SplitSearch<'a>,
    targets: &'a [f64],
    max_depth: usize,
    max_features: usize,
    leaf_value: &'a (dyn Fn(&[u32]) -> f64 + Sync),
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn build(&self, members: Vec<u32>, rng: &mut rng::Rng) -> Tree {
        let mut nodes = Vec::new();
        self.grow(&mut nodes, members, 0, rng);
        Tree { nodes }
    }

    fn grow(&self, nodes: &mut Vec<Node>, members: Vec<u32>, depth: usize, rng: &mut rng::Rng) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf(0.0));
        let first = self.targets[members[0] as usize];
        let pure = members.iter().all(|&i| self.targets[i as usize] == first);
        let split = if depth < self.max_depth && members.len() >= 2 && !pure {
            self.best_split(&members, rng)
        } else {
            None
        };
        match split {
            None => nodes[id] = Node::Leaf((self.leaf_value)(&members)),
            Some(c) => {
                let (l, r): (Vec<u32>, Vec<u32>) =
                    members.iter().partition(|&&i| self.value(c.feature, i as usize) <= c.threshold);
                let left = self.grow(nodes, l, depth + 1, rng);
                let right = self.grow(nodes, r, depth + 1, rng);
                nodes[id] = Node::Split { feature: c.feature, threshold: c.threshold, left, right };
            }
        }
        id
    }

    fn value(&self, feature: usize, row: usize) -> f64 {
        match &self.search {
            SplitSearch::Exact { cols, .. } => cols.cols[feature][row],
            SplitSearch::Histogram { binned } => binned.codes[feature][row] as f64,
        }
    }

    fn dim(&self) -> usize {
        match &self.search {
            SplitSearch::Exact { cols, .. } => cols.dim(),
            SplitSearch::Histogram { binned } => binned.codes.len(),
        }
    }

    fn best_split(&self, members: &[u32], rng: &mut rng::Rng) -> Option<Candidate> {
        let d = self.dim();
        let features: Vec<usize> = if self.max_features >= d {
            (0..d).collect()
        } else {
            let mut f = rand::seq::index::sample(rng, d, self.max_features).into_vec();
            f.sort_unstable();
            f
        };
        let total: f64 = members.iter().map(|&i| self.targets[i as usize]).sum();
        let n = members.len() as f64;
        let parent = total * total / n;
        let mut best: Option<Candidate> = None;
        let mut consider = |gain: f64, feature: usize, threshold: f64| {
            // Zero-gain splits are allowed so that symmetric problems (xor)
            // can still be separated one level further down.
            if gain > -1e-12 && best.as_ref().is_none_or(|b| gain > b.gain + 1e-12) {
                best = Some(Candidate { gain, feature, threshold });
            }
        };
        match &self.search {
            SplitSearch::Exact { cols, order } => {
                let mut count = vec![0u32; cols.n];
                for &i in members {
                    count[i as usize] += 1;
                }
                for &f in &features {
                    let col = &cols.cols[f];
                    let (mut sum_l, mut n_l) = (0.0, 0.0);
                    let mut prev: Option<f64> = None;
                    for &row in &order[f] {
                        let c = count[row as usize];
                        if c == 0 {
                            continue;
                        }
                        let x = col[row as usize];
                        if let Some(p) = prev {
                            if x > p && n_l > 0.0 && n_l < n {
                                let sum_r = total - sum_l;
                                let gain = sum_l * sum_l / n_l + sum_r * sum_r / (n - n_l) - parent;
                                consider(gain, f, midpoint(p, x));
                            }
                        }
                        if x.is_nan() {
                            break;
                        }
                        sum_l += c as f64 * self.targets[row as usize];
                        n_l += c as f64;
                        prev = Some(x);
                    }
                }
            }
            SplitSearch::Histogram { binned } => {
                for &f in &features {
                    let n_bins = binned.cuts[f].len() + 1;
                    let mut sums = vec![0.0; n_bins];
                    let mut counts = vec![0.0; n_bins];
                    for &i in members {
                        let b = binned.codes[f][i as usize] as usize;
                        sums[b] += self.targets[i as usize];
                        counts[b] += 1.0;
                    }
                    let (mut sum_l, mut n_l) = (0.0, 0.0);
                    for b in 0..n_bins - 1 {
                        sum_l += sums[b];
                        n_l += counts[b];
                        if counts[b] == 0.0 || n_l == 0.0 || n_l >= n {
                            continue;
                        }
                        let sum_r = total - sum_l;
                        let gain = sum_l * sum_l / n_l + sum_r * sum_r / (n - n_l) - parent;
                        consider(gain, f, b as f64);
                    }
                }
            }
        }
        best
    }
}

/// Rewrites bin-index thresholds into raw-value thresholds.
fn debin(tree: &mut Tree, binned: &Binned) {
    for node in &mut tree.nodes {
        if let Node::Split { feature, threshold, .. } = node {
            *threshold = binned.cuts[*feature][*threshold as usize];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub variant: EnsembleVariant,
    pub params: EnsembleParams,
    pub seed: u64,
    pub dim: usize,
    /// Boosting: initial log-odds. Forest: unused.
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    /// Forest: mean leaf probability. Boosting: raw log-odds.
    pub fn score(&self, x: &[f64]) -> f64 {
        match self.variant {
            EnsembleVariant::Rf => self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64,
            EnsembleVariant::Gb | EnsembleVariant::Hgb => {
                self.base_score + self.params.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        let malicious = match self.variant {
            EnsembleVariant::Rf => self.score(x) > 0.5,
            EnsembleVariant::Gb | EnsembleVariant::Hgb => self.score(x) > 0.0,
        };
        if malicious { Label::Malicious } else { Label::Benign }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fits an ensemble. Rows are put in a canonical order first, so the
/// result does not depend on the order they are supplied in.
pub fn fit_ensemble(
    rows: &[Vec<f64>],
    labels: &[Label],
    variant: EnsembleVariant,
    params: &EnsembleParams,
    seed: u64,
) -> Result<TreeEnsemble> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Data("training rows and labels must be non-empty and aligned".into()));
    }
    let dim = rows[0].len();
    if dim == 0 {
        return Err(Error::Data("zero-dimensional training data".into()));
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Data("ragged training rows".into()));
    }
    let positives = labels.iter().filter(|l| l.is_malicious()).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Data("training data must contain both classes".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::Argument("ensemble needs at least one tree".into()));
    }

    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            rows[a]
                .iter()
                .zip(&rows[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
    let y: Vec<f64> = idx.iter().map(|&i| if labels[i].is_malicious() { 1.0 } else { 0.0 }).collect();

    let cols = Columns::new(&rows);
    let n = rows.len();
    match variant {
        EnsembleVariant::Rf => {
            let order = presort(&cols);
            let max_features = params.max_features.unwrap_or(((dim as f64).sqrt().round() as usize).max(1));
            let mean_leaf = |m: &[u32]| m.iter().map(|&i| y[i as usize]).sum::<f64>() / m.len() as f64;
            let trees = (0..params.n_trees)
                .into_par_iter()
                .map(|t| {
                    let mut rng = rng::stream(seed, t as u64);
                    let members: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n as u32)).collect();
                    let builder = TreeBuilder {
                        search: SplitSearch::Exact { cols: &cols, order: &order },
                        targets: &y,
                        max_depth: params.max_depth,
                        max_features,
                        leaf_value: &mean_leaf,
                    };
                    builder.build(members, &mut rng)
                })
                .collect();
            Ok(TreeEnsemble { variant, params: params.clone(), seed, dim, base_score: 0.0, trees })
        }
        EnsembleVariant::Gb | EnsembleVariant::Hgb => {
            let p0 = positives as f64 / n as f64;
            let base_score = (p0 / (1.0 - p0)).ln();
            let mut raw = vec![base_score; n];
            let order;
            let binned;
            let search = if variant == EnsembleVariant::Hgb {
                binned = Binned::new(&cols, params.bins.max(2));
                SplitSearch::Histogram { binned: &binned }
            } else {
                order = presort(&cols);
                SplitSearch::Exact { cols: &cols, order: &order }
            };
            let max_features = params.max_features.unwrap_or(dim);
            let mut rng = rng::stream(seed, 0x6B);
            let mut trees = Vec::with_capacity(params.n_trees);
            for _ in 0..params.n_trees {
                let prob: Vec<f64> = raw.iter().map(|&r| sigmoid(r)).collect();
                let residual: Vec<f64> = y.iter().zip(&prob).map(|(y, p)| y - p).collect();
                let newton = |m: &[u32]| {
                    let num: f64 = m.iter().map(|&i| residual[i as usize]).sum();
                    let den: f64 = m.iter().map(|&i| prob[i as usize] * (1.0 - prob[i as usize])).sum();
                    if den < 1e-12 { 0.0 } else { num / den }
                };
                let builder = TreeBuilder {
                    search: match &search {
                        SplitSearch::Exact { cols, order } => SplitSearch::Exact { cols, order },
                        SplitSearch::Histogram { binned } => SplitSearch::Histogram { binned },
                    },
                    targets: &residual,
                    max_depth: params.max_depth,
                    max_features,
                    leaf_value: &newton,
                };
                let mut tree = builder.build((0..n as u32).collect(), &mut rng);
                if let SplitSearch::Histogram { binned } = &search {
                    debin(&mut tree, binned);
                }
                for (r, row) in raw.iter_mut().zip(&rows) {
                    *r += params.learning_rate * tree.predict(row);
                }
                trees.push(tree);
            }
            Ok(TreeEnsemble { variant, params: params.clone(), seed, dim, base_score, trees })
        }
    }
}

/// Row indices sorted by each feature (NaN last).
fn presort(cols: &Columns) -> Vec<Vec<u32>> {
    cols.cols
        .iter()
        .map(|col| {
            let mut o: Vec<u32> = (0..cols.n as u32).collect();
            o.sort_by(|&a, &b| {
                let (x, y) = (col[a as usize], col[b as usize]);
                match (x.is_nan(), y.is_nan()) {
                    (false, false) => x.total_cmp(&y),
                    (a, b) => a.cmp(&b),
                }
            });
            o
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Detector checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDK1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Detector {
    Threshold(ThresholdDetector),
    Ensemble(TreeEnsemble),
}

impl Detector {
    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        match self {
            Detector::Threshold(t) => {
                if x.len() != 1 {
                    return Err(Error::Data(format!("threshold detector needs 1-D features, got {}", x.len())));
                }
                Ok(t.classify(x[0]))
            }
            Detector::Ensemble(e) => {
                if x.len() != e.dim {
                    return Err(Error::Data(format!("ensemble expects {} features, got {}", e.dim, x.len())));
                }
                Ok(e.predict(x))
            }
        }
    }

    /// `SDK1 | u16 LE version | u32 LE body length | bincode body`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = bincode::serialize(self).expect("detector serialises");
        let mut out = Vec::with_capacity(10 + body.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: u64, msg: &str| Error::Format { offset, msg: msg.to_string() };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err(0, "bad magic, expected SDK1"));
        }
        if bytes.len() < 10 {
            return Err(err(4, "truncated checkpoint header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(err(4, &format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        if bytes.len() != 10 + len {
            return Err(err(10, "checkpoint body length mismatch"));
        }
        bincode::deserialize(&bytes[10..]).map_err(|e| err(10, &format!("invalid body: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Detector::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// MEAN + ε
    Threshold,
    Rf,
    Gb,
    Hgb,
}

impl Method {
    pub fn variant(self) -> Option<EnsembleVariant> {
        match self {
            Method::Threshold => None,
            Method::Rf => Some(EnsembleVariant::Rf),
            Method::Gb => Some(EnsembleVariant::Gb),
            Method::Hgb => Some(EnsembleVariant::Hgb),
        }
    }

    pub fn is_supervised(self) -> bool {
        self != Method::Threshold
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Threshold => "mean+eps",
            Method::Rf => "rf",
            Method::Gb => "gb",
            Method::Hgb => "hgb",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean+eps" | "threshold" | "mean" => Ok(Method::Threshold),
            "rf" => Ok(Method::Rf),
            "gb" => Ok(Method::Gb),
            "hgb" => Ok(Method::Hgb),
            other => Err(Error::Argument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub alpha: f64,
    pub unsupervised_train_fraction: f64,
    pub supervised_train_fraction: f64,
    /// Overrides for the ensemble defaults.
    pub ensemble: Option<EnsembleParams>,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            alpha: 0.05,
            unsupervised_train_fraction: AE_TRAIN_FRACTION,
            supervised_train_fraction: 0.8,
            ensemble: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub feature: FeatureKind,
    pub method: Method,
    pub x_lsb: u32,
    pub metrics: Metrics,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Row indices of the training and test parts for one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Applies the protocol split for `method`.
pub fn split_dataset(ds: &FeatureDataset, supervised: bool, cfg: &ExperimentConfig) -> Result<Split> {
    let benign_ids: Vec<String> =
        ds.rows.iter().filter(|r| !r.label.is_malicious()).map(|r| r.model_id.clone()).collect();
    let distinct: BTreeSet<&String> = benign_ids.iter().collect();
    if distinct.len() != benign_ids.len() {
        return Err(Error::Data("duplicate benign model ids".into()));
    }
    let (_, held_out) = benign_partition(&benign_ids, cfg.seed, AE_TRAIN_FRACTION);
    let n_b = benign_ids.len();
    let benign_test: BTreeSet<String> = if supervised {
        let k = ((n_b as f64) * (1.0 - cfg.supervised_train_fraction)).round() as usize;
        held_out.into_iter().take(k).collect()
    } else {
        let (_, rest) = benign_partition(&benign_ids, cfg.seed, cfg.unsupervised_train_fraction);
        rest.into_iter().collect()
    };

    let mut malicious: Vec<usize> = (0..ds.rows.len()).filter(|&i| ds.rows[i].label.is_malicious()).collect();
    malicious.sort_by(|&a, &b| ds.rows[a].model_id.cmp(&ds.rows[b].model_id));
    malicious.shuffle(&mut rng::stream(cfg.seed, 0x3A1));
    let malicious_test: BTreeSet<usize> = if supervised {
        let k = ((malicious.len() as f64) * (1.0 - cfg.supervised_train_fraction)).round() as usize;
        malicious.iter().copied().take(k).collect()
    } else {
        malicious.iter().copied().collect()
    };

    let mut split = Split { train: Vec::new(), test: Vec::new() };
    for (i, row) in ds.rows.iter().enumerate() {
        let in_test = match row.label {
            Label::Benign => benign_test.contains(&row.model_id),
            Label::Malicious => malicious_test.contains(&i),
        };
        if in_test {
            split.test.push(i);
        } else {
            split.train.push(i);
        }
    }
    Ok(split)
}

/// Trains a detector on the training part of `ds`.
pub fn train_detector(ds: &FeatureDataset, train: &[usize], method: Method, cfg: &ExperimentConfig) -> Result<Detector> {
    match method.variant() {
        None => {
            if ds.dim() != 1 {
                return Err(Error::Data(format!("MEAN+ε needs a 1-D feature, {} has {}", ds.kind, ds.dim())));
            }
            // Only benign rows are ever seen by the threshold fit.
            let values: Vec<f64> = train
                .iter()
                .map(|&i| &ds.rows[i])
                .filter(|r| !r.label.is_malicious())
                .map(|r| r.features[0])
                .collect();
            Ok(Detector::Threshold(fit_threshold(&values, &sigma_grid(&values), cfg.alpha)?))
        }
        Some(variant) => {
            let rows: Vec<Vec<f64>> = train.iter().map(|&i| ds.rows[i].features.clone()).collect();
            let labels: Vec<Label> = train.iter().map(|&i| ds.rows[i].label).collect();
            let params = cfg.ensemble.clone().unwrap_or_else(|| EnsembleParams::defaults(variant));
            Ok(Detector::Ensemble(fit_ensemble(&rows, &labels, variant, &params, cfg.seed)?))
        }
    }
}

pub fn evaluate_detector(detector: &Detector, ds: &FeatureDataset, test: &[usize]) -> Result<Metrics> {
    let truth: Vec<Label> = test.iter().map(|&i| ds.rows[i].label).collect();
    let predicted = test.iter().map(|&i| detector.predict(&ds.rows[i].features)).collect::<Result<Vec<_>>>()?;
    evaluate(&truth, &predicted)
}

/// One report row per requested severity level.
pub fn run_experiment(
    datasets: &BTreeMap<u32, FeatureDataset>,
    levels: &[u32],
    method: Method,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(levels.len());
    for &x in levels {
        let ds = datasets.get(&x).ok_or_else(|| Error::Data(format!("missing dataset for X = {x}")))?;
        let split = split_dataset(ds, method.is_supervised(), cfg)?;
        let detector = train_detector(ds, &split.train, method, cfg)?;
        let metrics = evaluate_detector(&detector, ds, &split.test)?;
        rows.push(EvalRow {
            feature: ds.kind,
            method,
            x_lsb: x,
            metrics,
            seed: cfg.seed,
            n_train: split.train.len(),
            n_test: split.test.len(),
        });
    }
    Ok(EvalReport { rows })
}

pub const ALL_LEVELS: std::ops::RangeInclusive<u32> = 1..=23;

impl EvalReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature", "method", "x_lsb", "A", "R", "P", "F1", "seed"])?;
        for r in &self.rows {
            let m = r.metrics;
            w.write_record([
                r.feature.to_string(),
                r.method.to_string(),
                r.x_lsb.to_string(),
                format!("{:?}", m.accuracy),
                format!("{:?}", m.recall),
                format!("{:?}", m.precision),
                format!("{:?}", m.f1),
                r.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Split sizes are not part of the CSV and read back as 0.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 8 {
                return Err(Error::Data(format!("report row with {} fields", rec.len())));
            }
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::Data(format!("bad number {:?}", &rec[i])));
            rows.push(EvalRow {
                feature: rec[0].parse()?,
                method: rec[1].parse()?,
                x_lsb: rec[2].parse().map_err(|_| Error::Data(format!("bad x_lsb {:?}", &rec[2])))?,
                metrics: Metrics { accuracy: num(3)?, recall: num(4)?, precision: num(5)?, f1: num(6)? },
                seed: rec[7].parse().map_err(|_| Error::Data(format!("bad seed {:?}", &rec[7])))?,
                n_train: 0,
                n_test: 0,
            });
        }
        Ok(EvalReport { rows })
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:<9} {:>3} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            "feature", "method", "X", "A", "R", "P", "F1", "seed", "train", "test"
        );
        for r in &self.rows {
            let m = r.metrics;
            out += &format!(
                "{:<8} {:<9} {:>3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6} {:>6} {:>6}\n",
                r.feature.to_string(),
                r.method.to_string(),
                r.x_lsb,
                m.accuracy,
                m.recall,
                m.precision,
                m.f1,
                r.seed,
                r.n_train,
                r.n_test
            );
        }
        out
    }

    /// Mean F1 per `(feature, method, X)` across all seeds in the report.
    pub fn mean_f1(&self) -> BTreeMap<(FeatureKind, String, u32), f64> {
        let mut acc: BTreeMap<(FeatureKind, String, u32), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry((r.feature, r.method.to_string(), r.x_lsb)).or_default();
            e.0 += r.metrics.f1;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// Static SVG line chart of F1 against X, one line per (feature, method).
pub fn f1_svg(report: &EvalReport, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 150.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let px = |x: f64| L + (x - 1.0) / 22.0 * (W - L - R);
    let py = |f: f64| H - B - f * (H - T - B);

    let mut series: BTreeMap<(String, String), Vec<(u32, f64)>> = BTreeMap::new();
    for ((feature, method, x), f1) in report.mean_f1() {
        series.entry((feature.to_string(), method)).or_default().push((x, f1));
    }
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    s += &format!("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", (L + W - R) / 2.0, escape(title));
    s += &format!(
        "<line x1=\"{L}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - B,
        W - R
    );
    for x in (1..=23).step_by(2) {
        s += &format!("<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x}</text>\n", px(x as f64), H - B + 16.0);
    }
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        s += &format!(
            "<line x1=\"{L}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>\n<text x=\"{2}\" y=\"{3:.1}\" text-anchor=\"end\">{f:.1}</text>\n",
            py(f),
            W - R,
            L - 6.0,
            py(f) + 4.0
        );
    }
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">#LSB attacked (X)</text>\n", (L + W - R) / 2.0, H - 12.0);
    s += &format!("<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">F1</text>\n", (T + H - B) / 2.0);
    for (k, ((feature, method), pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, f)| format!("{:.1},{:.1}", px(x as f64), py(f))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" "));
        let ly = T + 16.0 * k as f64;
        s += &format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{2}\" y=\"{3}\">{4}</text>\n",
            W - R + 10.0,
            W - R + 30.0,
            W - R + 36.0,
            ly + 4.0,
            escape(&format!("{feature}/{method}"))
        );
    }
    s += "</svg>\n";
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurex::FeatureRow;

    #[test]
    fn perfect_and_empty_predictions() {
        let t = [Label::Malicious, Label::Benign];
        let m = evaluate(&t, &t).unwrap();
        assert_eq!((m.accuracy, m.recall, m.precision, m.f1), (1.0, 1.0, 1.0, 1.0));

        let none = evaluate(&[Label::Malicious, Label::Benign], &[Label::Benign, Label::Benign]).unwrap();
        assert_eq!((none.recall, none.precision, none.f1), (0.0, 0.0, 0.0));
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn constant_training_values() {
        let values = vec![2.0; 12];
        let d = fit_threshold(&values, &[0.0, 0.5], 0.05).unwrap();
        assert_eq!(d.epsilon, 0.0);
        assert_eq!(d.classify(2.0), Label::Benign);
        assert_eq!(d.classify(2.25), Label::Malicious);
        assert!(fit_threshold(&[1.0], &[0.0], 0.05).is_err());
    }

    #[test]
    fn threshold_boundary_is_strict() {
        let d = ThresholdDetector { mean: 1.0, epsilon: 0.5, train_fpr: 0.0, alpha_unmet: false };
        assert_eq!(d.classify(1.0), Label::Benign);
        assert_eq!(d.classify(1.5), Label::Benign);
        assert_eq!(d.classify(1.5 + 1e-12), Label::Malicious);
    }

    #[test]
    fn unmet_alpha_takes_largest_grid_value() {
        let mut values: Vec<f64> = (0..20).map(|i| i as f64).collect();
        values.push(1000.0);
        let d = fit_threshold(&values, &[0.0, 1.0], 0.0).unwrap();
        assert!(d.alpha_unmet);
        assert_eq!(d.epsilon, 1.0);
    }

    #[test]
    fn single_separating_feature_needs_one_split() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let labels: Vec<Label> = (0..20).map(|i| if i >= 10 { Label::Malicious } else { Label::Benign }).collect();
        for v in [EnsembleVariant::Rf, EnsembleVariant::Gb, EnsembleVariant::Hgb] {
            let params = EnsembleParams { n_trees: 5, ..EnsembleParams::defaults(v) };
            let e = fit_ensemble(&rows, &labels, v, &params, 1).unwrap();
            let acc = rows.iter().zip(&labels).filter(|(r, l)| e.predict(r) == **l).count();
            assert_eq!(acc, 20, "{v}");
        }
        let gb = fit_ensemble(&rows, &labels, EnsembleVariant::Gb, &EnsembleParams::defaults(EnsembleVariant::Gb), 1).unwrap();
        assert_eq!(gb.trees[0].depth(), 1);
        assert_eq!(gb.trees[0].nodes[0], Node::Split { feature: 0, threshold: 9.5, left: 1, right: 2 });
    }

    fn xor() -> (Vec<Vec<f64>>, Vec<Label>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &(a, b) in &[(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            for k in 0..5 {
                let j = k as f64 * 0.01;
                rows.push(vec![a + j, b - j]);
                labels.push(if (a == 1.0) != (b == 1.0) { Label::Malicious } else { Label::Benign });
            }
        }
        (rows, labels)
    }

    /// Best accuracy of any single axis-aligned split on the xor points,
    /// by enumerating every feature, threshold and leaf labelling.
    fn best_stump_accuracy(rows: &[Vec<f64>], labels: &[Label]) -> f64 {
        let mut best = 0.0f64;
        for f in 0..2 {
            for t in rows.iter().map(|r| r[f]) {
                for left in [Label::Benign, Label::Malicious] {
                    for right in [Label::Benign, Label::Malicious] {
                        let hits = rows
                            .iter()
                            .zip(labels)
                            .filter(|(r, l)| (if r[f] <= t { left } else { right }) == **l)
                            .count();
                        best = best.max(hits as f64 / rows.len() as f64);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn xor_needs_depth_two() {
        let (rows, labels) = xor();
        assert_eq!(best_stump_accuracy(&rows, &labels), 0.5);
        let accuracy = |e: &TreeEnsemble| {
            rows.iter().zip(&labels).filter(|(r, l)| e.predict(r) == **l).count() as f64 / rows.len() as f64
        };
        for v in [EnsembleVariant::Gb, EnsembleVariant::Hgb] {
            let deep = EnsembleParams { max_depth: 2, n_trees: 20, ..EnsembleParams::defaults(v) };
            assert_eq!(accuracy(&fit_ensemble(&rows, &labels, v, &deep, 0).unwrap()), 1.0, "{v}");
            let stumps = EnsembleParams { max_depth: 1, n_trees: 50, ..EnsembleParams::defaults(v) };
            assert!(accuracy(&fit_ensemble(&rows, &labels, v, &stumps, 0).unwrap()) <= 0.75, "{v}");
        }
        let forest = EnsembleParams { max_depth: 2, n_trees: 1, max_features: Some(2), ..EnsembleParams::defaults(EnsembleVariant::Rf) };
        let single = fit_ensemble(&rows, &labels, EnsembleVariant::Rf, &forest, 0).unwrap();
        assert!(single.trees[0].depth() <= 2);
    }

    #[test]
    fn ensemble_rejects_bad_data() {
        let rows = vec![vec![1.0], vec![2.0]];
        assert!(fit_ensemble(&rows, &[Label::Benign, Label::Benign], EnsembleVariant::Rf, &EnsembleParams::defaults(EnsembleVariant::Rf), 0).is_err());
        let empty = vec![vec![], vec![]];
        assert!(fit_ensemble(&empty, &[Label::Benign, Label::Malicious], EnsembleVariant::Gb, &EnsembleParams::defaults(EnsembleVariant::Gb), 0).is_err());
    }

    fn toy_rows() -> (Vec<Vec<f64>>, Vec<Label>) {
        let mut r = rng::seeded(5);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let labels = rows.iter().map(|x| if x[0] + 0.5 * x[1] > 0.1 { Label::Malicious } else { Label::Benign }).collect();
        (rows, labels)
    }

    #[test]
    fn fits_are_deterministic_and_order_invariant() {
        let (rows, labels) = toy_rows();
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut rng::seeded(9));
        let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let plab: Vec<Label> = perm.iter().map(|&i| labels[i]).collect();
        for v in [EnsembleVariant::Rf, EnsembleVariant::Gb, EnsembleVariant::Hgb] {
            let p = EnsembleParams { n_trees: 10, ..EnsembleParams::defaults(v) };
            let a = fit_ensemble(&rows, &labels, v, &p, 3).unwrap();
            let b = fit_ensemble(&rows, &labels, v, &p, 3).unwrap();
            let c = fit_ensemble(&prow, &plab, v, &p, 3).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn histogram_thresholds_match_raw_values() {
        let (rows, labels) = toy_rows();
        let p = EnsembleParams { n_trees: 20, bins: 8, ..EnsembleParams::defaults(EnsembleVariant::Hgb) };
        let e = fit_ensemble(&rows, &labels, EnsembleVariant::Hgb, &p, 0).unwrap();
        let cols = Columns::new(&rows);
        let binned = Binned::new(&cols, 8);
        for c in &binned.cuts {
            assert!(c.len() <= 7);
        }
        // Predicting from raw values must agree with the bin-space training fit.
        let train_acc = rows.iter().zip(&labels).filter(|(r, l)| e.predict(r) == **l).count();
        assert!(train_acc as f64 / rows.len() as f64 > 0.9);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let (rows, labels) = toy_rows();
        let p = EnsembleParams { n_trees: 3, ..EnsembleParams::defaults(EnsembleVariant::Gb) };
        let d = Detector::Ensemble(fit_ensemble(&rows, &labels, EnsembleVariant::Gb, &p, 0).unwrap());
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"SDK1");
        assert_eq!(Detector::from_bytes(&bytes).unwrap(), d);
        assert!(Detector::from_bytes(b"XXXX").is_err());
        assert!(Detector::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let t = Detector::Threshold(ThresholdDetector { mean: 0.5, epsilon: 0.1, train_fpr: 0.0, alpha_unmet: false });
        assert_eq!(Detector::from_bytes(&t.to_bytes()).unwrap(), t);
        assert!(t.predict(&[1.0, 2.0]).is_err());
    }

    fn dataset(n: usize) -> FeatureDataset {
        let mut rows = Vec::new();
        for label in [Label::Benign, Label::Malicious] {
            for i in 0..n {
                rows.push(FeatureRow {
                    model_id: format!("m{i:03}"),
                    label,
                    x_lsb: if label.is_malicious() { 23 } else { 0 },
                    features: vec![i as f64 + if label.is_malicious() { 100.0 } else { 0.0 }],
                });
            }
        }
        FeatureDataset { kind: FeatureKind::Loss, rows }
    }

    #[test]
    fn protocol_splits() {
        let ds = dataset(100);
        let cfg = ExperimentConfig::with_seed(4);
        let u = split_dataset(&ds, false, &cfg).unwrap();
        let benign_train = u.train.iter().filter(|&&i| !ds.rows[i].label.is_malicious()).count();
        assert_eq!(benign_train, 70);
        assert_eq!(u.train.len(), 70);
        assert_eq!(u.test.len(), 30 + 100);

        let s = split_dataset(&ds, true, &cfg).unwrap();
        assert_eq!(s.train.len(), 160);
        assert_eq!(s.test.len(), 40);
        // Supervised benign test rows come from the held-out 30%.
        let unsup_test: BTreeSet<usize> = u.test.iter().copied().collect();
        for &i in &s.test {
            if !ds.rows[i].label.is_malicious() {
                assert!(unsup_test.contains(&i));
            }
        }
    }

    #[test]
    fn report_has_one_row_per_level_and_round_trips() {
        let mut datasets = BTreeMap::new();
        for x in ALL_LEVELS {
            datasets.insert(x, dataset(40));
        }
        let cfg = ExperimentConfig::with_seed(1);
        let levels: Vec<u32> = ALL_LEVELS.collect();
        let report = run_experiment(&datasets, &levels, Method::Threshold, &cfg).unwrap();
        assert_eq!(report.rows.len(), 23);
        assert!(report.rows.iter().all(|r| r.metrics.f1 > 0.9));
        datasets.remove(&5);
        assert!(run_experiment(&datasets, &levels, Method::Threshold, &cfg).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        report.write_csv(&p).unwrap();
        let back = EvalReport::read_csv(&p).unwrap();
        assert_eq!(back.rows.len(), 23);
        for (a, b) in report.rows.iter().zip(&back.rows) {
            assert_eq!(a.metrics, b.metrics);
        }
        let svg = f1_svg(&report, "t");
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
