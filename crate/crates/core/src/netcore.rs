//! A small dense feedforward engine.
//!
//! Parameters are stored as `f32` (they are the steganographic carrier) and
//! all arithmetic runs in `f64`. Backpropagation uses the usual recursion
//! `δ^ℓ = (W^(ℓ+1))ᵀ δ^(ℓ+1) ⊙ f′(z^ℓ)`, with the output delta formed from the
//! loss gradient through the output activation's derivative.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::rng;
use crate::tensorstore::{Activation, Arch, ModelRecord, Tensor, WeightVector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean over output units of `(a − t)²`.
    Mse,
    /// `−Σ t_i ln a_i`.
    CrossEntropy,
}

impl Loss {
    pub fn value(self, a: &[f64], t: &[f64]) -> f64 {
        match self {
            Loss::Mse => a.iter().zip(t).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / a.len() as f64,
            Loss::CrossEntropy => a
                .iter()
                .zip(t)
                .filter(|(_, &t)| t != 0.0)
                .map(|(a, t)| -t * a.ln())
                .sum(),
        }
    }

    /// `∂J/∂a`.
    pub fn gradient(self, a: &[f64], t: &[f64]) -> Vec<f64> {
        match self {
            Loss::Mse => {
                let n = a.len() as f64;
                a.iter().zip(t).map(|(a, t)| 2.0 * (a - t) / n).collect()
            }
            Loss::CrossEntropy => a
                .iter()
                .zip(t)
                .map(|(a, &t)| if t == 0.0 { 0.0 } else { -t / a })
                .collect(),
        }
    }
}

fn activate(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Identity => z.to_vec(),
        Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
        Activation::Sigmoid => z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        Activation::Softmax => {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }
}

/// Maps `∂J/∂a` to `∂J/∂z` through the activation's Jacobian.
fn activation_backward(act: Activation, z: &[f64], a: &[f64], grad_a: &[f64]) -> Vec<f64> {
    match act {
        Activation::Identity => grad_a.to_vec(),
        Activation::Relu => z.iter().zip(grad_a).map(|(&z, &g)| if z > 0.0 { g } else { 0.0 }).collect(),
        Activation::Tanh => a.iter().zip(grad_a).map(|(&a, &g)| g * (1.0 - a * a)).collect(),
        Activation::Sigmoid => a.iter().zip(grad_a).map(|(&a, &g)| g * a * (1.0 - a)).collect(),
        Activation::Softmax => {
            let dot: f64 = a.iter().zip(grad_a).map(|(a, g)| a * g).sum();
            a.iter().zip(grad_a).map(|(&a, &g)| a * (g - dot)).collect()
        }
    }
}

#[derive(Clone, Debug)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weight: Vec<f32>,
    bias: Vec<f32>,
    act: Activation,
}

impl Dense {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(&w, &x)| w as f64 * x).sum::<f64>() + self.bias[o] as f64
            })
            .collect()
    }
}

/// The flattened gradient `∂J/∂W`, in weight-vector order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    arch: Arch,
    layers: Vec<Dense>,
}

struct Trace {
    /// `activations[0]` is the input; `activations[ℓ+1]` the output of layer ℓ.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Network {
    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::seeded(seed);
        let layers = arch
            .layer_dims()
            .zip(&arch.activations)
            .map(|((out, inp), &act)| {
                let bound = 1.0 / (inp as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f32> {
                    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                };
                let weight = draw(out * inp);
                let bias = draw(out);
                Dense { inputs: inp, outputs: out, weight, bias, act }
            })
            .collect();
        Ok(Network { arch: arch.clone(), layers })
    }

    pub fn from_model(m: &ModelRecord) -> Self {
        let arch = m.arch().clone();
        let tensors = m.tensors();
        let layers = arch
            .layer_dims()
            .zip(&arch.activations)
            .enumerate()
            .map(|(l, ((out, inp), &act))| Dense {
                inputs: inp,
                outputs: out,
                weight: tensors[2 * l].data.clone(),
                bias: tensors[2 * l + 1].data.clone(),
                act,
            })
            .collect();
        Network { arch, layers }
    }

    pub fn to_model(&self, meta: BTreeMap<String, String>) -> ModelRecord {
        let tensors = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, d)| {
                [
                    Tensor { name: format!("l{l}.weight"), shape: vec![d.outputs, d.inputs], data: d.weight.clone() },
                    Tensor { name: format!("l{l}.bias"), shape: vec![d.outputs], data: d.bias.clone() },
                ]
            })
            .collect();
        ModelRecord::new(self.arch.clone(), tensors, meta).expect("network layout matches its arch")
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn weights(&self) -> WeightVector {
        WeightVector(
            self.layers
                .iter()
                .flat_map(|d| d.weight.iter().chain(&d.bias).copied())
                .collect(),
        )
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_width() {
            return Err(Error::Shape(format!(
                "input of width {} for network expecting {}",
                x.len(),
                self.arch.input_width()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(activations.last().unwrap());
            let a = activate(layer.act, &z);
            if a.iter().chain(&z).any(|v| !v.is_finite()) {
                return Err(Error::Numeric { layer: l, what: "forward activation".into() });
            }
            pre.push(z);
            activations.push(a);
        }
        Ok(Trace { activations, pre })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.activations.pop().unwrap())
    }

    /// Loss and gradient for one sample.
    pub fn loss_and_gradient(&self, x: &[f64], target: &[f64], loss: Loss) -> Result<(f64, GradientVector)> {
        if target.len() != self.arch.output_width() {
            return Err(Error::Shape(format!(
                "target of width {} for network with {} outputs",
                target.len(),
                self.arch.output_width()
            )));
        }
        let trace = self.trace(x)?;
        let out = trace.activations.last().unwrap();
        let value = loss.value(out, target);
        let last = self.layers.len() - 1;
        if !value.is_finite() {
            return Err(Error::Numeric { layer: last, what: "loss".into() });
        }

        // Per-layer (weight grads, bias grads), filled back to front.
        let mut per_layer: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut grad_a = loss.gradient(out, target);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let delta = activation_backward(layer.act, &trace.pre[l], &trace.activations[l + 1], &grad_a);
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { layer: l, what: "backpropagated delta".into() });
            }
            let input = &trace.activations[l];
            let mut gw = Vec::with_capacity(layer.outputs * layer.inputs);
            for &d in &delta {
                gw.extend(input.iter().map(|&x| d * x));
            }
            if l > 0 {
                grad_a = (0..layer.inputs)
                    .map(|i| (0..layer.outputs).map(|o| layer.weight[o * layer.inputs + i] as f64 * delta[o]).sum())
                    .collect();
            }
            per_layer[l] = (gw, delta);
        }
        let grads = per_layer.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect();
        Ok((value, GradientVector(grads)))
    }

    pub fn backprop(&self, x: &[f64], target: &[f64], loss: Loss) -> Result<GradientVector> {
        self.loss_and_gradient(x, target, loss).map(|(_, g)| g)
    }

    /// `p ← p − lr·g`, computed in f64 and stored back as f32.
    fn apply_update(&mut self, grad: &[f64], lr: f64) {
        let mut k = 0;
        for layer in &mut self.layers {
            for p in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *p = (*p as f64 - lr * grad[k]) as f32;
                k += 1;
            }
        }
    }

    pub fn mean_loss(&self, data: &Samples, loss: Loss) -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in data.inputs.iter().zip(&data.targets) {
            total += loss.value(&self.forward(x)?, t);
        }
        Ok(total / data.len() as f64)
    }

    /// Fraction of samples whose arg-max output matches the arg-max target.
    pub fn accuracy(&self, data: &Samples) -> Result<f64> {
        let mut hits = 0usize;
        for (x, t) in data.inputs.iter().zip(&data.targets) {
            if argmax(&self.forward(x)?) == argmax(t) {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Paired inputs and targets.
#[derive(Clone, Debug, Default)]
pub struct Samples {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Samples {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
        }
        Ok(Samples { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub loss: Loss,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    /// Mean per-sample loss seen during each epoch.
    pub history: Vec<f64>,
    pub final_loss: f64,
}

/// Minibatch SGD over a private copy of `net`. Sample order is shuffled each
/// epoch from `cfg.seed`.
pub fn train_sgd(net: &Network, data: &Samples, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    for (x, t) in data.inputs.iter().zip(&data.targets) {
        if x.len() != net.arch.input_width() || t.len() != net.arch.output_width() {
            return Err(Error::Shape("training sample does not match architecture".into()));
        }
    }
    let mut net = net.clone();
    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let n_params = net.param_count();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut acc = vec![0.0f64; n_params];
            for &i in batch {
                let (value, g) = net
                    .loss_and_gradient(&data.inputs[i], &data.targets[i], cfg.loss)
                    .map_err(|_| Error::Divergence { epoch })?;
                epoch_loss += value;
                for (a, g) in acc.iter_mut().zip(&g.0) {
                    *a += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            net.apply_update(&acc, cfg.lr);
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(mean);
    }
    let final_loss = match history.last() {
        Some(&l) => l,
        None => net.mean_loss(data, cfg.loss)?,
    };
    Ok(TrainOutcome { net, history, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: Vec<f32>, b: Vec<f32>, inp: usize, out: usize) -> Network {
        let arch = Arch::new(vec![inp, out], vec![Activation::Identity]).unwrap();
        let m = ModelRecord::new(
            arch,
            vec![
                Tensor::new("l0.weight", vec![out, inp], w).unwrap(),
                Tensor::new("l0.bias", vec![out], b).unwrap(),
            ],
            BTreeMap::new(),
        )
        .unwrap();
        Network::from_model(&m)
    }

    #[test]
    fn single_linear_layer() {
        let net = linear(vec![2.0], vec![1.0], 1, 1);
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn identity_network_passes_input_through() {
        let arch = Arch::new(vec![3, 3, 3], vec![Activation::Identity; 2]).unwrap();
        let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let w = WeightVector([eye.clone(), vec![0.0; 3], eye, vec![0.0; 3]].concat());
        let net = Network::from_model(&ModelRecord::unflatten(arch, &w, BTreeMap::new()).unwrap());
        assert_eq!(net.forward(&[0.5, -2.0, 3.25]).unwrap(), vec![0.5, -2.0, 3.25]);
    }

    #[test]
    fn dimension_mismatch() {
        let net = linear(vec![2.0], vec![1.0], 1, 1);
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(net.backprop(&[1.0], &[1.0, 2.0], Loss::Mse).is_err());
    }

    #[test]
    fn zero_network_has_zero_gradient() {
        let arch: Arch = "3-4-2:tanh,identity".parse().unwrap();
        let w = WeightVector(vec![0.0; arch.param_count()]);
        let net = Network::from_model(&ModelRecord::unflatten(arch, &w, BTreeMap::new()).unwrap());
        let g = net.backprop(&[0.0; 3], &[0.0; 2], Loss::Mse).unwrap();
        assert_eq!(g.len(), net.param_count());
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_mse_closed_form() {
        // J = (Wx + b − t)², ∂J/∂W = 2(Wx+b−t)xᵀ, ∂J/∂b = 2(Wx+b−t)
        let net = linear(vec![0.5, -1.0], vec![0.25], 2, 1);
        let x = [2.0, 3.0];
        let t = [1.0];
        let r = 0.5 * 2.0 - 3.0 + 0.25 - 1.0;
        let g = net.backprop(&x, &t, Loss::Mse).unwrap();
        assert_eq!(g.0, vec![2.0 * r * 2.0, 2.0 * r * 3.0, 2.0 * r]);
    }

    #[test]
    fn overflow_reports_layer() {
        let net = linear(vec![f32::MAX], vec![0.0], 1, 1);
        match net.forward(&[f64::MAX]) {
            Err(Error::Numeric { layer: 0, .. }) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    fn blobs(seed: u64) -> Samples {
        let mut rng = rng::seeded(seed);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..100 {
            let c = i % 2;
            let cx = if c == 0 { -1.5 } else { 1.5 };
            inputs.push(vec![cx + rng.gen_range(-0.7..0.7), rng.gen_range(-1.0..1.0)]);
            targets.push(if c == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
        }
        Samples::new(inputs, targets).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let arch: Arch = "2-8-2".parse().unwrap();
        let net = Network::init(&arch, 3).unwrap();
        let cfg = TrainConfig { epochs: 3, lr: 0.0, batch: 8, loss: Loss::CrossEntropy, seed: 1 };
        let out = train_sgd(&net, &blobs(0), &cfg).unwrap();
        assert!(out.net.weights().bit_eq(&net.weights()));
    }

    #[test]
    fn trains_separable_blobs_deterministically() {
        let arch: Arch = "2-8-2".parse().unwrap();
        let net = Network::init(&arch, 11).unwrap();
        let data = blobs(5);
        let cfg = TrainConfig { epochs: 200, lr: 0.1, batch: 10, loss: Loss::CrossEntropy, seed: 2 };
        let a = train_sgd(&net, &data, &cfg).unwrap();
        let b = train_sgd(&net, &data, &cfg).unwrap();
        assert!(a.net.accuracy(&data).unwrap() >= 0.9);
        assert!(a.net.weights().bit_eq(&b.net.weights()));
        assert_eq!(a.final_loss, b.final_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let arch: Arch = "2-4-1:identity,identity".parse().unwrap();
        let net = Network::init(&arch, 1).unwrap();
        let data = Samples::new(vec![vec![1e3, -1e3]; 4], vec![vec![1e3]; 4]).unwrap();
        let cfg = TrainConfig { epochs: 50, lr: 10.0, batch: 1, loss: Loss::Mse, seed: 0 };
        assert!(matches!(train_sgd(&net, &data, &cfg), Err(Error::Divergence { .. })));
    }
}
