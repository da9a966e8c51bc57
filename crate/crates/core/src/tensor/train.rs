//! Full-precision trainer for the toy fixtures (softmax cross-entropy).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{backward, network_forward, Activation, LayerRecord, NetworkMeta, NetworkRecord, Tensor};
use crate::calib::{stream_rng, CalibrationSet};
use crate::error::{Error, Result};
use crate::optim::{new_optimizer, HyperOverrides, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyArch {
    /// `features -> 32 -> 32 -> classes` with relu.
    Mlp,
    /// Two convolutions, a residual pair, global pooling and a linear head.
    Cnn,
}

impl ToyArch {
    pub fn name(self) -> &'static str {
        match self {
            ToyArch::Mlp => "mlp",
            ToyArch::Cnn => "cnn",
        }
    }

    /// Freshly initialized network (He-normal weights, zero biases).
    pub fn build(self, input_shape: &[usize], classes: usize, seed: u64) -> Result<NetworkRecord> {
        let mut rng = stream_rng(seed, 1 << 52);
        let mut he = |shape: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let zeros = |n: usize| Some(Tensor::zeros(&[n]));
        let meta = NetworkMeta {
            arch: self.name().into(),
            input_shape: input_shape.to_vec(),
            classes: Some(classes),
            ..Default::default()
        };
        match self {
            ToyArch::Mlp => {
                let inp: usize = input_shape.iter().product();
                let mut layers = Vec::new();
                if input_shape.len() > 1 {
                    layers.push(LayerRecord::flatten());
                }
                layers.push(LayerRecord::linear(he(&[32, inp], inp), zeros(32)).with_activation(Activation::Relu));
                layers.push(LayerRecord::linear(he(&[32, 32], 32), zeros(32)).with_activation(Activation::Relu));
                layers.push(LayerRecord::linear(he(&[classes, 32], 32), zeros(classes)));
                NetworkRecord::new(layers, Vec::new(), meta)
            }
            ToyArch::Cnn => {
                let [c, _, _] = input_shape[..] else {
                    return Err(Error::Config(format!(
                        "the toy CNN needs a [c, h, w] input, got {input_shape:?}"
                    )));
                };
                let conv = |he: &mut dyn FnMut(&[usize], usize) -> Tensor, cin: usize, cout: usize, stride| {
                    LayerRecord::conv2d(he(&[cout, cin, 3, 3], cin * 9), Some(Tensor::zeros(&[cout])), stride, 1)
                };
                let layers = vec![
                    conv(&mut he, c, 4, 1).with_activation(Activation::Relu),
                    conv(&mut he, 4, 8, 2).with_activation(Activation::Relu),
                    conv(&mut he, 8, 8, 1).with_activation(Activation::Relu),
                    conv(&mut he, 8, 8, 1),
                    LayerRecord::residual_add(2),
                    LayerRecord::relu(),
                    LayerRecord::global_avg_pool(),
                    LayerRecord::linear(he(&[classes, 8], 8), zeros(classes)),
                ];
                NetworkRecord::new(layers, vec![(0, 1), (1, 2), (2, 6), (6, 8)], meta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: NetworkRecord,
    pub train_accuracy: f64,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

fn labels_of(data: &CalibrationSet) -> Result<&[usize]> {
    data.labels
        .as_deref()
        .ok_or_else(|| Error::Dataset(format!("{} set carries no labels", data.kind)))
}

/// Softmax cross-entropy of a logit batch and its gradient (mean over samples).
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    let k = logits.sample_len();
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[y];
        for j in 0..k {
            let p = (row[j] - max).exp() / sum;
            grad[i * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, Tensor::from_parts(logits.shape().to_vec(), grad))
}

/// Trains a fresh `arch` network on `data` with Adam. Deterministic in
/// `settings.seed`; `epochs = 0` returns the initialization.
pub fn train_toy(arch: ToyArch, data: &CalibrationSet, settings: &TrainSettings) -> Result<TrainOutcome> {
    let labels = labels_of(data)?;
    let classes = match &data.world {
        Some(w) => w.classes,
        None => labels.iter().max().map_or(2, |m| m + 1),
    };
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut net = arch.build(data.sample_shape(), classes, settings.seed)?;
    net.meta.data = data.world.clone();
    let params = net.parametric_layers();
    let mut flat = flatten_params(&net, &params);
    let mut opt = new_optimizer(
        OptimizerKind::Adam,
        flat.len(),
        HyperOverrides {
            lr: Some(settings.lr),
            ..Default::default()
        },
    )?;
    let mut rng = stream_rng(settings.seed, 1 << 53);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        let diverged = || Error::Diverged {
            epoch,
            last_finite: epoch.checked_sub(1),
        };
        for chunk in order.chunks(settings.batch_size) {
            let x = data.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = network_forward(&net, &x).map_err(|_| diverged())?;
            let (loss, seed) = cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(diverged());
            }
            let g = backward(&net, &x, &seed).map_err(|_| diverged())?;
            let mut grads = Vec::with_capacity(flat.len());
            for &i in &params {
                grads.extend_from_slice(g.weights[i].as_ref().expect("parametric").data());
                if let Some(b) = &g.biases[i] {
                    grads.extend_from_slice(b.data());
                }
            }
            opt.step(&mut flat, &grads)?;
            unflatten_params(&mut net, &params, &flat);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let train_accuracy = accuracy(&net, data)?;
    net.meta.train_accuracy = Some(train_accuracy);
    Ok(TrainOutcome {
        net,
        train_accuracy,
        epoch_losses,
    })
}

fn flatten_params(net: &NetworkRecord, params: &[usize]) -> Vec<f64> {
    let mut flat = Vec::new();
    for &i in params {
        let l = &net.layers()[i];
        flat.extend_from_slice(l.weight.as_ref().expect("parametric").data());
        if let Some(b) = &l.bias {
            flat.extend_from_slice(b.data());
        }
    }
    flat
}

fn unflatten_params(net: &mut NetworkRecord, params: &[usize], flat: &[f64]) {
    let mut at = 0;
    for &i in params {
        let mut l = net.layers()[i].clone();
        let w = l.weight.as_mut().expect("parametric");
        let n = w.len();
        w.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
        if let Some(b) = l.bias.as_mut() {
            let n = b.len();
            b.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        net.set_layer(i, l).expect("same shapes");
    }
}

/// Top-1 accuracy; ties between logits resolve to the lowest class index.
pub fn accuracy(net: &NetworkRecord, data: &CalibrationSet) -> Result<f64> {
    let labels = labels_of(data)?;
    let logits = network_forward(net, &data.inputs)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.sample(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
