use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    effective_weight, effective_weight_jacobian, loss_and_grad, reconstruction_loss, BiasPerturbation, EpsilonVar,
    LossKind, Phase,
};
use crate::calib::{augment_features, stream_rng, AugmentSpec};
use crate::codec::{ChannelGrids, QuantParams, RoundMode};
use crate::error::{Error, Result};
use crate::optim::{new_optimizer, HyperOverrides, OptimizerKind};
use crate::tensor::network::{backward_segment, forward_segment};
use crate::tensor::{LayerRecord, Tensor};

/// Rounding state of one parametric layer inside a unit.
#[derive(Debug, Clone)]
pub struct QuantLayer {
    pub params: QuantParams,
    pub grids: ChannelGrids,
    pub eps: EpsilonVar,
    /// `true` where the rounding variable is trainable.
    pub mask: Vec<bool>,
    pub bias: Option<BiasPerturbation>,
}

/// A contiguous run of layers optimized jointly.
#[derive(Debug, Clone)]
pub struct Unit {
    /// Global index of the first layer.
    pub first: usize,
    /// Layers with their full-precision weights and configured input quantizers.
    pub layers: Vec<LayerRecord>,
    /// Aligned with `layers`; `Some` for every parametric layer.
    pub quant: Vec<Option<QuantLayer>>,
}

/// Gradients of a unit loss with respect to every raw parameter.
#[derive(Debug, Clone)]
pub struct UnitGrads {
    pub loss: f64,
    /// Per layer, gradient over `eps.raw` (empty for parameter-free layers).
    pub eps: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Unit {
    pub fn new(first: usize, layers: Vec<LayerRecord>, quant: Vec<Option<QuantLayer>>) -> Result<Self> {
        if layers.len() != quant.len() {
            return Err(Error::Config("every unit layer needs a quantization slot".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if let Some(s) = l.skip_from {
                if s < first {
                    return Err(Error::Config(format!(
                        "layer {}: residual reference {s} crosses the start of its unit at {first}",
                        first + i
                    )));
                }
            }
            if l.kind.is_parametric() != quant[i].is_some() {
                return Err(Error::Config(format!(
                    "layer {}: quantization slot does not match the layer kind",
                    first + i
                )));
            }
        }
        Ok(Self { first, layers, quant })
    }

    /// Layers carrying the weights and biases the rounding state realizes.
    pub fn materialize(&self, phase: Phase) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .zip(&self.quant)
            .map(|(l, q)| {
                let mut l = l.clone();
                if let Some(q) = q {
                    l.weight = Some(effective_weight(&q.eps, &q.grids, phase));
                    if let (Some(b), Some(p)) = (&l.bias, &q.bias) {
                        l.bias = Some(p.apply(b));
                    }
                    l.weight_quant = Some(q.params.clone());
                }
                l
            })
            .collect()
    }

    /// Layers with every weight rounded to its nearest grid level and the
    /// original biases.
    pub fn nearest(&self) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .zip(&self.quant)
            .map(|(l, q)| {
                let mut l = l.clone();
                if let Some(q) = q {
                    l.weight = Some(q.grids.quantize(l.weight.as_ref().expect("parametric"), RoundMode::Hard));
                    l.weight_quant = Some(q.params.clone());
                }
                l
            })
            .collect()
    }

    pub fn run(&self, layers: &[LayerRecord], x: &Tensor) -> Result<Tensor> {
        let mut history = vec![x.clone()];
        forward_segment(layers, self.first, self.first, &mut history)?;
        Ok(history.pop().expect("non-empty"))
    }

    /// Train-phase loss against `target` and its gradient with respect to
    /// every raw rounding and bias parameter.
    pub fn loss_and_grads(&self, x: &Tensor, target: &Tensor, kind: LossKind) -> Result<UnitGrads> {
        let layers = self.materialize(Phase::Train);
        let mut history = vec![x.clone()];
        let caches = forward_segment(&layers, self.first, self.first, &mut history)?;
        let (loss, g) = loss_and_grad(target, history.last().expect("non-empty"), kind);
        let sg = backward_segment(&layers, self.first, self.first, &history, &caches, &g)?;
        let mut eps = Vec::with_capacity(self.layers.len());
        let mut bias = Vec::with_capacity(self.layers.len());
        for (j, q) in self.quant.iter().enumerate() {
            let Some(q) = q else {
                eps.push(Vec::new());
                bias.push(Vec::new());
                continue;
            };
            let gw = sg.weights[j].as_ref().expect("parametric layer gradient");
            let jac = effective_weight_jacobian(&q.eps, &q.grids);
            eps.push(gw.data().iter().zip(jac).map(|(a, b)| a * b).collect());
            bias.push(match (&q.bias, &sg.biases[j]) {
                (Some(p), Some(gb)) => gb.data().iter().zip(p.jacobian()).map(|(a, b)| a * b).collect(),
                _ => Vec::new(),
            });
        }
        Ok(UnitGrads { loss, eps, bias })
    }

    fn trainable_len(&self) -> usize {
        self.quant
            .iter()
            .flatten()
            .map(|q| q.mask.iter().filter(|&&m| m).count() + q.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    fn gather(&self, grads: Option<&UnitGrads>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for (j, q) in self.quant.iter().enumerate() {
            let Some(q) = q else { continue };
            for (i, &m) in q.mask.iter().enumerate() {
                if m {
                    out.push(grads.map_or(q.eps.raw[i], |g| g.eps[j][i]));
                }
            }
            if let Some(b) = &q.bias {
                for i in 0..b.len() {
                    out.push(grads.map_or(b.raw[i], |g| g.bias[j][i]));
                }
            }
        }
        out
    }

    fn scatter(&mut self, flat: &[f64]) {
        let mut at = 0;
        for q in self.quant.iter_mut().flatten() {
            for (i, &m) in q.mask.iter().enumerate() {
                if m {
                    q.eps.raw[i] = flat[at];
                    at += 1;
                }
            }
            if let Some(b) = q.bias.as_mut() {
                for r in b.raw.iter_mut() {
                    *r = flat[at];
                    at += 1;
                }
            }
        }
    }
}

/// Optimization settings of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSettings {
    pub loss: LossKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: Option<f64>,
    pub augment: Option<AugmentSpec>,
    pub eval_every: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Distinguishes the random streams of different units.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Train-phase loss over the training split.
    pub train_loss: f64,
    /// Hardened loss over the held-out split.
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct UnitOutcome {
    /// Hardened layers selected for the unit.
    pub layers: Vec<LayerRecord>,
    /// Hardened l2 of nearest rounding over all unit samples.
    pub nearest_l2: f64,
    /// Hardened l2 of the selected layers over all unit samples.
    pub final_l2: f64,
    pub fallback: bool,
    pub best_step: usize,
    pub trace: Vec<TracePoint>,
    pub skipped_steps: u64,
    pub diagnostic: Option<String>,
}

/// Learns the unit's rounding on `(x, target)` pairs: mini-batches are drawn
/// with replacement from the leading samples, the trailing `val_fraction`
/// selects the best hardened checkpoint, and nearest rounding is returned
/// whenever it reconstructs at least as well.
pub fn optimize_block(unit: &mut Unit, x: &Tensor, target: &Tensor, cfg: &BlockSettings) -> Result<UnitOutcome> {
    let n = x.batch();
    if target.batch() != n {
        return Err(Error::Config(format!("{n} unit inputs but {} targets", target.batch())));
    }
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1)
    };
    let n_train = n - n_val;
    let (x_train, t_train) = (x.slice_rows(0, n_train), target.slice_rows(0, n_train));
    let (x_val, t_val) = if n_val == 0 {
        (x.clone(), target.clone())
    } else {
        (x.slice_rows(n_train, n), target.slice_rows(n_train, n))
    };

    let nearest = unit.nearest();
    let nearest_l2 = reconstruction_loss(target, &unit.run(&nearest, x)?, LossKind::L2);

    let mut params = unit.gather(None);
    let mut opt = new_optimizer(
        cfg.optimizer,
        params.len(),
        HyperOverrides {
            lr: cfg.lr,
            ..Default::default()
        },
    )?;
    let mut batch_rng = stream_rng(cfg.seed, cfg.stream * 2);
    let mut aug_rng = stream_rng(cfg.seed, cfg.stream * 2 + 1);

    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Vec<LayerRecord>)> = None;
    let mut diagnostic = None;
    let mut checkpoint = |unit: &Unit, step: usize, best: &mut Option<(f64, usize, Vec<LayerRecord>)>| -> Result<bool> {
        let train_loss = unit.loss_and_grads(&x_train, &t_train, cfg.loss)?.loss;
        let hard = unit.materialize(Phase::Eval);
        let val_loss = reconstruction_loss(&t_val, &unit.run(&hard, &x_val)?, cfg.loss);
        trace.push(TracePoint {
            step,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Ok(false);
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            *best = Some((val_loss, step, hard));
        }
        Ok(true)
    };

    let mut finite = checkpoint(unit, 0, &mut best)?;
    if finite && unit.trainable_len() > 0 {
        for step in 1..=cfg.iterations {
            let rows: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.random_range(0..n_train)).collect();
            let mut xb = x_train.select_rows(&rows);
            if let Some(a) = cfg.augment {
                xb = augment_features(&xb, a, &mut aug_rng)?;
            }
            let tb = t_train.select_rows(&rows);
            let grads = match unit.loss_and_grads(&xb, &tb, cfg.loss) {
                Ok(g) if g.loss.is_finite() => g,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    finite = false;
                    diagnostic = Some(format!("non-finite loss at step {step}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut params, &unit.gather(Some(&grads)))?;
            unit.scatter(&params);
            if (step % cfg.eval_every == 0 || step == cfg.iterations) && !checkpoint(unit, step, &mut best)? {
                finite = false;
                diagnostic = Some(format!("non-finite checkpoint loss at step {step}"));
                break;
            }
        }
    } else if !finite {
        diagnostic = Some("non-finite loss at initialization".into());
    }

    let (mut layers, mut best_step) = match best {
        Some((_, s, l)) => (l, s),
        None => (nearest.clone(), 0),
    };
    let mut final_l2 = reconstruction_loss(target, &unit.run(&layers, x)?, LossKind::L2);
    let mut fallback = false;
    if !finite || !matches!(final_l2.partial_cmp(&nearest_l2), Some(std::cmp::Ordering::Less | std::cmp::Ordering::Equal)) {
        layers = nearest;
        final_l2 = nearest_l2;
        best_step = 0;
        fallback = true;
    }
    Ok(UnitOutcome {
        layers,
        nearest_l2,
        final_l2,
        fallback,
        best_step,
        trace,
        skipped_steps: opt.skipped(),
        diagnostic,
    })
}
