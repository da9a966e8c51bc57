use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    bias_correct, build_mask, init_epsilon, optimize_block, reconstruction_loss, BiasPerturbation, BlockSettings,
    GptqConfig, Granularity, LossKind, QuantLayer, TracePoint, Unit,
};
use crate::calib::CalibrationSet;
use crate::codec::{ChannelGrids, QuantParams};
use crate::error::{Error, Result};
use crate::mixedprec::{allocate_bits, bits_by_layer, middle_layers, neuron_sensitivity, normalize_allocation};
use crate::mixedprec::{BitAllocation, SensitivityStats};
use crate::tensor::network::forward_segment;
use crate::tensor::{ActQuant, NetworkRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub index: usize,
    /// Half-open layer range.
    pub start: usize,
    pub end: usize,
    pub nearest_l2: f64,
    pub final_l2: f64,
    /// l2 after bias correction of the selected layers.
    pub corrected_l2: f64,
    pub fallback: bool,
    pub best_step: usize,
    pub skipped_steps: u64,
    pub boundary_inits: usize,
    pub diagnostic: Option<String>,
    pub trace: Vec<TracePoint>,
    /// Wall-clock seconds; varies between runs.
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSummary {
    pub stats: SensitivityStats,
    pub allocation: BitAllocation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantReport {
    pub units: Vec<UnitReport>,
    pub allocation: Option<AllocationSummary>,
    /// `(layer, channel)` pairs whose weights were all zero.
    pub zero_scale_channels: Vec<(usize, usize)>,
    pub calib_samples: usize,
}

/// Optimization units as half-open layer ranges, first to last.
pub fn plan_units(net: &NetworkRecord, granularity: Granularity) -> Result<Vec<(usize, usize)>> {
    let units: Vec<(usize, usize)> = match granularity {
        Granularity::Layer => net.parametric_layers().into_iter().map(|i| (i, i + 1)).collect(),
        Granularity::Block => net
            .blocks()
            .iter()
            .copied()
            .filter(|&(s, e)| net.layers()[s..e].iter().any(|l| l.kind.is_parametric()))
            .collect(),
    };
    for &(s, e) in &units {
        for (i, l) in net.layers()[s..e].iter().enumerate() {
            if let Some(src) = l.skip_from {
                if src < s {
                    return Err(Error::Config(format!(
                        "layer {}: residual reference {src} leaves its block [{s}, {e}); use layer granularity",
                        s + i
                    )));
                }
            }
        }
    }
    Ok(units)
}

/// Quantizes every parametric layer first to last. Each unit sees the
/// output of the already quantized prefix and reconstructs the
/// full-precision activation at its end.
pub fn quantize_network(net: &NetworkRecord, calib: &CalibrationSet, cfg: &GptqConfig) -> Result<(NetworkRecord, QuantReport)> {
    cfg.validate()?;
    let set = calib.head(cfg.calib_size);
    if set.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "calibration set has {} samples, fewer than the batch size {}",
            set.len(),
            cfg.batch_size
        )));
    }
    let x = set.inputs.clone();
    let fp = net.trace(&x)?;
    let units = plan_units(net, cfg.granularity)?;
    let params = net.parametric_layers();
    let edges = [params.first().copied(), params.last().copied()];
    let is_edge = |i: usize| edges.contains(&Some(i));

    let allocation = if cfg.mixed_precision {
        let middle = middle_layers(net);
        if middle.is_empty() {
            None
        } else {
            let stats = neuron_sensitivity(net, &x, &middle)?;
            let raw = allocate_bits(&stats, cfg.bits)?;
            let allocation = normalize_allocation(&raw);
            Some(AllocationSummary { stats, allocation })
        }
    } else {
        None
    };
    let channel_bits = allocation
        .as_ref()
        .map(|a| bits_by_layer(&a.stats, &a.allocation))
        .unwrap_or_default();

    let mut layers = net.layers().to_vec();
    let mut zero_scale_channels = Vec::new();
    let mut qparams: Vec<Option<QuantParams>> = vec![None; layers.len()];
    for &i in &params {
        let (wbits, abits) = if is_edge(i) {
            (cfg.edge_bits, cfg.edge_bits)
        } else {
            (cfg.bits, cfg.act_bits)
        };
        layers[i].input_quant = Some(ActQuant::calibrate(abits, &fp.acts[i]));
        let w = layers[i].weight.as_ref().expect("parametric");
        let (p, scales) = QuantParams::for_weights(w, cfg.scheme.clone(), wbits, channel_bits.get(&i).cloned())
            .map_err(|e| Error::Shape {
                layer: i,
                msg: e.to_string(),
            })?;
        zero_scale_channels.extend(scales.zero_channels.iter().map(|&c| (i, c)));
        qparams[i] = Some(p);
    }
    // full-precision weights with the activation quantizers attached
    let reference = layers.clone();

    let mut history = vec![x.clone()];
    let mut reports = Vec::with_capacity(units.len());
    for (u, &(s, e)) in units.iter().enumerate() {
        let done = history.len() - 1;
        forward_segment(&layers[done..s], done, 0, &mut history)?;
        let started = Instant::now();

        let mut quant = Vec::with_capacity(e - s);
        let mut boundary_inits = 0;
        for (i, layer) in layers.iter().enumerate().take(e).skip(s) {
            let Some(p) = &qparams[i] else {
                quant.push(None);
                continue;
            };
            let w = layer.weight.as_ref().expect("parametric");
            let grids = ChannelGrids::new(p, w.len());
            let eps = init_epsilon(w, &grids, cfg.domain, cfg.beta());
            boundary_inits += eps.boundary_inits;
            let mask = build_mask(w, &grids, cfg.mask)?;
            let bias = layer.bias.as_ref().and_then(|b| BiasPerturbation::new(b, cfg.bias_alpha));
            quant.push(Some(QuantLayer {
                params: p.clone(),
                grids,
                eps,
                mask,
                bias,
            }));
        }
        let mut unit = Unit::new(s, reference[s..e].to_vec(), quant)?;
        let settings = BlockSettings {
            loss: cfg.loss,
            iterations: cfg.iterations,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer,
            lr: cfg.lr,
            augment: cfg.augment,
            eval_every: cfg.eval_every,
            val_fraction: cfg.val_fraction,
            seed: cfg.seed,
            stream: u as u64,
        };
        let target = &fp.acts[e];
        let out = optimize_block(&mut unit, &history[s], target, &settings)?;
        let mut chosen = out.layers;

        if cfg.bias_correction {
            let mut local = vec![history[s].clone()];
            for j in 0..chosen.len() {
                if chosen[j].kind.is_parametric() {
                    let input = local.last().expect("non-empty");
                    chosen[j] = bias_correct(s + j, &reference[s + j], &chosen[j], input)?;
                }
                forward_segment(&chosen[j..j + 1], s + j, s, &mut local)?;
            }
        }
        let corrected_l2 = reconstruction_loss(target, &unit.run(&chosen, &history[s])?, LossKind::L2);
        for (j, l) in chosen.into_iter().enumerate() {
            layers[s + j] = l;
        }
        forward_segment(&layers[s..e], s, 0, &mut history)?;
        reports.push(UnitReport {
            index: u,
            start: s,
            end: e,
            nearest_l2: out.nearest_l2,
            final_l2: out.final_l2,
            corrected_l2,
            fallback: out.fallback,
            best_step: out.best_step,
            skipped_steps: out.skipped_steps,
            boundary_inits,
            diagnostic: out.diagnostic,
            trace: out.trace,
            elapsed_secs: started.elapsed().as_secs_f64(),
        });
    }

    let mut meta = net.meta.clone();
    meta.train_accuracy = None;
    let qnet = NetworkRecord::new(layers, net.blocks().to_vec(), meta)?;
    Ok((
        qnet,
        QuantReport {
            units: reports,
            allocation,
            zero_scale_channels,
            calib_samples: set.len(),
        },
    ))
}

