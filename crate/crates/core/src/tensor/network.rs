use serde::{Deserialize, Serialize};

use super::{LayerCache, LayerRecord, Tensor};
use crate::calib::WorldSpec;
use crate::error::{Error, Result};

/// Descriptive metadata carried alongside the layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub arch: String,
    /// Per-sample input shape (without the batch axis).
    pub input_shape: Vec<usize>,
    pub classes: Option<usize>,
    /// Data generator the network was trained on, if any.
    pub data: Option<WorldSpec>,
    pub train_accuracy: Option<f64>,
}

/// Sequential network with backward-pointing residual references and a
/// partition of its layers into optimization blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkRecord {
    layers: Vec<LayerRecord>,
    blocks: Vec<(usize, usize)>,
    pub meta: NetworkMeta,
}

impl NetworkRecord {
    /// `blocks` are half-open `[start, end)` layer ranges. An empty list
    /// means one block per layer.
    pub fn new(layers: Vec<LayerRecord>, blocks: Vec<(usize, usize)>, meta: NetworkMeta) -> Result<Self> {
        let blocks = if blocks.is_empty() {
            (0..layers.len()).map(|i| (i, i + 1)).collect()
        } else {
            blocks
        };
        let net = Self { layers, blocks, meta };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Network("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
            if let Some(s) = l.skip_from {
                if s > i {
                    return Err(Error::Network(format!(
                        "layer {i}: residual reference {s} does not point backward"
                    )));
                }
            }
        }
        let mut next = 0;
        for &(s, e) in &self.blocks {
            if s != next || e <= s {
                return Err(Error::Network(format!(
                    "blocks must partition the layers in order; got {:?}",
                    self.blocks
                )));
            }
            next = e;
        }
        if next != self.layers.len() {
            return Err(Error::Network(format!(
                "blocks cover {next} of {} layers",
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerRecord] {
        &self.layers
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Replaces layer `index`, re-validating the network.
    pub fn set_layer(&mut self, index: usize, layer: LayerRecord) -> Result<()> {
        layer.validate(index)?;
        self.layers[index] = layer;
        Ok(())
    }

    pub fn parametric_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_parametric())
            .map(|(i, _)| i)
            .collect()
    }

    /// Full forward pass keeping every activation and layer cache.
    pub fn trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        let mut acts = vec![x.clone()];
        let caches = forward_segment(&self.layers, 0, 0, &mut acts)?;
        Ok(ForwardTrace { acts, caches })
    }
}

/// Activations `acts[0] = input`, `acts[i + 1] = output of layer i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub acts: Vec<Tensor>,
    pub caches: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace holds the input")
    }
}

pub fn network_forward(net: &NetworkRecord, x: &Tensor) -> Result<Tensor> {
    let mut acts = vec![x.clone()];
    forward_segment(&net.layers, 0, 0, &mut acts)?;
    Ok(acts.pop().expect("non-empty"))
}

/// Runs `layers` (global indices starting at `first`) on a history whose
/// entry `k` is global activation `offset + k`. The history must end at the
/// segment input; outputs are appended.
pub(crate) fn forward_segment(
    layers: &[LayerRecord],
    first: usize,
    offset: usize,
    history: &mut Vec<Tensor>,
) -> Result<Vec<LayerCache>> {
    debug_assert_eq!(history.len() + offset, first + 1);
    let mut caches = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let gi = first + i;
        let skip = match layer.skip_from {
            Some(s) if s < offset => {
                return Err(Error::Network(format!(
                    "layer {gi}: residual reference {s} lies outside the evaluated segment"
                )))
            }
            Some(s) => Some(&history[s - offset]),
            None => None,
        };
        let cache = layer.forward(gi, history.last().expect("non-empty"), skip)?;
        history.push(cache.out.clone());
        caches.push(cache);
    }
    Ok(caches)
}

/// Per-layer gradients of one segment plus the gradient reaching its input.
#[derive(Debug, Clone)]
pub(crate) struct SegmentGrads {
    pub weights: Vec<Option<Tensor>>,
    pub biases: Vec<Option<Tensor>>,
    pub pre: Vec<Option<Tensor>>,
    pub input: Tensor,
}

/// Reverse pass over a segment evaluated by [`forward_segment`].
pub(crate) fn backward_segment(
    layers: &[LayerRecord],
    first: usize,
    offset: usize,
    history: &[Tensor],
    caches: &[LayerCache],
    grad_out: &Tensor,
) -> Result<SegmentGrads> {
    // local activation k of the segment is history[first - offset + k]
    let base = first - offset;
    let n = layers.len();
    let mut grads: Vec<Option<Tensor>> = vec![None; base + n + 1];
    grads[base + n] = Some(grad_out.clone());
    let mut weights = vec![None; n];
    let mut biases = vec![None; n];
    let mut pre = vec![None; n];
    for i in (0..n).rev() {
        let Some(g) = grads[base + i + 1].take() else {
            continue;
        };
        let lg = layers[i].backward(first + i, &history[base + i], &caches[i], &g)?;
        accumulate(&mut grads[base + i], lg.input);
        if let (Some(s), Some(gs)) = (layers[i].skip_from, lg.skip) {
            accumulate(&mut grads[s - offset], gs);
        }
        weights[i] = lg.weight;
        biases[i] = lg.bias;
        if layers[i].kind.is_parametric() {
            pre[i] = Some(lg.pre);
        }
    }
    let input = grads[base]
        .take()
        .unwrap_or_else(|| Tensor::zeros(history[base].shape()));
    Ok(SegmentGrads {
        weights,
        biases,
        pre,
        input,
    })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Gradients of `<seed, F(x)>` with respect to every parameter, every
/// parametric layer's pre-activation output and the input.
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub weights: Vec<Option<Tensor>>,
    pub biases: Vec<Option<Tensor>>,
    pub pre_activations: Vec<Option<Tensor>>,
    pub input: Tensor,
}

pub fn backward(net: &NetworkRecord, x: &Tensor, seed_grad: &Tensor) -> Result<NetworkGrads> {
    let trace = net.trace(x)?;
    if seed_grad.shape() != trace.output().shape() {
        return Err(Error::Shape {
            layer: net.len() - 1,
            msg: format!(
                "seed gradient shape {:?} does not match output {:?}",
                seed_grad.shape(),
                trace.output().shape()
            ),
        });
    }
    let g = backward_segment(&net.layers, 0, 0, &trace.acts, &trace.caches, seed_grad)?;
    Ok(NetworkGrads {
        weights: g.weights,
        biases: g.biases,
        pre_activations: g.pre,
        input: g.input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn composition() {
        let net = NetworkRecord::new(
            vec![
                LayerRecord::linear(t(&[1, 1], &[2.]), None),
                LayerRecord::linear(t(&[1, 1], &[3.]), None),
            ],
            vec![],
            NetworkMeta::default(),
        )
        .unwrap();
        assert_eq!(network_forward(&net, &t(&[1, 1], &[1.])).unwrap().data(), &[6.]);
    }

    #[test]
    fn residual_over_identity_branch() {
        let net = NetworkRecord::new(
            vec![
                LayerRecord::linear(t(&[1, 1], &[1.]), None),
                LayerRecord::residual_add(0),
            ],
            vec![(0, 2)],
            NetworkMeta::default(),
        )
        .unwrap();
        assert_eq!(network_forward(&net, &t(&[1, 1], &[1.])).unwrap().data(), &[2.]);
    }

    #[test]
    fn forward_pointing_skip_rejected_at_construction() {
        let r = NetworkRecord::new(
            vec![LayerRecord::relu(), LayerRecord::residual_add(3)],
            vec![],
            NetworkMeta::default(),
        );
        assert!(matches!(r, Err(Error::Network(_))));
    }

    #[test]
    fn bad_partition_rejected() {
        let layers = vec![LayerRecord::relu(), LayerRecord::relu()];
        assert!(NetworkRecord::new(layers.clone(), vec![(0, 1)], NetworkMeta::default()).is_err());
        assert!(NetworkRecord::new(layers, vec![(1, 2), (0, 1)], NetworkMeta::default()).is_err());
    }

    #[test]
    fn residual_gradient_sums_both_paths() {
        // y = relu(2x) + x, dy/dx = 3 for x > 0
        let net = NetworkRecord::new(
            vec![
                LayerRecord::linear(t(&[1, 1], &[2.]), None).with_activation(Activation::Relu),
                LayerRecord::residual_add(0),
            ],
            vec![],
            NetworkMeta::default(),
        )
        .unwrap();
        let g = backward(&net, &t(&[1, 1], &[1.5]), &t(&[1, 1], &[1.])).unwrap();
        assert_eq!(g.input.data(), &[3.]);
        assert_eq!(g.weights[0].as_ref().unwrap().data(), &[1.5]);
    }
}
