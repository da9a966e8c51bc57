//! Deterministic inputs for the kernel benchmarks.

use gptq_core::calib::make_dataset;
use gptq_core::codec::ChannelGrids;
use gptq_core::reconstruct::{init_epsilon, QuantLayer, Unit};
use gptq_core::tensor::{Activation, ToyArch};
use gptq_core::{CalibrationSet, DatasetKind, EpsDomain, LayerRecord, NetworkRecord, QuantParams, Scheme, Tensor, WorldSpec};

/// Untrained toy CNN and `n` samples from its image world.
pub fn toy_cnn(n: usize) -> (NetworkRecord, CalibrationSet) {
    let world = WorldSpec::image(8, 0);
    let data = make_dataset(&world, DatasetKind::TrainSplit, n, 0).expect("dataset");
    let net = ToyArch::Cnn.build(&world.input_shape, world.classes, 0).expect("network");
    (net, data)
}

/// Dense tensor with a fixed, cheap pseudo-random fill.
pub fn patterned(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i * 7919 % 1013) as f64 / 1013.0 - 0.5) * 2.0).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// A single linear layer wrapped as an optimization unit.
pub fn linear_unit(inputs: usize, outputs: usize, scheme: Scheme, domain: EpsDomain) -> Unit {
    let w = patterned(&[outputs, inputs]);
    let (params, _) = QuantParams::for_weights(&w, scheme.clone(), 4, None).expect("scales");
    let grids = ChannelGrids::new(&params, w.len());
    let eps = init_epsilon(&w, &grids, domain, scheme.default_beta());
    let mask = vec![true; w.len()];
    let layer = LayerRecord::linear(w, Some(patterned(&[outputs]))).with_activation(Activation::Relu);
    Unit::new(
        0,
        vec![layer],
        vec![Some(QuantLayer {
            params,
            grids,
            eps,
            mask,
            bias: None,
        })],
    )
    .expect("unit")
}
