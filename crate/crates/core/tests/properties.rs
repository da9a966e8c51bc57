use gptq_core::codec::{soft_round, soft_round_derivative};
use gptq_core::intsim::{error_decomposition_dot, requant_for_ratio};
use gptq_core::mixedprec::{allocate_bits, normalize_allocation, SensitivityStats};
use gptq_core::tensor::{backward, network_forward, Activation, NetworkMeta};
use gptq_core::{build_grid, LayerRecord, NetworkRecord, QuantParams, RoundMode, Scheme, Tensor};
use proptest::prelude::*;

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![
        Just(Scheme::Uniform),
        Just(Scheme::Log),
        Just(Scheme::Float(None)),
        (0.3f64..3.0).prop_map(Scheme::Power),
    ]
}

fn params(scheme: Scheme, bits: u32, scale: f64) -> QuantParams {
    QuantParams {
        scheme,
        bits,
        channel_bits: None,
        weight_scales: vec![scale],
    }
}

proptest! {
    #[test]
    fn index_map_round_trips(s in scheme(), bits in 2u32..=8, scale in 0.01f64..10.0, u in -1.0f64..1.0) {
        let bits = if matches!(s, Scheme::Float(_)) { bits.max(3) } else { bits };
        let g = build_grid(&params(s, bits, scale), 0);
        let (lo, hi) = (g.levels()[0], *g.levels().last().unwrap());
        let x = lo + (u + 1.0) / 2.0 * (hi - lo);
        prop_assert!((g.from_index(g.to_index(x)) - x).abs() <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn hard_quantization_is_nearest_level(s in scheme(), bits in 3u32..=8, x in -20.0f64..20.0) {
        let g = build_grid(&params(s, bits, 1.0), 0);
        let q = g.quantize(x, RoundMode::Hard);
        prop_assert!(g.contains(q));
        let best = g.levels().iter().map(|l| (l - x).abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(((q - x).abs() - best).abs() <= 1e-12);
    }

    #[test]
    fn soft_round_is_periodic_and_monotone(k in -50.0f64..50.0, d in 0.0f64..1.0, beta in 0.5f64..200.0) {
        prop_assert!((soft_round(k + 1.0, beta) - soft_round(k, beta) - 1.0).abs() <= 1e-9);
        prop_assert!(soft_round(k + d, beta) >= soft_round(k, beta) - 1e-12);
        prop_assert!(soft_round_derivative(k, beta) >= 0.0);
        let n = k.round();
        prop_assert_eq!(soft_round(n, beta), n);
    }

    #[test]
    fn dot_decomposition_sums_to_total(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..16)) {
        let (w, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let d = error_decomposition_dot(&w, &x);
        let total: f64 = w.iter().zip(&x).map(|(a, b)| a * b - a.floor() * b.floor()).sum();
        prop_assert!((d.sum() - total).abs() <= 1e-9);
        prop_assert!((d.total - total).abs() <= 1e-9);
    }

    #[test]
    fn requant_ratio_is_accurate(ratio in 1e-6f64..1.0) {
        let rq = requant_for_ratio(ratio).unwrap();
        prop_assert!(rq.multiplier < 1 << 31);
        prop_assert!((rq.ratio() - ratio).abs() <= ratio * 2f64.powi(-30));
    }

    #[test]
    fn allocation_monotone_scale_invariant_and_permutation_equivariant(
        g in prop::collection::vec(0.001f64..100.0, 2..40),
        target in 2u32..=8,
        c in 0.01f64..100.0,
        rot in 0usize..40,
    ) {
        let base = normalize_allocation(&allocate_bits(&SensitivityStats::from_values(g.clone()), target).unwrap());
        for i in 0..g.len() {
            for j in 0..g.len() {
                if g[i] > g[j] {
                    prop_assert!(base.bits[i] >= base.bits[j]);
                }
            }
        }
        let scaled = normalize_allocation(
            &allocate_bits(&SensitivityStats::from_values(g.iter().map(|v| v * c).collect()), target).unwrap(),
        );
        prop_assert_eq!(&scaled.bits, &base.bits);
        // a rotation keeps the tie order among equal residues only when
        // residues are distinct, which holds almost surely for random input
        let r = rot % g.len();
        let mut rotated = g.clone();
        rotated.rotate_left(r);
        let perm = normalize_allocation(&allocate_bits(&SensitivityStats::from_values(rotated), target).unwrap());
        let mut expect = base.bits.clone();
        expect.rotate_left(r);
        prop_assert_eq!(perm.bits, expect);
    }
}

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), vals[..shape.iter().product::<usize>()].to_vec()).unwrap()
}

/// Central differences of `<seed, F(x)>` with respect to every weight of
/// layer 0, compared with the reverse pass.
fn check_weight_gradient(net: &NetworkRecord, x: &Tensor, seed: &Tensor) -> Result<(), TestCaseError> {
    let h = 1e-5;
    let g = backward(net, x, seed).unwrap();
    let gw = g.weights[0].clone().unwrap();
    let objective = |n: &NetworkRecord| -> f64 {
        network_forward(n, x).unwrap().data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
    };
    // skip samples that sit near a relu kink
    let pre = network_forward(
        &NetworkRecord::new(
            vec![LayerRecord {
                activation: None,
                ..net.layers()[0].clone()
            }],
            vec![],
            NetworkMeta::default(),
        )
        .unwrap(),
        x,
    )
    .unwrap();
    if pre.data().iter().any(|v| v.abs() < 1e-3) {
        return Ok(());
    }
    for i in 0..gw.len() {
        let mut up = net.clone();
        let mut down = net.clone();
        let mut l = up.layers()[0].clone();
        l.weight.as_mut().unwrap().data_mut()[i] += h;
        up.set_layer(0, l).unwrap();
        let mut l = down.layers()[0].clone();
        l.weight.as_mut().unwrap().data_mut()[i] -= h;
        down.set_layer(0, l).unwrap();
        let numeric = (objective(&up) - objective(&down)) / (2.0 * h);
        let a = gw.data()[i];
        let scale = a.abs().max(numeric.abs()).max(1e-3);
        prop_assert!((a - numeric).abs() / scale < 1e-5, "entry {}: analytic {} numeric {}", i, a, numeric);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_relu_gradients_match_finite_differences(vals in prop::collection::vec(-1.0f64..1.0, 64)) {
        let w = tensor(&[3, 4], &vals);
        let b = tensor(&[3], &vals[12..]);
        let x = tensor(&[2, 4], &vals[20..]);
        let seed = tensor(&[2, 3], &vals[40..]);
        let net = NetworkRecord::new(
            vec![LayerRecord::linear(w, Some(b)).with_activation(Activation::Relu)],
            vec![],
            NetworkMeta::default(),
        )
        .unwrap();
        check_weight_gradient(&net, &x, &seed)?;
    }

    #[test]
    fn conv_gradients_match_finite_differences(vals in prop::collection::vec(-1.0f64..1.0, 120), stride in 1usize..=2) {
        let w = tensor(&[2, 2, 3, 3], &vals);
        let x = tensor(&[1, 2, 4, 4], &vals[36..]);
        let net = NetworkRecord::new(
            vec![LayerRecord::conv2d(w, None, stride, 1)],
            vec![],
            NetworkMeta::default(),
        )
        .unwrap();
        let out = network_forward(&net, &x).unwrap();
        let seed = Tensor::new(out.shape().to_vec(), vals[68..68 + out.len()].to_vec()).unwrap();
        check_weight_gradient(&net, &x, &seed)?;
    }
}
