//! Acceptance suite. Each criterion prints one PASS/FAIL line with the
//! measured quantities, then asserts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gptq_cli::config::{resolve, Defaults, Overrides, Preset};
use gptq_cli::{build_fixture, run_quantize, write_fixture, Factor, Fixture, FixtureSpec};
use gptq_core::codec::{soft_round, FloatLayout};
use gptq_core::intsim::{
    derive_requant, error_decomposition, exhaustive_rounding_oracle, float_simulated_forward, integer_layer_forward,
    offset_candidates, IntTensor,
};
use gptq_core::mixedprec::{allocate_bits, normalize_allocation, trunc_toward_zero, SensitivityStats};
use gptq_core::reconstruct::{init_epsilon, reconstruction_loss, Phase, QuantLayer, Unit};
use gptq_core::tensor::accuracy;
use gptq_core::{
    quantize_network, ChannelGrids, EpsDomain, GptqConfig, LayerRecord, LossKind, QuantParams, RoundMode,
    Scheme, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, ok: bool, elapsed: Duration, limit: Duration, detail: &str) -> bool {
    let within = elapsed <= limit;
    let pass = ok && within;
    println!(
        "criterion {n:>2}: {} ({:.2}s of {:.0}s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn fixture(seed: u64) -> &'static Fixture {
    static CELLS: [OnceLock<Fixture>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    CELLS[seed as usize].get_or_init(|| build_fixture(&FixtureSpec::seeded(seed)).expect("fixture trains"))
}

fn desk() -> GptqConfig {
    resolve(
        Defaults::Desk,
        None,
        None,
        &Overrides {
            model: Some("fixture".into()),
            ..Default::default()
        },
    )
    .unwrap()
    .gptq
}

#[test]
fn criterion_01_oracle_counterexample() {
    let t = Instant::now();
    let (w, x, target) = ([4.1, 3.2], [6.0, 2.0], 33.92);
    let real = exhaustive_rounding_oracle(&w, &x, &offset_candidates(&w, &[-1, 0, 1, 2]), target).unwrap();
    let unit = exhaustive_rounding_oracle(&w, &x, &offset_candidates(&w, &[0, 1]), target).unwrap();
    let ok = real.weights == [5, 2] && real.value == 34.0 && real.offsets == [1, -1] && unit.error > real.error;
    let pass = verdict(
        1,
        ok,
        t.elapsed(),
        Duration::from_secs(1),
        &format!(
            "best {:?} value {} offsets {:?}; unit-domain best {:?} value {} (error {} vs {})",
            real.weights, real.value, real.offsets, unit.weights, unit.value, unit.error, real.error
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_decomposition_identity() {
    let t = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let w: f64 = r.random_range(-100.0..100.0);
        let x: f64 = r.random_range(-100.0..100.0);
        let d = error_decomposition(w, x);
        worst = worst.max((d.sum() - (w * x - w.floor() * x.floor())).abs());
    }
    let pass = verdict(
        2,
        worst <= 1e-12,
        t.elapsed(),
        Duration::from_secs(1),
        &format!("max |terms - (WX - floor(W)floor(X))| = {worst:e} over 10^4 pairs"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_integer_bit_exactness() {
    let t = Instant::now();
    let mut r = rng(3);
    let mut mismatches = 0usize;
    let mut mask_failures = 0usize;
    for _ in 0..100 {
        let (rows, cols, batch) = (r.random_range(1..9), r.random_range(1..17), r.random_range(1..6));
        let s_w = 2f64.powi(-r.random_range(2..8));
        let s_x = 2f64.powi(-r.random_range(0..6));
        let s_y = 2f64.powi(-r.random_range(-2..4));
        // weights pass through the uniform codec at a power-of-two scale
        let real = random_tensor(&mut r, &[rows, cols], 7.0 * s_w);
        let params = QuantParams {
            scheme: Scheme::Uniform,
            bits: 4,
            channel_bits: None,
            weight_scales: vec![s_w; rows],
        };
        let grids = ChannelGrids::new(&params, real.len());
        let hard = grids.quantize(&real, RoundMode::Hard);
        let w = IntTensor::new(rows, cols, hard.data().iter().map(|v| (v / s_w) as i64).collect()).unwrap();
        let x = IntTensor::new(batch, cols, (0..batch * cols).map(|_| r.random_range(-127..=127)).collect()).unwrap();
        let zero = IntTensor::zeros(batch, rows);
        let rq = derive_requant(s_w, s_x, s_y).unwrap();
        let bits = 16;
        let int = integer_layer_forward(&w, &x, rq, &zero, bits).unwrap();
        let sim = float_simulated_forward(&w, &x, s_w, s_x, s_y, &zero, bits).unwrap();
        if int != sim {
            mismatches += 1;
        }
        let at = r.random_range(0..batch * rows);
        let mut m = zero.clone();
        m.data[at] = 1;
        let shifted = integer_layer_forward(&w, &x, rq, &m, bits).unwrap();
        let sim_shifted = float_simulated_forward(&w, &x, s_w, s_x, s_y, &m, bits).unwrap();
        let expect_shift = int.data[at] < (1 << (bits - 1)) - 1;
        let only_that = shifted.data.iter().zip(&int.data).enumerate().all(|(i, (a, b))| {
            if i == at && expect_shift {
                *a == b + 1
            } else {
                a == b
            }
        });
        if !only_that || shifted != sim_shifted {
            mask_failures += 1;
        }
    }
    let pass = verdict(
        3,
        mismatches == 0 && mask_failures == 0,
        t.elapsed(),
        Duration::from_secs(10),
        &format!("100 layers: {mismatches} code mismatches, {mask_failures} mask-shift failures"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_init_identity() {
    let t = Instant::now();
    let mut r = rng(4);
    let schemes = [
        Scheme::Uniform,
        Scheme::Log,
        Scheme::Float(None),
        Scheme::Float(Some(FloatLayout {
            exponent_bits: 2,
            mantissa_bits: 3,
        })),
        Scheme::Power(2.0),
        Scheme::Power(0.5),
    ];
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for scheme in &schemes {
        for domain in [EpsDomain::Unit, EpsDomain::Real] {
            for trial in 0..20 {
                let shape: Vec<usize> = if trial % 2 == 0 {
                    vec![r.random_range(1..9), r.random_range(1..9)]
                } else {
                    vec![r.random_range(1..5), r.random_range(1..4), 3, 3]
                };
                let scale = r.random_range(0.01..3.0);
                let w = random_tensor(&mut r, &shape, scale);
                let bits = match scheme {
                    Scheme::Float(Some(l)) => l.bits(),
                    Scheme::Float(None) => [4, 6, 8][trial % 3],
                    _ => r.random_range(2..=8),
                };
                let channel_bits = (trial % 4 == 3 && !matches!(scheme, Scheme::Float(_)))
                    .then(|| (0..shape[0]).map(|_| r.random_range(2..=8)).collect());
                let (params, _) = QuantParams::for_weights(&w, scheme.clone(), bits, channel_bits).unwrap();
                let grids = ChannelGrids::new(&params, w.len());
                let eps = init_epsilon(&w, &grids, domain, scheme.default_beta());
                let back = eps.dequantized(&grids);
                let err = back.data().iter().zip(w.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let e = worst.entry(format!("{scheme}/{domain}")).or_insert(0.0);
                *e = e.max(err);
            }
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let pass = verdict(
        4,
        max <= 1e-9,
        t.elapsed(),
        Duration::from_secs(5),
        &format!("max |dequantized - W| = {max:e} across {} scheme/domain pairs", worst.len()),
    );
    assert!(pass, "{worst:?}");
}

fn unit_for(layer: LayerRecord, scheme: Scheme, domain: EpsDomain, r: &mut ChaCha8Rng) -> Unit {
    let w = layer.weight.clone().unwrap();
    let (params, _) = QuantParams::for_weights(&w, scheme.clone(), 4, None).unwrap();
    let grids = ChannelGrids::new(&params, w.len());
    let mut eps = init_epsilon(&w, &grids, domain, 5.0);
    // move away from the initial point so every entry carries gradient
    for v in eps.raw.iter_mut() {
        *v += r.random_range(-0.6..0.6);
    }
    let mask = vec![true; w.len()];
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
    .unwrap()
}

fn unit_loss(unit: &Unit, x: &Tensor, target: &Tensor, kind: LossKind) -> f64 {
    let out = unit.run(&unit.materialize(Phase::Train), x).unwrap();
    reconstruction_loss(target, &out, kind)
}

/// Entries sitting on a kink of the weight map are skipped.
fn near_kink(unit: &Unit, i: usize) -> bool {
    let q = unit.quant[0].as_ref().unwrap();
    match q.eps.domain {
        EpsDomain::Unit => {
            let v = q.eps.offsets().unwrap()[i];
            v <= 1e-4 || v >= 1.0 - 1e-4
        }
        EpsDomain::Real => {
            let raw = q.eps.raw[i];
            (raw - raw.round()).abs() < 1e-4
        }
    }
}

#[test]
fn criterion_05_gradient_check() {
    let t = Instant::now();
    let mut r = rng(5);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for trial in 0..4 {
        for scheme in [Scheme::Uniform, Scheme::Log] {
            for domain in [EpsDomain::Unit, EpsDomain::Real] {
                for kind in LossKind::ALL.iter().copied() {
                    let (layer, x) = if trial % 2 == 0 {
                        let w = random_tensor(&mut r, &[4, 6], 1.0);
                        let b = random_tensor(&mut r, &[4], 0.5);
                        (LayerRecord::linear(w, Some(b)), random_tensor(&mut r, &[5, 6], 2.0))
                    } else {
                        let w = random_tensor(&mut r, &[3, 2, 3, 3], 1.0);
                        (LayerRecord::conv2d(w, None, 1, 1), random_tensor(&mut r, &[2, 2, 4, 4], 2.0))
                    };
                    let mut unit = unit_for(layer, scheme.clone(), domain, &mut r);
                    let out = unit.run(&unit.materialize(Phase::Train), &x).unwrap();
                    let noise = random_tensor(&mut r, out.shape(), 0.5);
                    let target = out.zip_map(&noise, |a, b| a + b);
                    let analytic = unit.loss_and_grads(&x, &target, kind).unwrap().eps[0].clone();
                    for (i, &a) in analytic.iter().enumerate() {
                        if near_kink(&unit, i) {
                            skipped += 1;
                            continue;
                        }
                        let q = unit.quant[0].as_mut().unwrap();
                        let orig = q.eps.raw[i];
                        q.eps.raw[i] = orig + h;
                        let up = unit_loss(&unit, &x, &target, kind);
                        unit.quant[0].as_mut().unwrap().eps.raw[i] = orig - h;
                        let down = unit_loss(&unit, &x, &target, kind);
                        unit.quant[0].as_mut().unwrap().eps.raw[i] = orig;
                        let numeric = (up - down) / (2.0 * h);
                        let scale = a.abs().max(numeric.abs());
                        if scale < 1e-8 {
                            skipped += 1;
                            continue;
                        }
                        let rel = (a - numeric).abs() / scale;
                        worst = worst.max(rel);
                        checked += 1;
                    }
                }
            }
        }
    }
    let pass = verdict(
        5,
        worst < 1e-4 && checked > 500,
        t.elapsed(),
        Duration::from_secs(30),
        &format!("max relative error {worst:e} over {checked} entries ({skipped} on kinks or flat)"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_non_regression() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    let mut units_ok = true;
    let mut fp_ok = true;
    for seed in 0..3u64 {
        let f = fixture(seed);
        fp_ok &= f.test_accuracy >= 0.9;
        let cfg = GptqConfig { seed, ..desk() };
        let nearest_cfg = GptqConfig { iterations: 0, ..cfg.clone() };
        let (q, rep) = quantize_network(&f.net, &f.train, &cfg).unwrap();
        let (n, _) = quantize_network(&f.net, &f.train, &nearest_cfg).unwrap();
        for u in &rep.units {
            units_ok &= u.final_l2 <= u.nearest_l2;
        }
        let (qa, na) = (accuracy(&q, &f.test).unwrap(), accuracy(&n, &f.test).unwrap());
        if qa >= na {
            wins += 1;
        }
        let per_unit: Vec<String> = rep
            .units
            .iter()
            .map(|u| format!("{:.4}<={:.4}{}", u.final_l2, u.nearest_l2, if u.fallback { "*" } else { "" }))
            .collect();
        lines.push(format!(
            "seed {seed}: fp {:.4}, W4/A4 gptq {qa:.4} vs nearest {na:.4}, units [{}]",
            f.test_accuracy,
            per_unit.join(" ")
        ));
    }
    let pass = verdict(
        6,
        fp_ok && units_ok && wins >= 2,
        t.elapsed(),
        Duration::from_secs(600),
        &format!("gptq >= nearest on {wins}/3 seeds; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_07_domain_separation_on_log_grid() {
    let t = Instant::now();
    let f = fixture(0);
    let base = GptqConfig {
        scheme: Scheme::Log,
        ..desk()
    };
    let (_, unit) = quantize_network(&f.net, &f.train, &GptqConfig { domain: EpsDomain::Unit, ..base.clone() }).unwrap();
    let (_, real) = quantize_network(&f.net, &f.train, &GptqConfig { domain: EpsDomain::Real, ..base }).unwrap();
    let mut all_le = true;
    let mut strict = 0;
    let mut cells = Vec::new();
    for (u, r) in unit.units.iter().zip(&real.units) {
        all_le &= r.final_l2 <= u.final_l2;
        if r.final_l2 < u.final_l2 {
            strict += 1;
        }
        cells.push(format!("[{},{}) real {:.4} unit {:.4}", r.start, r.end, r.final_l2, u.final_l2));
    }
    let pass = verdict(
        7,
        all_le && strict >= 1,
        t.elapsed(),
        Duration::from_secs(600),
        &format!("strictly lower on {strict} units; {}", cells.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_08_allocator() {
    let t = Instant::now();
    let cases_ok = trunc_toward_zero(0.9) == 0 && trunc_toward_zero(-0.9) == 0 && trunc_toward_zero(2.1) == 2;
    let mut r = rng(8);
    let (mut exact_checked, mut exact_fail, mut mono_fail, mut scale_fail) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let n = r.random_range(3..60);
        let spread: f64 = r.random_range(0.05..3.0);
        let g: Vec<f64> = (0..n).map(|_| (r.random_range(-1.0..1.0) * spread).exp()).collect();
        let target = r.random_range(3..=6);
        let stats = SensitivityStats::from_values(g.clone());
        let raw = allocate_bits(&stats, target).unwrap();
        let norm = normalize_allocation(&raw);
        if !raw.saturated.iter().any(|&s| s) {
            exact_checked += 1;
            if !(norm.feasible && norm.total() == target as i64 * n as i64) {
                exact_fail += 1;
            }
        }
        for a in [&raw, &norm] {
            for i in 0..n {
                for j in 0..n {
                    if g[i] > g[j] && a.bits[i] < a.bits[j] {
                        mono_fail += 1;
                    }
                }
            }
        }
        let c: f64 = r.random_range(0.01..100.0);
        let scaled = SensitivityStats::from_values(g.iter().map(|v| v * c).collect());
        let sraw = allocate_bits(&scaled, target).unwrap();
        if sraw.bits != raw.bits || normalize_allocation(&sraw).bits != norm.bits {
            scale_fail += 1;
        }
    }
    let pass = verdict(
        8,
        cases_ok && exact_fail == 0 && exact_checked > 100 && mono_fail == 0 && scale_fail == 0,
        t.elapsed(),
        Duration::from_secs(5),
        &format!(
            "trunc cases {cases_ok}; exact average failed {exact_fail}/{exact_checked} unsaturated vectors; \
             monotonicity violations {mono_fail}; scale-invariance failures {scale_fail}"
        ),
    );
    assert!(pass);
}

fn dir_bytes(dir: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            if skip.contains(&rel.as_str()) {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn fixture_on_disk(tmp: &Path) -> std::path::PathBuf {
    let dir = tmp.join("fixture");
    write_fixture(fixture(0), &dir).unwrap();
    dir
}

#[test]
fn criterion_09_zero_alpha_is_a_no_op() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixture_on_disk(tmp.path());
    let base = resolve(
        Defaults::Desk,
        None,
        None,
        &Overrides {
            model: Some(fx.join("model")),
            calib: Some(fx.join("train")),
            eval: Some(fx.join("test")),
            iterations: Some(500),
            ..Default::default()
        },
    )
    .unwrap();
    let baseline = tmp.path().join("baseline");
    run_quantize(&base, &baseline).unwrap();
    let mut results = Vec::new();
    for level in ["0", "0.33"] {
        let cfg = gptq_cli::run::level_config(&base, Factor::BiasAlpha, level, base.gptq.seed).unwrap();
        let out = tmp.path().join(format!("alpha{level}"));
        run_quantize(&cfg, &out).unwrap();
        results.push(dir_bytes(&out.join("model"), &[]) == dir_bytes(&baseline.join("model"), &[]));
    }
    let pass = verdict(
        9,
        results[0],
        t.elapsed(),
        Duration::from_secs(60),
        &format!(
            "alpha = 0 model identical to baseline: {}; alpha = 0.33 identical: {}",
            results[0], results[1]
        ),
    );
    assert!(pass);
    assert!(!results[1], "a positive alpha must change the model");
}

#[test]
fn criterion_10_determinism() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixture_on_disk(tmp.path());
    let cfg = resolve(
        Defaults::Desk,
        Some(Preset::BestPractice),
        None,
        &Overrides {
            model: Some(fx.join("model")),
            calib: Some(fx.join("train")),
            eval: Some(fx.join("test")),
            ..Default::default()
        },
    )
    .unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let ra = run_quantize(&cfg, &a).unwrap();
    run_quantize(&cfg, &b).unwrap();
    // replay from the echoed configuration alone
    let replay = resolve(Defaults::Full, None, Some(&a.join("config.toml")), &Overrides::default()).unwrap();
    run_quantize(&replay, &c).unwrap();
    let skip = ["timing.csv"];
    let (da, db, dc) = (dir_bytes(&a, &skip), dir_bytes(&b, &skip), dir_bytes(&c, &skip));
    let mean_bits = ra.report.allocation.as_ref().map(|x| (x.allocation.mean(), x.allocation.target));
    let ok = da == db && da == dc && da.len() >= 5 && mean_bits.is_some_and(|(m, b)| m == b as f64);
    let pass = verdict(
        10,
        ok,
        t.elapsed(),
        Duration::from_secs(600),
        &format!(
            "{} files compared; repeat identical {}; replay identical {}; mean bits {:?}",
            da.len(),
            da == db,
            da == dc,
            mean_bits
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_soft_round_convergence() {
    let t = Instant::now();
    let beta = 1000.0;
    let mut sup = 0.0f64;
    let mut at = 0.0;
    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for i in -3000..=3000 {
        let k = i as f64 * 1e-3;
        let s = soft_round(k, beta);
        monotone &= s >= prev;
        prev = s;
        let half = k.floor() + 0.5;
        if (k - half).abs() <= 1e-3 + 1e-12 {
            continue;
        }
        let hard = k.round();
        let gap = (s - hard).abs();
        if gap > sup {
            sup = gap;
            at = k;
        }
    }
    let pass = verdict(
        11,
        sup < 1e-3 && monotone,
        t.elapsed(),
        Duration::from_secs(1),
        &format!("sup gap {sup:e} at k = {at}; monotone {monotone}"),
    );
    assert!(pass);
}
