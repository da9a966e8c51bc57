//! Learned rounding: per-unit minimization of the reconstruction error over
//! rounding variables, with pluggable loss, mask, domain and bias handling.

mod bias;
mod block;
mod loss;
mod mask;
mod pipeline;

pub use bias::{bias_correct, BiasPerturbation};
pub use block::{optimize_block, BlockSettings, QuantLayer, TracePoint, Unit, UnitGrads, UnitOutcome};
pub use loss::{loss_and_grad, reconstruction_loss, LossKind};
pub use mask::{build_mask, MaskSpec, MaskStrategy};
pub use pipeline::{plan_units, quantize_network, AllocationSummary, QuantReport, UnitReport};

use serde::{Deserialize, Serialize};

use crate::calib::AugmentSpec;
use crate::codec::{soft_round, soft_round_derivative, ChannelGrids, Scheme};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::tensor::Tensor;

/// Rectifier stretch bounds of the unit-domain parameterization.
pub const GAMMA: f64 = -0.1;
pub const ZETA: f64 = 1.1;
/// Unit-domain values this close to one half harden like an exact tie.
const TIE_WINDOW: f64 = 1e-12;

macro_rules! string_enum {
    ($ty:ident, $what:literal, { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }

        impl std::str::FromStr for $ty {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                let lower = s.trim().to_ascii_lowercase();
                $ty::ALL
                    .iter()
                    .copied()
                    .find(|k| k.name() == lower)
                    .ok_or_else(|| $crate::error::Error::Unknown { what: $what, name: s.to_string() })
            }
        }
    };
}
pub(crate) use string_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsDomain {
    /// Offsets in `[0, 1]` above the floor, rectified-sigmoid parameterized.
    Unit,
    /// Unconstrained grid index with soft rounding.
    Real,
}

string_enum!(EpsDomain, "epsilon domain", { Unit => "unit", Real => "real" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Block,
}

string_enum!(Granularity, "granularity", { Layer => "layer", Block => "block" });

/// Which weights [`effective_weight`] produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Differentiable relaxation.
    Train,
    /// Hardened grid members.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptqConfig {
    pub loss: LossKind,
    pub granularity: Granularity,
    pub iterations: usize,
    pub batch_size: usize,
    pub calib_size: usize,
    pub optimizer: OptimizerKind,
    /// Overrides the optimizer's default learning rate.
    pub lr: Option<f64>,
    pub scheme: Scheme,
    pub bits: u32,
    pub act_bits: u32,
    /// Weight and activation width of the first and last parametric layers.
    pub edge_bits: u32,
    pub mixed_precision: bool,
    pub domain: EpsDomain,
    /// Soft-rounding steepness; the scheme default when absent.
    pub beta: Option<f64>,
    pub mask: MaskSpec,
    pub bias_alpha: f64,
    pub bias_correction: bool,
    pub augment: Option<AugmentSpec>,
    pub eval_every: usize,
    /// Trailing share of each unit's calibration samples held out for
    /// checkpoint selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L2,
            granularity: Granularity::Block,
            iterations: 10_000,
            batch_size: 32,
            calib_size: 1024,
            optimizer: OptimizerKind::Adam,
            lr: None,
            scheme: Scheme::Uniform,
            bits: 4,
            act_bits: 4,
            edge_bits: 8,
            mixed_precision: false,
            domain: EpsDomain::Unit,
            beta: None,
            mask: MaskSpec::none(),
            bias_alpha: 0.0,
            bias_correction: true,
            augment: None,
            eval_every: 100,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl GptqConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.scheme.default_beta())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, b) in [("bits", self.bits), ("edge_bits", self.edge_bits)] {
            if !(crate::codec::MIN_BITS..=crate::codec::MAX_BITS).contains(&b) {
                return bad(format!("{name} = {b} outside [2, 8]"));
            }
        }
        if !(2..=16).contains(&self.act_bits) {
            return bad(format!("act_bits = {} outside [2, 16]", self.act_bits));
        }
        if self.batch_size == 0 || self.calib_size == 0 || self.eval_every == 0 {
            return bad("batch_size, calib_size and eval_every must be positive".into());
        }
        if self.calib_size < self.batch_size {
            return bad(format!(
                "calib_size {} is smaller than batch_size {}",
                self.calib_size, self.batch_size
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(self.bias_alpha >= 0.0 && self.bias_alpha.is_finite()) {
            return bad(format!("bias_alpha must be >= 0, got {}", self.bias_alpha));
        }
        if !(self.beta() > 0.0 && self.beta().is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("lr must be positive, got {lr}"));
            }
        }
        if let Scheme::Power(a) = self.scheme {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("power exponent must be positive, got {a}"));
            }
        }
        self.mask.validate()?;
        Ok(())
    }

    /// Every setting as `(key, value)` text, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let pairs: Vec<(&str, String)> = vec![
            ("loss", self.loss.to_string()),
            ("granularity", self.granularity.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("calib_size", self.calib_size.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("lr", opt(self.lr.map(|v| v.to_string()))),
            ("scheme", self.scheme.to_string()),
            ("bits", self.bits.to_string()),
            ("act_bits", self.act_bits.to_string()),
            ("edge_bits", self.edge_bits.to_string()),
            ("mixed_precision", self.mixed_precision.to_string()),
            ("domain", self.domain.to_string()),
            ("beta", opt(self.beta.map(|v| v.to_string()))),
            ("mask", self.mask.to_string()),
            ("bias_alpha", self.bias_alpha.to_string()),
            ("bias_correction", self.bias_correction.to_string()),
            ("augment", opt(self.augment.map(|a| a.to_string()))),
            ("eval_every", self.eval_every.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("seed", self.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Learnable rounding variables of one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonVar {
    pub domain: EpsDomain,
    /// Unconstrained parameters, one per weight.
    pub raw: Vec<f64>,
    /// Unit domain: the grid index each offset is added to.
    base: Vec<f64>,
    pub beta: f64,
    shape: Vec<usize>,
    /// Weights whose initial offset sat on a rectifier bound.
    pub boundary_inits: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stretched sigmoid clipped to `[0, 1]`.
pub fn rectified(raw: f64) -> f64 {
    (sigmoid(raw) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

fn rectified_derivative(raw: f64) -> f64 {
    let s = sigmoid(raw);
    let pre = s * (ZETA - GAMMA) + GAMMA;
    if (0.0..=1.0).contains(&pre) {
        s * (1.0 - s) * (ZETA - GAMMA)
    } else {
        0.0
    }
}

/// Starts every variable at the weight itself: the unit-domain offset equals
/// the fractional grid index, the real-domain parameter is the index.
pub fn init_epsilon(w: &Tensor, grids: &ChannelGrids, domain: EpsDomain, beta: f64) -> EpsilonVar {
    let n = w.len();
    let mut raw = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    let mut boundary_inits = 0;
    for (i, &x) in w.data().iter().enumerate() {
        let grid = grids.of(i);
        let t = grid.to_index(x);
        match domain {
            EpsDomain::Real => raw.push(t),
            EpsDomain::Unit => {
                let fl = t.floor().min((grid.last_index() - 1) as f64);
                let frac = t - fl;
                if frac <= 0.0 || frac >= 1.0 {
                    boundary_inits += 1;
                }
                let p = (frac - GAMMA) / (ZETA - GAMMA);
                raw.push((p / (1.0 - p)).ln());
                base.push(fl);
            }
        }
    }
    EpsilonVar {
        domain,
        raw,
        base,
        beta,
        shape: w.shape().to_vec(),
        boundary_inits,
    }
}

impl EpsilonVar {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Effective unit-domain offsets (`None` in the real domain).
    pub fn offsets(&self) -> Option<Vec<f64>> {
        (self.domain == EpsDomain::Unit).then(|| self.raw.iter().map(|&r| rectified(r)).collect())
    }

    fn hard_index(&self, i: usize, grids: &ChannelGrids) -> usize {
        let grid = grids.of(i);
        match self.domain {
            EpsDomain::Unit => {
                let lo = self.base[i] as usize;
                let h = rectified(self.raw[i]);
                if (h - 0.5).abs() <= TIE_WINDOW {
                    grid.tie_break(lo)
                } else if h > 0.5 {
                    lo + 1
                } else {
                    lo
                }
            }
            EpsDomain::Real => grid.nearest_index(self.raw[i]),
        }
    }

    /// Grid index chosen for every weight after hardening.
    pub fn hard_indices(&self, grids: &ChannelGrids) -> Vec<usize> {
        (0..self.len()).map(|i| self.hard_index(i, grids)).collect()
    }

    /// Continuous dequantized weights before any rounding: equal to the
    /// original weights at initialization.
    pub fn dequantized(&self, grids: &ChannelGrids) -> Tensor {
        let data = (0..self.len())
            .map(|i| {
                let g = grids.of(i);
                match self.domain {
                    EpsDomain::Unit => g.from_index(self.base[i] + rectified(self.raw[i])),
                    EpsDomain::Real => g.from_index(self.raw[i]),
                }
            })
            .collect();
        Tensor::from_parts(self.shape.clone(), data)
    }
}

/// Weights realized by `eps`: the differentiable relaxation in
/// [`Phase::Train`], grid members in [`Phase::Eval`].
pub fn effective_weight(eps: &EpsilonVar, grids: &ChannelGrids, phase: Phase) -> Tensor {
    let data = (0..eps.len())
        .map(|i| {
            let g = grids.of(i);
            match (phase, eps.domain) {
                (Phase::Eval, _) => g.level(eps.hard_index(i, grids)),
                (Phase::Train, EpsDomain::Unit) => g.from_index(eps.base[i] + rectified(eps.raw[i])),
                (Phase::Train, EpsDomain::Real) => g.from_index(soft_round(eps.raw[i], eps.beta)),
            }
        })
        .collect();
    Tensor::from_parts(eps.shape.clone(), data)
}

/// Elementwise derivative of the train-phase weight with respect to `raw`.
pub fn effective_weight_jacobian(eps: &EpsilonVar, grids: &ChannelGrids) -> Vec<f64> {
    (0..eps.len())
        .map(|i| {
            let g = grids.of(i);
            match eps.domain {
                EpsDomain::Unit => {
                    let k = eps.base[i] as usize;
                    (g.level(k + 1) - g.level(k)) * rectified_derivative(eps.raw[i])
                }
                EpsDomain::Real => {
                    let r = eps.raw[i];
                    g.index_slope(soft_round(r, eps.beta)) * soft_round_derivative(r, eps.beta)
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{QuantParams, RoundMode};

    fn grids(w: &Tensor, scheme: Scheme, bits: u32) -> ChannelGrids {
        let (p, _) = QuantParams::for_weights(w, scheme, bits, None).unwrap();
        ChannelGrids::new(&p, w.len())
    }

    fn uniform_unit_scale(w: &Tensor, bits: u32) -> ChannelGrids {
        let p = QuantParams {
            scheme: Scheme::Uniform,
            bits,
            channel_bits: None,
            weight_scales: vec![1.0; w.shape()[0]],
        };
        ChannelGrids::new(&p, w.len())
    }

    #[test]
    fn unit_init_recovers_fraction() {
        let w = Tensor::new(vec![1, 1], vec![2.7]).unwrap();
        let g = uniform_unit_scale(&w, 4);
        let eps = init_epsilon(&w, &g, EpsDomain::Unit, 50.0);
        assert!((eps.offsets().unwrap()[0] - 0.7).abs() < 1e-12);
        assert!((eps.dequantized(&g).data()[0] - 2.7).abs() < 1e-9);
    }

    #[test]
    fn on_grid_weight_has_zero_offset() {
        let w = Tensor::new(vec![1, 2], vec![2.0, -3.0]).unwrap();
        let g = uniform_unit_scale(&w, 4);
        let eps = init_epsilon(&w, &g, EpsDomain::Unit, 50.0);
        let off = eps.offsets().unwrap();
        assert!(off[0].abs() < 1e-12 && off[1].abs() < 1e-12);
        assert_eq!(eps.boundary_inits, 2);
    }

    #[test]
    fn floor_and_ceil_extremes() {
        let w = Tensor::new(vec![1, 3], vec![0.3, -1.6, 2.5]).unwrap();
        let g = uniform_unit_scale(&w, 4);
        let mut eps = init_epsilon(&w, &g, EpsDomain::Unit, 50.0);
        eps.raw.iter_mut().for_each(|r| *r = -20.0);
        assert_eq!(effective_weight(&eps, &g, Phase::Eval).data(), &[0.0, -2.0, 2.0]);
        eps.raw.iter_mut().for_each(|r| *r = 20.0);
        assert_eq!(effective_weight(&eps, &g, Phase::Eval).data(), &[1.0, -1.0, 3.0]);
    }

    #[test]
    fn init_hardening_is_nearest() {
        let w = Tensor::new(vec![2, 4], vec![2.5, -2.5, 0.49, -7.0, 1.5, -0.5, 3.51, 6.9]).unwrap();
        for scheme in [Scheme::Uniform, Scheme::Log, Scheme::Float(None), Scheme::Power(2.0)] {
            let g = grids(&w, scheme.clone(), 4);
            let nearest = g.quantize(&w, RoundMode::Hard);
            for domain in EpsDomain::ALL {
                let eps = init_epsilon(&w, &g, *domain, 50.0);
                assert_eq!(effective_weight(&eps, &g, Phase::Eval), nearest, "{scheme} {domain}");
            }
        }
    }

    #[test]
    fn real_domain_large_beta_is_nearest() {
        let w = Tensor::new(vec![1, 5], vec![0.3, -1.2, 2.2, 0.8, -2.9]).unwrap();
        let g = grids(&w, Scheme::Uniform, 3);
        let eps = init_epsilon(&w, &g, EpsDomain::Real, 1000.0);
        let soft = effective_weight(&eps, &g, Phase::Train);
        let hard = g.quantize(&w, RoundMode::Hard);
        for (a, b) in soft.data().iter().zip(hard.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn unit_offsets_stay_bounded() {
        for r in [-100.0, -3.0, -0.1, 0.0, 0.4, 5.0, 100.0] {
            let h = rectified(r);
            assert!((0.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn config_strings() {
        assert_eq!("REAL".parse::<EpsDomain>().unwrap(), EpsDomain::Real);
        assert!("channel".parse::<Granularity>().is_err());
        let c = GptqConfig::default();
        assert_eq!((c.iterations, c.batch_size, c.calib_size), (10_000, 32, 1024));
        c.validate().unwrap();
        assert_eq!(c.echo().len(), 21);
    }
}
