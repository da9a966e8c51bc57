//! Weight codecs behind a continuous grid-index coordinate.
//!
//! Every scheme materializes a per-channel [`Grid`] of representable levels.
//! [`Grid::to_index`] maps a real value to a piecewise-linear index so that
//! hard rounding, learned rounding offsets and soft rounding all operate in
//! the same coordinate regardless of how the levels are spaced.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Sign / exponent / mantissa split of a minifloat code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatLayout {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
}

impl FloatLayout {
    /// Default split for a total width: E2M1 at 4 bits, E4M3 at 8 bits.
    pub fn for_bits(bits: u32) -> Self {
        let exponent_bits = bits / 2;
        Self {
            exponent_bits,
            mantissa_bits: bits - 1 - exponent_bits,
        }
    }

    pub fn bits(&self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    /// All finite magnitudes of the layout (IEEE-style bias, subnormals,
    /// all-ones exponent treated as an ordinary binade), sorted and deduplicated.
    fn magnitudes(&self) -> Vec<f64> {
        let bias = (1i32 << (self.exponent_bits - 1)) - 1;
        let m_count = 1u32 << self.mantissa_bits;
        let mut out = Vec::new();
        for e in 0..(1u32 << self.exponent_bits) {
            for m in 0..m_count {
                let frac = m as f64 / m_count as f64;
                let v = if e == 0 {
                    frac * 2f64.powi(1 - bias)
                } else {
                    (1.0 + frac) * 2f64.powi(e as i32 - bias)
                };
                out.push(v);
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    pub fn max_value(&self) -> f64 {
        *self.magnitudes().last().expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    Uniform,
    Log,
    /// `None` derives the layout from the bit-width.
    Float(Option<FloatLayout>),
    Power(f64),
}

impl Scheme {
    pub const DEFAULT_POWER_EXPONENT: f64 = 2.0;

    /// Soft-rounding steepness used when none is configured.
    pub fn default_beta(&self) -> f64 {
        match self {
            Scheme::Power(_) => 20.0,
            Scheme::Float(_) => 30.0,
            Scheme::Log | Scheme::Uniform => 50.0,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Scheme::Uniform)
    }

    fn float_layout(&self, bits: u32) -> Option<FloatLayout> {
        match self {
            Scheme::Float(Some(l)) => Some(*l),
            Scheme::Float(None) => Some(FloatLayout::for_bits(bits)),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Uniform => write!(f, "uniform"),
            Scheme::Log => write!(f, "log"),
            Scheme::Float(None) => write!(f, "float"),
            Scheme::Float(Some(l)) => write!(f, "float:e{}m{}", l.exponent_bits, l.mantissa_bits),
            Scheme::Power(a) if *a == Self::DEFAULT_POWER_EXPONENT => write!(f, "power"),
            Scheme::Power(a) => write!(f, "power:{a}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let bad = || Error::Unknown {
            what: "scheme",
            name: s.to_string(),
        };
        match (name, arg) {
            ("uniform", None) => Ok(Scheme::Uniform),
            ("log", None) => Ok(Scheme::Log),
            ("float", None) => Ok(Scheme::Float(None)),
            ("float", Some(layout)) => {
                let rest = layout.strip_prefix('e').ok_or_else(bad)?;
                let (e, m) = rest.split_once('m').ok_or_else(bad)?;
                let exponent_bits: u32 = e.parse().map_err(|_| bad())?;
                let mantissa_bits: u32 = m.parse().map_err(|_| bad())?;
                if exponent_bits == 0 {
                    return Err(Error::Config("float layout needs at least one exponent bit".into()));
                }
                Ok(Scheme::Float(Some(FloatLayout {
                    exponent_bits,
                    mantissa_bits,
                })))
            }
            ("power", None) => Ok(Scheme::Power(Self::DEFAULT_POWER_EXPONENT)),
            ("power", Some(a)) => {
                let a: f64 = a.parse().map_err(|_| bad())?;
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::Config(format!("power exponent must be positive, got {a}")));
                }
                Ok(Scheme::Power(a))
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

/// Codec parameters of one weight tensor; channels are the leading axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: Scheme,
    pub bits: u32,
    /// Per-channel widths under mixed precision; overrides `bits`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_bits: Option<Vec<u32>>,
    pub weight_scales: Vec<f64>,
}

/// Scales from [`compute_scales`] plus the channels that hit the all-zero
/// fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReport {
    pub scales: Vec<f64>,
    pub zero_channels: Vec<usize>,
}

/// Symmetric max-abs scale per output channel.
pub fn compute_scales(w: &Tensor, scheme: &Scheme, channel_bits: &[u32]) -> Result<ScaleReport> {
    let channels = w.shape()[0];
    if channel_bits.len() != channels {
        return Err(Error::Config(format!(
            "{} bit-widths for {channels} channels",
            channel_bits.len()
        )));
    }
    let per = w.len() / channels;
    let mut scales = Vec::with_capacity(channels);
    let mut zero_channels = Vec::new();
    for (c, chunk) in w.data().chunks(per).enumerate() {
        let bits = channel_bits[c];
        check_bits(bits)?;
        let maxabs = chunk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if maxabs == 0.0 {
            zero_channels.push(c);
            scales.push(1.0);
            continue;
        }
        let top = match scheme {
            Scheme::Uniform | Scheme::Power(_) => max_code(bits) as f64,
            Scheme::Log => 1.0,
            Scheme::Float(_) => scheme.float_layout(bits).expect("float").max_value(),
        };
        scales.push(maxabs / top);
    }
    Ok(ScaleReport { scales, zero_channels })
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")))
    }
}

pub(crate) fn max_code(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

impl QuantParams {
    /// Scales for `w` at a single width (`channel_bits = None`) or per channel.
    pub fn for_weights(
        w: &Tensor,
        scheme: Scheme,
        bits: u32,
        channel_bits: Option<Vec<u32>>,
    ) -> Result<(Self, ScaleReport)> {
        let widths = channel_bits.clone().unwrap_or_else(|| vec![bits; w.shape()[0]]);
        let report = compute_scales(w, &scheme, &widths)?;
        let params = Self {
            scheme,
            bits,
            channel_bits,
            weight_scales: report.scales.clone(),
        };
        params.validate_for(w.shape()[0])?;
        Ok((params, report))
    }

    pub fn channels(&self) -> usize {
        self.weight_scales.len()
    }

    pub fn bits_of(&self, channel: usize) -> u32 {
        self.channel_bits.as_ref().map_or(self.bits, |b| b[channel])
    }

    pub fn validate_for(&self, channels: usize) -> Result<()> {
        check_bits(self.bits)?;
        if self.weight_scales.len() != channels {
            return Err(Error::Config(format!(
                "{} scales for {channels} channels",
                self.weight_scales.len()
            )));
        }
        if let Some(cb) = &self.channel_bits {
            if cb.len() != channels {
                return Err(Error::Config(format!("{} bit-widths for {channels} channels", cb.len())));
            }
            cb.iter().try_for_each(|&b| check_bits(b))?;
        }
        if let Some(s) = self.weight_scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("weight scale {s} is not strictly positive")));
        }
        if let Scheme::Float(Some(layout)) = &self.scheme {
            for c in 0..channels {
                if layout.bits() != self.bits_of(c) {
                    return Err(Error::Config(format!(
                        "float layout e{}m{} needs {} bits, channel {c} has {}",
                        layout.exponent_bits,
                        layout.mantissa_bits,
                        layout.bits(),
                        self.bits_of(c)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Representable levels of one channel at one bit-width, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    levels: Vec<f64>,
}

/// Hard nearest rounding or tanh soft rounding with steepness `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoundMode {
    Hard,
    Soft(f64),
}

impl Grid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Config("a grid needs at least two levels".into()));
        }
        if levels.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::Config("grid levels must be strictly increasing".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn last_index(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn contains(&self, x: f64) -> bool {
        self.levels.binary_search_by(|l| l.total_cmp(&x)).is_ok()
    }

    /// Piecewise-linear coordinate: `levels[k] -> k`, clamped to
    /// `[0, len - 1]` outside the grid.
    pub fn to_index(&self, x: f64) -> f64 {
        let l = &self.levels;
        if x <= l[0] {
            return 0.0;
        }
        if x >= l[l.len() - 1] {
            return (l.len() - 1) as f64;
        }
        // first level strictly greater than x
        let hi = l.partition_point(|&v| v <= x);
        let k = hi - 1;
        k as f64 + (x - l[k]) / (l[hi] - l[k])
    }

    /// Inverse of [`Grid::to_index`]; integer arguments return the level itself.
    pub fn from_index(&self, t: f64) -> f64 {
        let last = self.last_index();
        if t <= 0.0 {
            return self.levels[0];
        }
        if t >= last as f64 {
            return self.levels[last];
        }
        let k = t.floor() as usize;
        let frac = t - k as f64;
        if frac == 0.0 {
            self.levels[k]
        } else {
            self.levels[k] + frac * (self.levels[k + 1] - self.levels[k])
        }
    }

    /// Derivative of [`Grid::from_index`] at `t` (right derivative at nodes,
    /// zero outside the grid).
    pub fn index_slope(&self, t: f64) -> f64 {
        let last = self.last_index();
        if t < 0.0 || t > last as f64 {
            return 0.0;
        }
        let k = (t.floor() as usize).min(last - 1);
        self.levels[k + 1] - self.levels[k]
    }

    /// Nearest integer index. Exact half-way ties go to the neighbour with
    /// the larger magnitude (round half away from zero in value space).
    pub fn nearest_index(&self, t: f64) -> usize {
        let last = self.last_index();
        let t = t.clamp(0.0, last as f64);
        let lo = t.floor();
        let frac = t - lo;
        let lo = lo as usize;
        if lo >= last {
            return last;
        }
        if frac < 0.5 {
            lo
        } else if frac > 0.5 {
            lo + 1
        } else {
            self.tie_break(lo)
        }
    }

    /// Which of `lo`, `lo + 1` a half-way value rounds to.
    pub(crate) fn tie_break(&self, lo: usize) -> usize {
        if self.levels[lo].abs() > self.levels[lo + 1].abs() {
            lo
        } else {
            lo + 1
        }
    }

    pub fn level(&self, k: usize) -> f64 {
        self.levels[k.min(self.last_index())]
    }

    pub fn quantize(&self, x: f64, mode: RoundMode) -> f64 {
        let t = self.to_index(x);
        match mode {
            RoundMode::Hard => self.levels[self.nearest_index(t)],
            RoundMode::Soft(beta) => self.from_index(soft_round(t, beta)),
        }
    }
}

/// Level set of `channel` under `params`.
pub fn build_grid(params: &QuantParams, channel: usize) -> Grid {
    let bits = params.bits_of(channel);
    let s = params.weight_scales[channel];
    let k = max_code(bits);
    let mut levels: Vec<f64> = match &params.scheme {
        Scheme::Uniform => (-k..=k).map(|i| i as f64 * s).collect(),
        Scheme::Log => {
            let mut pos: Vec<f64> = (0..k).map(|e| s * 2f64.powi(-(e as i32))).collect();
            pos.reverse();
            mirror(&pos)
        }
        Scheme::Float(_) => {
            let mags = params.scheme.float_layout(bits).expect("float").magnitudes();
            let pos: Vec<f64> = mags.into_iter().filter(|&m| m > 0.0).map(|m| m * s).collect();
            mirror(&pos)
        }
        Scheme::Power(a) => {
            let kf = k as f64;
            (-k..=k)
                .map(|i| {
                    let mag = s * kf * (i.unsigned_abs() as f64 / kf).powf(*a);
                    if i < 0 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect()
        }
    };
    levels.dedup();
    Grid::new(levels).expect("scheme levels are strictly increasing")
}

/// `{-p_n, ..., -p_1, 0, p_1, ..., p_n}` from ascending positive levels.
fn mirror(pos: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = pos.iter().rev().map(|p| -p).collect();
    v.push(0.0);
    v.extend_from_slice(pos);
    v
}

/// One grid per output channel of a weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrids {
    grids: Vec<Grid>,
    per_channel: usize,
}

impl ChannelGrids {
    pub fn new(params: &QuantParams, weight_len: usize) -> Self {
        let grids: Vec<Grid> = (0..params.channels()).map(|c| build_grid(params, c)).collect();
        Self {
            per_channel: weight_len / grids.len(),
            grids,
        }
    }

    pub fn from_grids(grids: Vec<Grid>, weight_len: usize) -> Self {
        Self {
            per_channel: weight_len / grids.len(),
            grids,
        }
    }

    /// Grid governing flat weight index `i`.
    #[inline]
    pub fn of(&self, i: usize) -> &Grid {
        &self.grids[i / self.per_channel]
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn quantize(&self, w: &Tensor, mode: RoundMode) -> Tensor {
        let data = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| self.of(i).quantize(x, mode))
            .collect();
        Tensor::from_parts(w.shape().to_vec(), data)
    }
}

/// Textual level dump, one real per line, channels introduced by a comment.
pub fn dump_grids(params: &QuantParams) -> String {
    let mut out = String::new();
    for c in 0..params.channels() {
        out.push_str(&format!("# channel {c} bits {}\n", params.bits_of(c)));
        for l in build_grid(params, c).levels() {
            out.push_str(&format!("{l:e}\n"));
        }
    }
    out
}

/// `floor(k) + (1 + tanh(beta (frac(k) - 1/2)) / tanh(beta / 2)) / 2`.
///
/// Exact at integers and half-integers, strictly increasing, and tends to
/// round-half-up as `beta` grows.
pub fn soft_round(k: f64, beta: f64) -> f64 {
    let fl = k.floor();
    let frac = k - fl;
    fl + 0.5 * (1.0 + (beta * (frac - 0.5)).tanh() / (beta * 0.5).tanh())
}

pub fn soft_round_derivative(k: f64, beta: f64) -> f64 {
    let frac = k - k.floor();
    let th = (beta * (frac - 0.5)).tanh();
    0.5 * beta * (1.0 - th * th) / (beta * 0.5).tanh()
}
