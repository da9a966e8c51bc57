//! Calibration sets drawn from a seeded toy world, plus feature augmentations.
//!
//! Every sample is a pure function of `(world, kind, seed, index)`, so sets
//! can be regenerated or extended without storing them.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stream offset separating test-split indices from train-split ones.
const TEST_STREAM: u64 = 1 << 40;
const PROTOTYPE_STREAM: u64 = 1 << 50;
/// Default shift magnitude of [`DatasetKind::Shifted`].
pub const DEFAULT_SHIFT: f64 = 0.5;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian-mixture classification world: one smooth prototype per class
/// plus isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Per-sample shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub noise: f64,
}

impl WorldSpec {
    pub fn image(classes: usize, seed: u64) -> Self {
        Self {
            input_shape: vec![1, 8, 8],
            classes,
            seed,
            noise: 0.8,
        }
    }

    pub fn vector(features: usize, classes: usize, seed: u64) -> Self {
        Self {
            input_shape: vec![features],
            classes,
            seed,
            noise: 0.6,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok_shape = matches!(self.input_shape.len(), 1 | 3) && self.input_shape.iter().all(|&d| d > 0);
        if !ok_shape {
            return Err(Error::Dataset(format!(
                "input shape must be [features] or [c, h, w], got {:?}",
                self.input_shape
            )));
        }
        if self.classes < 2 {
            return Err(Error::Dataset("a classification world needs at least 2 classes".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Dataset(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Class prototype: random Gaussian bumps for images, a standard normal
    /// draw for feature vectors.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, PROTOTYPE_STREAM + class as u64);
        match self.input_shape[..] {
            [c, h, w] => {
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for _ in 0..3 {
                        let cy = rng.random_range(0.0..h as f64);
                        let cx = rng.random_range(0.0..w as f64);
                        let width = rng.random_range(1.0..2.5);
                        let amp = rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                        for y in 0..h {
                            for x in 0..w {
                                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                out[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * width * width)).exp();
                            }
                        }
                    }
                }
                out
            }
            _ => (0..self.sample_len()).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    /// Symmetric range covering prototypes plus three noise deviations.
    pub fn input_range(&self) -> f64 {
        let peak = (0..self.classes)
            .flat_map(|c| self.prototype(c))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        peak + 3.0 * self.noise
    }
}

/// Provenance of a calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TrainSplit,
    TestSplit,
    Shifted,
    CrossDomain,
    WhiteNoise,
    /// User-supplied data loaded from disk.
    External,
}

impl DatasetKind {
    pub const GENERATED: [DatasetKind; 5] = [
        DatasetKind::TrainSplit,
        DatasetKind::TestSplit,
        DatasetKind::Shifted,
        DatasetKind::CrossDomain,
        DatasetKind::WhiteNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TrainSplit => "train_split",
            DatasetKind::TestSplit => "test_split",
            DatasetKind::Shifted => "shifted",
            DatasetKind::CrossDomain => "cross_domain",
            DatasetKind::WhiteNoise => "white_noise",
            DatasetKind::External => "external",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        let kind = match s.as_str() {
            "train" | "train_split" => DatasetKind::TrainSplit,
            "test" | "test_split" => DatasetKind::TestSplit,
            "shifted" => DatasetKind::Shifted,
            "cross_domain" => DatasetKind::CrossDomain,
            "white_noise" | "noise" => DatasetKind::WhiteNoise,
            "external" => DatasetKind::External,
            _ => {
                return Err(Error::Unknown {
                    what: "dataset kind",
                    name: s,
                })
            }
        };
        Ok(kind)
    }
}

/// A batch of inputs stacked along the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub kind: DatasetKind,
    pub seed: u64,
    pub world: Option<WorldSpec>,
}

impl CalibrationSet {
    pub fn new(
        inputs: Tensor,
        labels: Option<Vec<usize>>,
        kind: DatasetKind,
        seed: u64,
        world: Option<WorldSpec>,
    ) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::Dataset(format!(
                "inputs need a batch axis, got shape {:?}",
                inputs.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.batch() {
                return Err(Error::Dataset(format!(
                    "{} labels for {} samples",
                    l.len(),
                    inputs.batch()
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            kind,
            seed,
            world,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> CalibrationSet {
        let n = n.min(self.len());
        CalibrationSet {
            inputs: self.inputs.slice_rows(0, n),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            kind: self.kind,
            seed: self.seed,
            world: self.world.clone(),
        }
    }
}

/// `n` samples of `kind`; shifted sets use [`DEFAULT_SHIFT`].
pub fn make_dataset(world: &WorldSpec, kind: DatasetKind, n: usize, seed: u64) -> Result<CalibrationSet> {
    make_dataset_with_shift(world, kind, n, seed, DEFAULT_SHIFT)
}

/// Like [`make_dataset`] with an explicit shift magnitude: shifted samples are
/// train-split draws under `x -> (1 + shift) x + shift / 2`.
pub fn make_dataset_with_shift(
    world: &WorldSpec,
    kind: DatasetKind,
    n: usize,
    seed: u64,
    shift: f64,
) -> Result<CalibrationSet> {
    world.validate()?;
    if n < 1 {
        return Err(Error::Dataset("a dataset needs at least one sample".into()));
    }
    let len = world.sample_len();
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    let labelled = matches!(kind, DatasetKind::TrainSplit | DatasetKind::TestSplit | DatasetKind::Shifted);
    match kind {
        DatasetKind::TrainSplit | DatasetKind::TestSplit | DatasetKind::Shifted => {
            let protos: Vec<Vec<f64>> = (0..world.classes).map(|c| world.prototype(c)).collect();
            let base = if kind == DatasetKind::TestSplit { TEST_STREAM } else { 0 };
            for i in 0..n {
                let label = i % world.classes;
                let mut rng = stream_rng(seed, base + i as u64);
                for &p in &protos[label] {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = p + world.noise * z;
                    data.push(if kind == DatasetKind::Shifted {
                        (1.0 + shift) * v + 0.5 * shift
                    } else {
                        v
                    });
                }
                labels.push(label);
            }
        }
        DatasetKind::CrossDomain => {
            let amp = world.input_range() / 2.0;
            for i in 0..n {
                let mut rng = stream_rng(seed, i as u64);
                data.extend(stripes(&world.input_shape, amp, &mut rng));
            }
        }
        DatasetKind::WhiteNoise => {
            let r = world.input_range();
            for i in 0..n {
                let mut rng = stream_rng(seed, i as u64);
                data.extend((0..len).map(|_| rng.random_range(-r..=r)));
            }
        }
        DatasetKind::External => {
            return Err(Error::Dataset("external sets are loaded, not generated".into()));
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&world.input_shape);
    CalibrationSet::new(
        Tensor::new(shape, data)?,
        labelled.then_some(labels),
        kind,
        seed,
        Some(world.clone()),
    )
}

/// Oriented sinusoidal stripes with random frequency and phase.
fn stripes(shape: &[usize], amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(0.3..1.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    match shape {
        [c, h, w] => {
            let mut out = Vec::with_capacity(c * h * w);
            for _ in 0..*c {
                for y in 0..*h {
                    for x in 0..*w {
                        out.push(amp * (freq * (y as f64 * dy + x as f64 * dx) + phase).sin());
                    }
                }
            }
            out
        }
        _ => {
            let len: usize = shape.iter().product();
            (0..len).map(|k| amp * (freq * k as f64 + phase).sin()).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Dropout,
    Mixup,
    Cutout,
    Noise,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [AugmentKind::Dropout, AugmentKind::Mixup, AugmentKind::Cutout, AugmentKind::Noise];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Dropout => "dropout",
            AugmentKind::Mixup => "mixup",
            AugmentKind::Cutout => "cutout",
            AugmentKind::Noise => "noise",
        }
    }

    pub fn default_magnitude(self) -> f64 {
        match self {
            AugmentKind::Dropout => 0.1,
            AugmentKind::Mixup => 0.4,
            AugmentKind::Cutout => 0.25,
            AugmentKind::Noise => 0.05,
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Unknown {
                what: "augmentation",
                name: s.to_string(),
            })
    }
}

/// An augmentation and its magnitude, written `kind` or `kind:magnitude`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub magnitude: f64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind) -> Self {
        Self {
            kind,
            magnitude: kind.default_magnitude(),
        }
    }
}

impl fmt::Display for AugmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.magnitude)
    }
}

impl FromStr for AugmentSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (k, m) = match s.split_once(':') {
            Some((k, m)) => (k, Some(m)),
            None => (s, None),
        };
        let kind: AugmentKind = k.parse()?;
        let magnitude = match m {
            Some(m) => m
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad augmentation magnitude `{m}`")))?,
            None => kind.default_magnitude(),
        };
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::Config(format!("augmentation magnitude must be >= 0, got {magnitude}")));
        }
        Ok(Self { kind, magnitude })
    }
}

impl TryFrom<String> for AugmentSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AugmentSpec> for String {
    fn from(a: AugmentSpec) -> String {
        a.to_string()
    }
}

/// Applies one augmentation to a batch `x` (leading axis = samples).
pub fn augment_features<R: Rng + ?Sized>(x: &Tensor, spec: AugmentSpec, rng: &mut R) -> Result<Tensor> {
    let m = spec.magnitude;
    if !(m >= 0.0 && m.is_finite()) {
        return Err(Error::Config(format!("augmentation magnitude must be >= 0, got {m}")));
    }
    if spec.kind == AugmentKind::Dropout && m >= 1.0 {
        return Err(Error::Config(format!("dropout rate must be below 1, got {m}")));
    }
    if m == 0.0 {
        return Ok(x.clone());
    }
    let n = x.batch();
    let len = x.sample_len();
    let mut out = x.clone();
    match spec.kind {
        AugmentKind::Dropout => {
            let keep = 1.0 - m;
            for v in out.data_mut() {
                *v = if rng.random::<f64>() < m { 0.0 } else { *v / keep };
            }
        }
        AugmentKind::Mixup => {
            let beta = Beta::new(m, m).map_err(|e| Error::Config(format!("mixup: {e}")))?;
            let mut partner: Vec<usize> = (0..n).collect();
            partner.shuffle(rng);
            let src = x.data();
            let dst = out.data_mut();
            for (i, &j) in partner.iter().enumerate() {
                let lam: f64 = beta.sample(rng);
                for k in 0..len {
                    dst[i * len + k] = lam * src[i * len + k] + (1.0 - lam) * src[j * len + k];
                }
            }
        }
        AugmentKind::Cutout => {
            let shape = x.shape().to_vec();
            for i in 0..n {
                let sample = &mut out.data_mut()[i * len..(i + 1) * len];
                if shape.len() == 4 {
                    let (c, h, w) = (shape[1], shape[2], shape[3]);
                    let side = ((m * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
                    let y0 = rng.random_range(0..=h - side);
                    let x0 = rng.random_range(0..=w - side);
                    for ch in 0..c {
                        for y in y0..y0 + side {
                            for xx in x0..x0 + side {
                                sample[(ch * h + y) * w + xx] = 0.0;
                            }
                        }
                    }
                } else {
                    let side = ((m * len as f64).round() as usize).clamp(1, len);
                    let s0 = rng.random_range(0..=len - side);
                    sample[s0..s0 + side].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        AugmentKind::Noise => {
            let mean = x.data().iter().sum::<f64>() / x.len() as f64;
            let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
            let std = m * var.sqrt();
            for v in out.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std * z;
            }
        }
    }
    Ok(out)
}
