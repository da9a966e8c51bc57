use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::string_enum;
use crate::codec::ChannelGrids;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    None,
    AmbiguityMost,
    AmbiguityLeast,
    MagnitudeLow,
    MagnitudeHigh,
}

string_enum!(MaskStrategy, "mask strategy", {
    None => "none",
    AmbiguityMost => "ambiguity_most",
    AmbiguityLeast => "ambiguity_least",
    MagnitudeLow => "magnitude_low",
    MagnitudeHigh => "magnitude_high",
});

/// Which weights keep a trainable rounding variable, written
/// `strategy` or `strategy:fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub fraction: f64,
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            strategy: MaskStrategy::None,
            fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("mask fraction {} outside (0, 1]", self.fraction)));
        }
        Ok(())
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.strategy == MaskStrategy::None {
            f.write_str("none")
        } else {
            write!(f, "{}:{}", self.strategy, self.fraction)
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (k, frac) = match s.split_once(':') {
            Some((k, f)) => (
                k,
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad mask fraction `{f}`")))?,
            ),
            None => (s, 1.0),
        };
        let spec = Self {
            strategy: k.parse()?,
            fraction: frac,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for MaskSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskSpec> for String {
    fn from(m: MaskSpec) -> String {
        m.to_string()
    }
}

/// `true` marks a trainable weight. Exactly `ceil(fraction * n)` entries are
/// selected, ties broken by ascending flat index.
pub fn build_mask(w: &Tensor, grids: &ChannelGrids, spec: MaskSpec) -> Result<Vec<bool>> {
    spec.validate()?;
    let n = w.len();
    if spec.strategy == MaskStrategy::None {
        return Ok(vec![true; n]);
    }
    let count = (spec.fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "mask fraction {} selects no weights out of {n}",
            spec.fraction
        )));
    }
    let scores: Vec<f64> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| match spec.strategy {
            MaskStrategy::AmbiguityMost | MaskStrategy::AmbiguityLeast => {
                let t = grids.of(i).to_index(x);
                (t - t.round()).abs()
            }
            _ => x.abs(),
        })
        .collect();
    let descending = matches!(spec.strategy, MaskStrategy::AmbiguityMost | MaskStrategy::MagnitudeHigh);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        (if descending { c.reverse() } else { c }).then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in &order[..count.min(n)] {
        mask[i] = true;
    }
    Ok(mask)
}
