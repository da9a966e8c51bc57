//! Integer-only inference simulation and exhaustive rounding oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LayerRecord, Tensor};

/// Largest candidate count the exhaustive oracle will enumerate.
pub const ORACLE_LIMIT: u128 = 1_000_000;
const REQUANT_TOLERANCE: f64 = 1.0 / (1u64 << 30) as f64;

/// Fixed-point ratio `multiplier * 2^-shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantParams {
    pub multiplier: i64,
    pub shift: u32,
}

impl RequantParams {
    pub fn ratio(&self) -> f64 {
        self.multiplier as f64 / 2f64.powi(self.shift as i32)
    }
}

/// Smallest shift whose 31-bit multiplier approximates `s_w * s_x / s_y`
/// within a relative error of 2^-30.
pub fn derive_requant(s_w: f64, s_x: f64, s_y: f64) -> Result<RequantParams> {
    for s in [s_w, s_x, s_y] {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Requant(s));
        }
    }
    requant_for_ratio(s_w * s_x / s_y)
}

pub fn requant_for_ratio(ratio: f64) -> Result<RequantParams> {
    const M_LIMIT: f64 = (1u64 << 31) as f64;
    if !(ratio > 0.0 && ratio < M_LIMIT) {
        return Err(Error::Requant(ratio));
    }
    for shift in 0..=62u32 {
        let m = (ratio * 2f64.powi(shift as i32)).round();
        if m >= M_LIMIT {
            break;
        }
        if m >= 1.0 && ((m / 2f64.powi(shift as i32) - ratio) / ratio).abs() <= REQUANT_TOLERANCE {
            return Ok(RequantParams {
                multiplier: m as i64,
                shift,
            });
        }
    }
    Err(Error::Requant(ratio))
}

/// Integer matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Tensor(format!(
                "{} integers for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn symmetric_max(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Output codes of a linear layer with integer weights `w` (`[out, in]`) and
/// integer inputs `x` (`[batch, in]`): accumulate, multiply by the
/// requantization multiplier, shift right rounding half up, add the binary
/// mask (`[batch, out]`), then clamp to the symmetric `out_bits` range.
pub fn integer_layer_forward(
    w: &IntTensor,
    x: &IntTensor,
    rq: RequantParams,
    mask: &IntTensor,
    out_bits: u32,
) -> Result<IntTensor> {
    if w.cols != x.cols || mask.rows != x.rows || mask.cols != w.rows {
        return Err(Error::Tensor(format!(
            "integer layer shapes disagree: w {}x{}, x {}x{}, mask {}x{}",
            w.rows, w.cols, x.rows, x.cols, mask.rows, mask.cols
        )));
    }
    if let Some(v) = mask.data.iter().find(|v| !matches!(v, 0 | 1)) {
        return Err(Error::Tensor(format!("activation mask entries must be 0 or 1, found {v}")));
    }
    let k = symmetric_max(out_bits);
    let mut out = Vec::with_capacity(x.rows * w.rows);
    for n in 0..x.rows {
        let xr = x.row(n);
        for o in 0..w.rows {
            let mut acc: i64 = 0;
            for (a, b) in w.row(o).iter().zip(xr) {
                acc = a.checked_mul(*b).and_then(|p| acc.checked_add(p)).ok_or(Error::Overflow)?;
            }
            let scaled = acc.checked_mul(rq.multiplier).ok_or(Error::Overflow)?;
            let shifted = if rq.shift == 0 {
                scaled
            } else {
                scaled.checked_add(1i64 << (rq.shift - 1)).ok_or(Error::Overflow)? >> rq.shift
            };
            out.push((shifted + mask.data[n * w.rows + o]).clamp(-k, k));
        }
    }
    IntTensor::new(x.rows, w.rows, out)
}

/// The same layer evaluated in floating point: dequantized weights and
/// inputs go through an ordinary linear layer, and the output is coded with
/// `floor(y / s_y + 0.5)` plus the mask, then clamped.
pub fn float_simulated_forward(
    w: &IntTensor,
    x: &IntTensor,
    s_w: f64,
    s_x: f64,
    s_y: f64,
    mask: &IntTensor,
    out_bits: u32,
) -> Result<IntTensor> {
    let wt = Tensor::new(vec![w.rows, w.cols], w.data.iter().map(|&v| v as f64 * s_w).collect())?;
    let xt = Tensor::new(vec![x.rows, x.cols], x.data.iter().map(|&v| v as f64 * s_x).collect())?;
    let layer = LayerRecord::linear(wt, None);
    let y = layer.forward(0, &xt, None)?.out;
    let k = symmetric_max(out_bits);
    let data = y
        .data()
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| ((v / s_y + 0.5).floor() as i64 + m).clamp(-k, k))
        .collect();
    IntTensor::new(x.rows, w.rows, data)
}

/// Product error split into weight, input and cross terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDecomposition {
    pub term_w: f64,
    pub term_x: f64,
    pub term_cross: f64,
    pub total: f64,
}

impl ErrorDecomposition {
    pub fn sum(&self) -> f64 {
        self.term_w + self.term_x + self.term_cross
    }
}

/// Decomposes `w x - floor(w) floor(x)` with unit scales.
pub fn error_decomposition(w: f64, x: f64) -> ErrorDecomposition {
    let (fw, fx) = (w.floor(), x.floor());
    let (ew, ex) = (w - fw, x - fx);
    ErrorDecomposition {
        term_w: ew * fx,
        term_x: fw * ex,
        term_cross: ew * ex,
        total: w * x - fw * fx,
    }
}

/// Dot-product version over conforming vectors.
pub fn error_decomposition_dot(w: &[f64], x: &[f64]) -> ErrorDecomposition {
    let mut acc = ErrorDecomposition {
        term_w: 0.0,
        term_x: 0.0,
        term_cross: 0.0,
        total: 0.0,
    };
    for (&a, &b) in w.iter().zip(x) {
        let d = error_decomposition(a, b);
        acc.term_w += d.term_w;
        acc.term_x += d.term_x;
        acc.term_cross += d.term_cross;
        acc.total += d.total;
    }
    acc
}

/// Best integer weight vector found by [`exhaustive_rounding_oracle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub weights: Vec<i64>,
    pub value: f64,
    pub error: f64,
    /// Offset of each chosen weight from the floor of the real weight.
    pub offsets: Vec<i64>,
    pub candidates: u128,
}

/// Candidate sets `floor(w_i) + o` for each offset `o`.
pub fn offset_candidates(w: &[f64], offsets: &[i64]) -> Vec<Vec<i64>> {
    w.iter()
        .map(|&v| offsets.iter().map(|o| v.floor() as i64 + o).collect())
        .collect()
}

/// Enumerates every assignment from `candidates` and returns the one whose
/// dot product with `x` is closest to `target`. Ties are broken by the
/// squared distance to `w`, then lexicographically.
pub fn exhaustive_rounding_oracle(
    w: &[f64],
    x: &[f64],
    candidates: &[Vec<i64>],
    target: f64,
) -> Result<OracleResult> {
    if w.len() != x.len() || w.len() != candidates.len() || w.is_empty() {
        return Err(Error::Tensor(format!(
            "oracle needs matching non-empty weights ({}), inputs ({}) and candidate sets ({})",
            w.len(),
            x.len(),
            candidates.len()
        )));
    }
    let count = candidates
        .iter()
        .try_fold(1u128, |acc, c| acc.checked_mul(c.len() as u128))
        .unwrap_or(u128::MAX);
    if count == 0 {
        return Err(Error::Tensor("an empty candidate set admits no assignment".into()));
    }
    if count > ORACLE_LIMIT {
        return Err(Error::CandidateExplosion {
            count,
            limit: ORACLE_LIMIT,
        });
    }
    let mut sorted: Vec<Vec<i64>> = candidates.to_vec();
    for c in &mut sorted {
        c.sort_unstable();
        c.dedup();
    }
    let mut idx = vec![0usize; w.len()];
    let mut best: Option<(f64, f64, Vec<i64>)> = None;
    loop {
        let assign: Vec<i64> = idx.iter().zip(&sorted).map(|(&k, c)| c[k]).collect();
        let value: f64 = assign.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum();
        let err = (value - target).abs();
        let dist: f64 = assign.iter().zip(w).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
        let better = match &best {
            None => true,
            Some((be, bd, _)) => err < *be || (err == *be && dist < *bd),
        };
        if better {
            best = Some((err, dist, assign));
        }
        // odometer over candidate indices, last position fastest
        let mut p = w.len();
        loop {
            if p == 0 {
                let (error, _, weights) = best.expect("at least one candidate");
                let value = weights.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum();
                let offsets = weights.iter().zip(w).map(|(&a, &b)| a - b.floor() as i64).collect();
                return Ok(OracleResult {
                    weights,
                    value,
                    error,
                    offsets,
                    candidates: count,
                });
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < sorted[p].len() {
                break;
            }
            idx[p] = 0;
        }
    }
}

/// Writes oracle results as CSV rows `weights,value,error,offsets`.
pub fn oracle_csv(results: &[OracleResult]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["weights", "value", "error", "offsets"])?;
    let join = |v: &[i64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    for r in results {
        wtr.write_record([
            join(&r.weights),
            r.value.to_string(),
            r.error.to_string(),
            join(&r.offsets),
        ])?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Tensor(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
