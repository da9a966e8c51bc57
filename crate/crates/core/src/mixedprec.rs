//! Per-neuron bit-widths from gradient sensitivities.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{MAX_BITS, MIN_BITS};
use crate::error::{Error, Result};
use crate::tensor::{backward, network_forward, NetworkRecord, Tensor};

const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub neuron: usize,
}

/// Sensitivities of every considered neuron with their global moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityStats {
    pub neurons: Vec<NeuronId>,
    pub g: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl SensitivityStats {
    /// Stats over bare values; neuron ids are `(0, i)`.
    pub fn from_values(g: Vec<f64>) -> Self {
        let neurons = (0..g.len()).map(|i| NeuronId { layer: 0, neuron: i }).collect();
        Self::with_ids(neurons, g)
    }

    fn with_ids(neurons: Vec<NeuronId>, g: Vec<f64>) -> Self {
        let n = g.len().max(1) as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            neurons,
            g,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Parametric layers other than the first and last, which stay at 8 bits.
pub fn middle_layers(net: &NetworkRecord) -> Vec<usize> {
    let p = net.parametric_layers();
    if p.len() <= 2 {
        return Vec::new();
    }
    p[1..p.len() - 1].to_vec()
}

/// Mean absolute gradient of `||F(x)||^2` with respect to each output
/// neuron's pre-activation of `layers`, averaged over samples and spatial
/// positions.
pub fn neuron_sensitivity(net: &NetworkRecord, x: &Tensor, layers: &[usize]) -> Result<SensitivityStats> {
    let out = network_forward(net, x)?;
    let seed = out.map(|v| 2.0 * v);
    let grads = backward(net, x, &seed)?;
    let mut ids = Vec::new();
    let mut g = Vec::new();
    for &l in layers {
        let pre = grads.pre_activations[l]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("layer {l} has no parameters to allocate bits for")))?;
        let s = pre.shape();
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for v in &pre.data()[base..base + spatial] {
                    sum += v.abs();
                }
            }
            ids.push(NeuronId { layer: l, neuron: ch });
            g.push(sum / (n * spatial) as f64);
        }
    }
    Ok(SensitivityStats::with_ids(ids, g))
}

pub fn trunc_toward_zero(z: f64) -> i64 {
    z.trunc() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitAllocation {
    pub target: u32,
    pub bits: Vec<u32>,
    /// `z - trunc(z)` of each neuron's z-score.
    pub residues: Vec<f64>,
    /// Neurons whose unclamped width fell outside the allowed range.
    pub saturated: Vec<bool>,
    /// Whether the mean equals the target exactly.
    pub feasible: bool,
}

impl BitAllocation {
    pub fn total(&self) -> i64 {
        self.bits.iter().map(|&b| b as i64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() as f64 / self.bits.len() as f64
    }

    fn residual(&self) -> i64 {
        self.target as i64 * self.bits.len() as i64 - self.total()
    }
}

/// `b_i = b + trunc((g_i - mu) / sigma)` clamped to the allowed widths.
pub fn allocate_bits(stats: &SensitivityStats, target: u32) -> Result<BitAllocation> {
    if !(MIN_BITS..=MAX_BITS).contains(&target) {
        return Err(Error::Config(format!("target width {target} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    let n = stats.g.len();
    let degenerate = stats.std < DEGENERATE_STD;
    let mut bits = Vec::with_capacity(n);
    let mut residues = Vec::with_capacity(n);
    let mut saturated = Vec::with_capacity(n);
    for &g in &stats.g {
        let z = if degenerate { 0.0 } else { (g - stats.mean) / stats.std };
        let raw = target as i64 + trunc_toward_zero(z);
        let clamped = raw.clamp(MIN_BITS as i64, MAX_BITS as i64);
        bits.push(clamped as u32);
        residues.push(z - z.trunc());
        saturated.push(raw != clamped);
    }
    let mut alloc = BitAllocation {
        target,
        bits,
        residues,
        saturated,
        feasible: false,
    };
    alloc.feasible = alloc.residual() == 0;
    Ok(alloc)
}

/// Moves the total to `target * N` one bit at a time: increments go to the
/// largest residues first, decrements to the smallest, ties by index.
/// Saturated neurons never move; each pass touches a neuron at most once.
pub fn normalize_allocation(alloc: &BitAllocation) -> BitAllocation {
    let mut out = alloc.clone();
    let mut r = out.residual();
    let n = out.bits.len();
    let mut order: Vec<usize> = (0..n).collect();
    if r > 0 {
        order.sort_by(|&a, &b| out.residues[b].total_cmp(&out.residues[a]).then(a.cmp(&b)));
    } else {
        order.sort_by(|&a, &b| out.residues[a].total_cmp(&out.residues[b]).then(a.cmp(&b)));
    }
    while r != 0 {
        let mut moved = false;
        for &i in &order {
            if r == 0 {
                break;
            }
            if out.saturated[i] {
                continue;
            }
            if r > 0 && out.bits[i] < MAX_BITS {
                out.bits[i] += 1;
                r -= 1;
                moved = true;
            } else if r < 0 && out.bits[i] > MIN_BITS {
                out.bits[i] -= 1;
                r += 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    out.feasible = r == 0;
    out
}

/// Widths grouped by layer, in neuron order.
pub fn bits_by_layer(stats: &SensitivityStats, alloc: &BitAllocation) -> BTreeMap<usize, Vec<u32>> {
    let mut map: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (id, &b) in stats.neurons.iter().zip(&alloc.bits) {
        map.entry(id.layer).or_default().push(b);
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub layer: usize,
    pub neuron: usize,
    pub g: f64,
    pub bits: u32,
}

pub fn allocation_rows(stats: &SensitivityStats, alloc: &BitAllocation) -> Vec<AllocationRow> {
    stats
        .neurons
        .iter()
        .zip(&stats.g)
        .zip(&alloc.bits)
        .map(|((id, &g), &bits)| AllocationRow {
            layer: id.layer,
            neuron: id.neuron,
            g,
            bits,
        })
        .collect()
}

pub fn write_allocation_csv<W: Write>(rows: &[AllocationRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<allocation csv>", e))?;
    Ok(())
}

pub fn read_allocation_csv<R: Read>(r: R) -> Result<Vec<AllocationRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}
