use crate::error::{Error, Result};
use crate::tensor::{LayerRecord, Tensor};

const RAW_LIMIT: f64 = 30.0;

/// Bias offsets confined to the open box `|eps_b| < alpha |b|` through
/// `eps_b = alpha |b| (2 sigmoid(r) - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasPerturbation {
    pub alpha: f64,
    half_width: Vec<f64>,
    pub raw: Vec<f64>,
}

impl BiasPerturbation {
    /// `None` when `alpha = 0`: nothing to learn.
    pub fn new(bias: &Tensor, alpha: f64) -> Option<Self> {
        (alpha > 0.0).then(|| Self {
            alpha,
            half_width: bias.data().iter().map(|b| alpha * b.abs()).collect(),
            raw: vec![0.0; bias.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    fn squash(r: f64) -> f64 {
        2.0 / (1.0 + (-r.clamp(-RAW_LIMIT, RAW_LIMIT)).exp()) - 1.0
    }

    pub fn offsets(&self) -> Vec<f64> {
        self.raw
            .iter()
            .zip(&self.half_width)
            .map(|(&r, &h)| h * Self::squash(r))
            .collect()
    }

    /// Derivative of each offset with respect to its raw parameter.
    pub fn jacobian(&self) -> Vec<f64> {
        self.raw
            .iter()
            .zip(&self.half_width)
            .map(|(&r, &h)| {
                if r.abs() >= RAW_LIMIT {
                    return 0.0;
                }
                let s = 1.0 / (1.0 + (-r).exp());
                2.0 * h * s * (1.0 - s)
            })
            .collect()
    }

    pub fn apply(&self, bias: &Tensor) -> Tensor {
        let off = self.offsets();
        let data = bias.data().iter().zip(off).map(|(b, e)| b + e).collect();
        Tensor::from_parts(bias.shape().to_vec(), data)
    }
}

fn channel_means(pre: &Tensor) -> Vec<f64> {
    let s = pre.shape();
    let (n, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    (0..c)
        .map(|ch| {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                sum += pre.data()[base..base + spatial].iter().sum::<f64>();
            }
            sum / (n * spatial) as f64
        })
        .collect()
}

/// Shifts the bias of `quantized` so its mean pre-activation output per
/// channel on `x` matches that of `reference` on the same input.
pub fn bias_correct(index: usize, reference: &LayerRecord, quantized: &LayerRecord, x: &Tensor) -> Result<LayerRecord> {
    if !quantized.kind.is_parametric() {
        return Err(Error::Shape {
            layer: index,
            msg: "bias correction needs a linear or convolution layer".into(),
        });
    }
    let mut out = quantized.clone();
    let Some(bias) = out.bias.as_mut() else {
        return Ok(out);
    };
    let fp = channel_means(&reference.forward(index, x, None)?.pre);
    let q = channel_means(&quantized.forward(index, x, None)?.pre);
    for ((b, f), v) in bias.data_mut().iter_mut().zip(fp).zip(q) {
        *b += f - v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_has_nothing_to_learn() {
        assert!(BiasPerturbation::new(&Tensor::vector(vec![1.0]).unwrap(), 0.0).is_none());
    }

    #[test]
    fn stays_inside_box() {
        let b = Tensor::vector(vec![2.0, -0.5, 0.0]).unwrap();
        let mut p = BiasPerturbation::new(&b, 0.33).unwrap();
        for r in [-1e6, -35.0, -3.0, 0.0, 2.0, 29.0, 1e6] {
            p.raw.iter_mut().for_each(|v| *v = r);
            for (e, bound) in p.offsets().iter().zip([0.66, 0.165, 0.0]) {
                assert!(e.abs() < bound || (bound == 0.0 && *e == 0.0), "{r}: {e}");
            }
        }
    }

    fn layer(w: f64, b: f64) -> LayerRecord {
        LayerRecord::linear(
            Tensor::new(vec![1, 1], vec![w]).unwrap(),
            Some(Tensor::vector(vec![b]).unwrap()),
        )
    }

    #[test]
    fn exact_quantization_leaves_bias() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, -0.5]).unwrap();
        let l = layer(2.0, 0.25);
        assert_eq!(bias_correct(0, &l, &l, &x).unwrap(), l);
    }

    #[test]
    fn restores_shifted_mean() {
        let x = Tensor::new(vec![2, 1], vec![0.5, 2.5]).unwrap();
        // quantized weight 1.8 lowers the mean output by 0.2 * 1.5 = 0.3
        let fixed = bias_correct(0, &layer(2.0, 0.0), &layer(1.8, 0.0), &x).unwrap();
        assert!((fixed.bias.unwrap().data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn second_correction_is_noop() {
        let x = Tensor::new(vec![3, 2], vec![0.5, 2.5, -1.0, 0.3, 0.9, 1.7]).unwrap();
        let fp = LayerRecord::linear(
            Tensor::new(vec![2, 2], vec![0.31, -1.17, 0.52, 0.08]).unwrap(),
            Some(Tensor::vector(vec![0.1, -0.2]).unwrap()),
        );
        let mut q = fp.clone();
        q.weight = Some(Tensor::new(vec![2, 2], vec![0.25, -1.25, 0.5, 0.0]).unwrap());
        let once = bias_correct(0, &fp, &q, &x).unwrap();
        let twice = bias_correct(0, &fp, &once, &x).unwrap();
        for (a, b) in once.bias.unwrap().data().iter().zip(twice.bias.unwrap().data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
