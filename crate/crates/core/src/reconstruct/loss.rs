use serde::{Deserialize, Serialize};

use super::string_enum;
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
    Cosine,
    Kl,
}

string_enum!(LossKind, "loss", { L1 => "l1", L2 => "l2", Cosine => "cosine", Kl => "kl" });

/// Distance between the reference `target` and the reconstruction `out`.
pub fn reconstruction_loss(target: &Tensor, out: &Tensor, kind: LossKind) -> f64 {
    loss_and_grad(target, out, kind).0
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss and its gradient with respect to `out`.
pub fn loss_and_grad(target: &Tensor, out: &Tensor, kind: LossKind) -> (f64, Tensor) {
    assert_eq!(target.shape(), out.shape(), "loss operands must share a shape");
    let n = out.batch();
    let len = out.sample_len();
    let total = out.len() as f64;
    let mut grad = vec![0.0; out.len()];
    let (y, q) = (target.data(), out.data());
    let loss = match kind {
        LossKind::L2 => {
            let mut s = 0.0;
            for i in 0..q.len() {
                let d = q[i] - y[i];
                s += d * d;
                grad[i] = 2.0 * d / total;
            }
            s / total
        }
        LossKind::L1 => {
            let mut s = 0.0;
            for i in 0..q.len() {
                let d = q[i] - y[i];
                s += d.abs();
                grad[i] = if d > 0.0 {
                    1.0 / total
                } else if d < 0.0 {
                    -1.0 / total
                } else {
                    0.0
                };
            }
            s / total
        }
        LossKind::Cosine => {
            let mut s = 0.0;
            for b in 0..n {
                let r = b * len..(b + 1) * len;
                let (ys, qs) = (&y[r.clone()], &q[r.clone()]);
                let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nq = qs.iter().map(|v| v * v).sum::<f64>().sqrt();
                if ny < NORM_FLOOR || nq < NORM_FLOOR {
                    continue;
                }
                let dot: f64 = ys.iter().zip(qs).map(|(a, c)| a * c).sum();
                let cos = dot / (ny * nq);
                s += 1.0 - cos;
                for (k, g) in grad[r].iter_mut().enumerate() {
                    *g = -(ys[k] / (ny * nq) - cos * qs[k] / (nq * nq)) / n as f64;
                }
            }
            s / n as f64
        }
        LossKind::Kl => {
            let mut s = 0.0;
            for b in 0..n {
                let r = b * len..(b + 1) * len;
                let p = softmax(&y[r.clone()]);
                let pq = softmax(&q[r.clone()]);
                for k in 0..len {
                    if p[k] > 0.0 {
                        s += p[k] * (p[k].ln() - pq[k].ln());
                    }
                    grad[b * len + k] = (pq[k] - p[k]) / n as f64;
                }
            }
            s / n as f64
        }
    };
    (loss, Tensor::from_parts(out.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: Vec<Vec<f64>>) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let y = t(vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.0, 0.5]]);
        for kind in LossKind::ALL {
            assert!(reconstruction_loss(&y, &y, *kind).abs() < 1e-15, "{kind}");
        }
    }

    #[test]
    fn l1_example() {
        let y = t(vec![vec![1.0, 2.0]]);
        let q = t(vec![vec![2.0, 4.0]]);
        assert_eq!(reconstruction_loss(&y, &q, LossKind::L1), 1.5);
        assert_eq!(reconstruction_loss(&y, &q, LossKind::L2), 2.5);
    }

    #[test]
    fn cosine_scale_invariant() {
        let y = t(vec![vec![1.0, -2.0, 0.5]]);
        let q = y.map(|v| 2.0 * v);
        assert!(reconstruction_loss(&y, &q, LossKind::Cosine).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_contributes_nothing() {
        let y = t(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let q = t(vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert!((reconstruction_loss(&y, &q, LossKind::Cosine) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_differences() {
        let y = t(vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.2, 0.5]]);
        let q = t(vec![vec![0.1, -0.7, 2.4], vec![0.6, 0.25, -0.3]]);
        for kind in LossKind::ALL {
            let (_, g) = loss_and_grad(&y, &q, *kind);
            for i in 0..q.len() {
                let h = 1e-6;
                let mut p = q.clone();
                p.data_mut()[i] += h;
                let mut m = q.clone();
                m.data_mut()[i] -= h;
                let fd = (reconstruction_loss(&y, &p, *kind) - reconstruction_loss(&y, &m, *kind)) / (2.0 * h);
                assert!((fd - g.data()[i]).abs() < 1e-7, "{kind} {i}: {fd} vs {}", g.data()[i]);
            }
        }
    }
}
