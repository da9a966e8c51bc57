//! First-order optimizers with pinned default hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OptimizerKind {
    Sgd,
    Nesterov,
    Adam,
    AdamW,
    Adamax,
    Adagrad,
    Adadelta,
    RmsProp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 8] = [
        OptimizerKind::Sgd,
        OptimizerKind::Nesterov,
        OptimizerKind::Adam,
        OptimizerKind::AdamW,
        OptimizerKind::Adamax,
        OptimizerKind::Adagrad,
        OptimizerKind::Adadelta,
        OptimizerKind::RmsProp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Nesterov => "nesterov",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Adamax => "adamax",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Unknown {
                what: "optimizer",
                name: s.to_string(),
            })
    }
}

impl TryFrom<String> for OptimizerKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OptimizerKind> for String {
    fn from(k: OptimizerKind) -> String {
        k.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// RMSProp smoothing constant.
    pub alpha: f64,
    /// AdaDelta smoothing constant.
    pub rho: f64,
}

impl Hyper {
    pub fn defaults(kind: OptimizerKind) -> Self {
        let lr = match kind {
            OptimizerKind::Sgd | OptimizerKind::Nesterov => 1e-2,
            OptimizerKind::Adagrad => 1e-1,
            OptimizerKind::Adadelta => 1.0,
            _ => 1e-3,
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: if kind == OptimizerKind::AdamW { 1e-2 } else { 0.0 },
            alpha: 0.99,
            rho: 0.9,
        }
    }
}

/// Optional replacements for the pinned defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HyperOverrides {
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Accumulators {
    None,
    Momentum { buf: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
    Adamax { m: Vec<f64>, u: Vec<f64> },
    SquareSum { sum: Vec<f64> },
    Adadelta { v: Vec<f64>, delta: Vec<f64> },
    Rms { v: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    pub hyper: Hyper,
    t: u64,
    acc: Accumulators,
    len: usize,
    skipped: u64,
}

pub fn new_optimizer(kind: OptimizerKind, len: usize, overrides: HyperOverrides) -> Result<OptimizerState> {
    let mut hyper = Hyper::defaults(kind);
    if let Some(lr) = overrides.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        hyper.lr = lr;
    }
    if let Some(wd) = overrides.weight_decay {
        hyper.weight_decay = wd;
    }
    let z = || vec![0.0; len];
    let acc = match kind {
        OptimizerKind::Sgd => Accumulators::None,
        OptimizerKind::Nesterov => Accumulators::Momentum { buf: z() },
        OptimizerKind::Adam | OptimizerKind::AdamW => Accumulators::Adam { m: z(), v: z() },
        OptimizerKind::Adamax => Accumulators::Adamax { m: z(), u: z() },
        OptimizerKind::Adagrad => Accumulators::SquareSum { sum: z() },
        OptimizerKind::Adadelta => Accumulators::Adadelta { v: z(), delta: z() },
        OptimizerKind::RmsProp => Accumulators::Rms { v: z() },
    };
    Ok(OptimizerState {
        kind,
        hyper,
        t: 0,
        acc,
        len,
        skipped: 0,
    })
}

impl OptimizerState {
    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Steps skipped because the gradient held a non-finite entry.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn first_moment(&self) -> Option<&[f64]> {
        match &self.acc {
            Accumulators::Adam { m, .. } | Accumulators::Adamax { m, .. } => Some(m),
            _ => None,
        }
    }

    pub fn second_moment(&self) -> Option<&[f64]> {
        match &self.acc {
            Accumulators::Adam { v, .. } | Accumulators::Rms { v } | Accumulators::Adadelta { v, .. } => Some(v),
            _ => None,
        }
    }

    pub fn infinity_norm(&self) -> Option<&[f64]> {
        match &self.acc {
            Accumulators::Adamax { u, .. } => Some(u),
            _ => None,
        }
    }

    /// One update of `params` in place. Returns `false` (and counts the
    /// incident) when the step was skipped for a non-finite gradient.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<bool> {
        if params.len() != self.len || grads.len() != self.len {
            return Err(Error::Config(format!(
                "optimizer sized for {} parameters, got {} params and {} grads",
                self.len,
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.t += 1;
        let h = self.hyper;
        let t = self.t as i32;
        match &mut self.acc {
            Accumulators::None => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= h.lr * g;
                }
            }
            Accumulators::Momentum { buf } => {
                for ((p, g), b) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
                    *b = h.momentum * *b + g;
                    *p -= h.lr * (g + h.momentum * *b);
                }
            }
            Accumulators::Adam { m, v } => {
                let bc1 = 1.0 - h.beta1.powi(t);
                let bc2 = 1.0 - h.beta2.powi(t);
                let decoupled = self.kind == OptimizerKind::AdamW;
                for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    if decoupled {
                        *p -= h.lr * h.weight_decay * *p;
                    }
                    *mi = h.beta1 * *mi + (1.0 - h.beta1) * g;
                    *vi = h.beta2 * *vi + (1.0 - h.beta2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= h.lr * mhat / (vhat.sqrt() + h.eps);
                }
            }
            Accumulators::Adamax { m, u } => {
                let bc1 = 1.0 - h.beta1.powi(t);
                for (((p, g), mi), ui) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(u.iter_mut()) {
                    *mi = h.beta1 * *mi + (1.0 - h.beta1) * g;
                    *ui = (h.beta2 * *ui).max(g.abs());
                    // u = 0 only while every gradient so far was zero
                    if *ui > 0.0 {
                        *p -= h.lr * (*mi / bc1) / *ui;
                    }
                }
            }
            Accumulators::SquareSum { sum } => {
                for ((p, g), s) in params.iter_mut().zip(grads).zip(sum.iter_mut()) {
                    *s += g * g;
                    *p -= h.lr * g / (s.sqrt() + h.eps);
                }
            }
            Accumulators::Adadelta { v, delta } => {
                for (((p, g), vi), di) in params.iter_mut().zip(grads).zip(v.iter_mut()).zip(delta.iter_mut()) {
                    *vi = h.rho * *vi + (1.0 - h.rho) * g * g;
                    let upd = ((*di + h.eps).sqrt() / (*vi + h.eps).sqrt()) * g;
                    *di = h.rho * *di + (1.0 - h.rho) * upd * upd;
                    *p -= h.lr * upd;
                }
            }
            Accumulators::Rms { v } => {
                for ((p, g), vi) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
                    *vi = h.alpha * *vi + (1.0 - h.alpha) * g * g;
                    *p -= h.lr * g / (vi.sqrt() + h.eps);
                }
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(kind: OptimizerKind, len: usize) -> OptimizerState {
        new_optimizer(kind, len, HyperOverrides::default()).unwrap()
    }

    #[test]
    fn adam_starts_zeroed() {
        let o = opt(OptimizerKind::Adam, 3);
        assert_eq!(o.steps(), 0);
        assert_eq!(o.first_moment().unwrap(), &[0.0; 3]);
        assert_eq!(o.second_moment().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("lion".parse::<OptimizerKind>(), Err(Error::Unknown { .. })));
    }

    #[test]
    fn adamax_layout() {
        let o = opt(OptimizerKind::Adamax, 2);
        assert!(o.infinity_norm().is_some());
        assert!(o.second_moment().is_none());
    }

    #[test]
    fn sgd_step() {
        let mut o = new_optimizer(OptimizerKind::Sgd, 1, HyperOverrides { lr: Some(0.1), ..Default::default() }).unwrap();
        let mut p = [1.0];
        o.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut o = opt(OptimizerKind::Adam, 1);
        let mut p = [0.0];
        o.step(&mut p, &[0.5]).unwrap();
        let expected = 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] + expected).abs() < 1e-18);
        assert!((p[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adamax_first_step_is_signed_lr() {
        let mut o = opt(OptimizerKind::Adamax, 1);
        let mut p = [2.0];
        o.step(&mut p, &[-0.5]).unwrap();
        assert!((p[0] - (2.0 + 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skipped() {
        let mut o = opt(OptimizerKind::Adam, 2);
        let mut p = [1.0, 2.0];
        assert!(!o.step(&mut p, &[f64::NAN, 0.0]).unwrap());
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(o.skipped(), 1);
        assert_eq!(o.steps(), 0);
    }

    #[test]
    fn zero_gradients_leave_params_alone() {
        for kind in OptimizerKind::ALL {
            let mut o = opt(kind, 3);
            let mut p = [0.3, -1.2, 4.0];
            for _ in 0..50 {
                o.step(&mut p, &[0.0; 3]).unwrap();
            }
            if kind == OptimizerKind::AdamW {
                let mut expected = [0.3, -1.2, 4.0];
                for _ in 0..50 {
                    for e in &mut expected {
                        *e -= 1e-3 * 1e-2 * *e;
                    }
                }
                assert_eq!(p, expected, "{kind}");
            } else {
                assert_eq!(p, [0.3, -1.2, 4.0], "{kind}");
            }
        }
    }

    #[test]
    fn every_kind_minimizes_a_quadratic() {
        for kind in OptimizerKind::ALL {
            let mut o = opt(kind, 1);
            let mut p = [1.0];
            let mut reached = None;
            for step in 1..=2000 {
                let g = [2.0 * p[0]];
                o.step(&mut p, &g).unwrap();
                if p[0] * p[0] < 1e-2 {
                    reached = Some(step);
                    break;
                }
            }
            assert!(reached.is_some(), "{kind} ended at f = {}", p[0] * p[0]);
        }
    }

    #[test]
    fn order_independent() {
        for kind in OptimizerKind::ALL {
            let g = [0.3, -0.7, 1.1, 0.0];
            let mut a = opt(kind, 4);
            let mut b = opt(kind, 4);
            let mut pa = [1.0, 2.0, -3.0, 0.5];
            let mut pb = [0.5, -3.0, 2.0, 1.0];
            let gb = [0.0, 1.1, -0.7, 0.3];
            for _ in 0..5 {
                a.step(&mut pa, &g).unwrap();
                b.step(&mut pb, &gb).unwrap();
            }
            assert_eq!([pa[3], pa[2], pa[1], pa[0]], pb, "{kind}");
        }
    }
}
