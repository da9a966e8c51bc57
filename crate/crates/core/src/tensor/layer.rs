use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::codec::QuantParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Relu,
    ResidualAdd,
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn is_parametric(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::Conv2d)
    }
}

/// Nonlinearity fused after a linear or convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Symmetric per-tensor uniform fake-quantization of a layer input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub bits: u32,
    pub scale: f64,
}

impl ActQuant {
    /// Max-abs calibration; an all-zero tensor falls back to scale 1.
    pub fn calibrate(bits: u32, x: &Tensor) -> Self {
        let max_code = ((1u64 << (bits - 1)) - 1) as f64;
        let m = x.max_abs();
        let scale = if m > 0.0 { m / max_code } else { 1.0 };
        Self { bits, scale }
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Integer code with round-half-away-from-zero, clamped to the symmetric range.
    pub fn code(&self, x: f64) -> i64 {
        let k = self.max_code();
        ((x / self.scale).round() as i64).clamp(-k, k)
    }

    pub fn fake_quant(&self, x: f64) -> f64 {
        self.code(x) as f64 * self.scale
    }

    /// Straight-through gradient mask: 1 inside the unclamped range.
    fn passes_gradient(&self, x: f64) -> bool {
        (x / self.scale).abs() <= self.max_code() as f64 + 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub activation: Option<Activation>,
    /// Residual source: index into the activation history, where entry 0 is
    /// the network input and entry `j + 1` is the output of layer `j`.
    pub skip_from: Option<usize>,
    pub input_quant: Option<ActQuant>,
    /// Codec parameters the stored weights were hardened with.
    pub weight_quant: Option<QuantParams>,
}

/// Values a layer produced during one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Input after activation fake-quantization (what the kernel consumed).
    pub input: Tensor,
    /// Kernel output before the fused activation.
    pub pre: Tensor,
    pub out: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor,
    pub skip: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    /// Gradient with respect to the pre-activation kernel output.
    pub pre: Tensor,
}

impl LayerRecord {
    fn bare(kind: LayerKind) -> Self {
        Self {
            kind,
            weight: None,
            bias: None,
            stride: 1,
            padding: 0,
            activation: None,
            skip_from: None,
            input_quant: None,
            weight_quant: None,
        }
    }

    /// `weight` is `[out, in]`, `bias` is `[out]`.
    pub fn linear(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: Some(weight),
            bias,
            ..Self::bare(LayerKind::Linear)
        }
    }

    /// `weight` is `[out, in, kh, kw]`, `bias` is `[out]`.
    pub fn conv2d(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight: Some(weight),
            bias,
            stride,
            padding,
            ..Self::bare(LayerKind::Conv2d)
        }
    }

    pub fn relu() -> Self {
        Self::bare(LayerKind::Relu)
    }

    pub fn residual_add(skip_from: usize) -> Self {
        Self {
            skip_from: Some(skip_from),
            ..Self::bare(LayerKind::ResidualAdd)
        }
    }

    pub fn global_avg_pool() -> Self {
        Self::bare(LayerKind::GlobalAvgPool)
    }

    pub fn flatten() -> Self {
        Self::bare(LayerKind::Flatten)
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = Some(act);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.as_ref().map_or(0, |w| w.shape()[0])
    }

    /// Static consistency of weights, bias and metadata with the layer kind.
    pub fn validate(&self, index: usize) -> Result<()> {
        let err = |msg: String| Error::Shape { layer: index, msg };
        match self.kind {
            LayerKind::Linear | LayerKind::Conv2d => {
                let w = self
                    .weight
                    .as_ref()
                    .ok_or_else(|| err(format!("{:?} layer without weights", self.kind)))?;
                let rank = if self.kind == LayerKind::Linear { 2 } else { 4 };
                if w.shape().len() != rank {
                    return Err(err(format!(
                        "{:?} weight must have rank {rank}, got {:?}",
                        self.kind,
                        w.shape()
                    )));
                }
                if let Some(b) = &self.bias {
                    if b.shape() != [w.shape()[0]] {
                        return Err(err(format!(
                            "bias shape {:?} does not match {} output channels",
                            b.shape(),
                            w.shape()[0]
                        )));
                    }
                }
                if self.stride == 0 {
                    return Err(err("stride must be at least 1".into()));
                }
                if let Some(wq) = &self.weight_quant {
                    wq.validate_for(w.shape()[0]).map_err(|e| err(e.to_string()))?;
                }
            }
            _ => {
                if self.weight.is_some() || self.bias.is_some() {
                    return Err(err(format!("{:?} layer cannot carry parameters", self.kind)));
                }
                if self.activation.is_some() {
                    return Err(err(format!("{:?} layer cannot fuse an activation", self.kind)));
                }
            }
        }
        if (self.kind == LayerKind::ResidualAdd) != self.skip_from.is_some() {
            return Err(err("skip reference is required exactly on residual_add layers".into()));
        }
        if let Some(q) = &self.input_quant {
            if !(2..=16).contains(&q.bits) || !(q.scale > 0.0 && q.scale.is_finite()) {
                return Err(err(format!("invalid activation quantizer {q:?}")));
            }
        }
        Ok(())
    }

    /// Forward pass over a batch. `skip` is the residual operand for
    /// `residual_add` layers.
    pub fn forward(&self, index: usize, x: &Tensor, skip: Option<&Tensor>) -> Result<LayerCache> {
        let input = match &self.input_quant {
            Some(q) => x.map(|v| q.fake_quant(v)),
            None => x.clone(),
        };
        let pre = match self.kind {
            LayerKind::Linear => self.linear_forward(index, &input)?,
            LayerKind::Conv2d => self.conv_forward(index, &input)?,
            LayerKind::Relu => input.map(|v| v.max(0.0)),
            LayerKind::ResidualAdd => {
                let s = skip.ok_or_else(|| Error::Shape {
                    layer: index,
                    msg: "residual operand missing".into(),
                })?;
                if s.shape() != input.shape() {
                    return Err(Error::Shape {
                        layer: index,
                        msg: format!("residual shapes differ: {:?} vs {:?}", input.shape(), s.shape()),
                    });
                }
                input.zip_map(s, |a, b| a + b)
            }
            LayerKind::GlobalAvgPool => global_avg_pool(index, &input)?,
            LayerKind::Flatten => {
                let n = input.batch();
                let len = input.sample_len();
                input.clone().reshape(vec![n, len])?
            }
        };
        let out = match self.activation {
            Some(Activation::Relu) => pre.map(|v| v.max(0.0)),
            None => pre.clone(),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { layer: index });
        }
        Ok(LayerCache { input, pre, out })
    }

    /// Reverse-mode pass. `raw_input` is the tensor handed to `forward`
    /// before activation fake-quantization; the rounding uses a
    /// straight-through estimator that is zero outside the clamp range.
    pub fn backward(
        &self,
        index: usize,
        raw_input: &Tensor,
        cache: &LayerCache,
        grad_out: &Tensor,
    ) -> Result<LayerGrads> {
        if grad_out.shape() != cache.out.shape() {
            return Err(Error::Shape {
                layer: index,
                msg: format!(
                    "gradient shape {:?} does not match output {:?}",
                    grad_out.shape(),
                    cache.out.shape()
                ),
            });
        }
        // relu'(0) = 0
        let grad_pre = match self.activation {
            Some(Activation::Relu) => grad_out.zip_map(&cache.pre, |g, p| if p > 0.0 { g } else { 0.0 }),
            None => grad_out.clone(),
        };
        let x = &cache.input;
        let mut skip = None;
        let (mut grad_in, weight, bias) = match self.kind {
            LayerKind::Linear => {
                let (gi, gw, gb) = self.linear_backward(x, &grad_pre);
                (gi, Some(gw), gb)
            }
            LayerKind::Conv2d => {
                let (gi, gw, gb) = self.conv_backward(x, &grad_pre);
                (gi, Some(gw), gb)
            }
            LayerKind::Relu => (grad_pre.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 }), None, None),
            LayerKind::ResidualAdd => {
                skip = Some(grad_pre.clone());
                (grad_pre.clone(), None, None)
            }
            LayerKind::GlobalAvgPool => {
                let s = x.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut g = vec![0.0; x.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let v = grad_pre.data()[b * c + ch] / hw as f64;
                        let base = (b * c + ch) * hw;
                        g[base..base + hw].iter_mut().for_each(|e| *e = v);
                    }
                }
                (Tensor::from_parts(s.to_vec(), g), None, None)
            }
            LayerKind::Flatten => (grad_pre.clone().reshape(x.shape().to_vec())?, None, None),
        };
        if let Some(q) = &self.input_quant {
            for (g, &v) in grad_in.data_mut().iter_mut().zip(raw_input.data()) {
                if !q.passes_gradient(v) {
                    *g = 0.0;
                }
            }
        }
        if !grad_in.is_finite() {
            return Err(Error::NonFinite { layer: index });
        }
        Ok(LayerGrads {
            input: grad_in,
            skip,
            weight,
            bias,
            pre: grad_pre,
        })
    }

    fn linear_forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_ref().expect("validated");
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        if x.shape().len() < 2 || x.sample_len() != inp {
            return Err(Error::Shape {
                layer: index,
                msg: format!("linear expects [batch, {inp}] input, got {:?}", x.shape()),
            });
        }
        let n = x.batch();
        let wd = w.data();
        let mut y = vec![0.0; n * out];
        for b in 0..n {
            let xs = x.sample(b);
            for o in 0..out {
                let row = &wd[o * inp..(o + 1) * inp];
                let mut acc = 0.0;
                for (wv, xv) in row.iter().zip(xs) {
                    acc += wv * xv;
                }
                if let Some(bias) = &self.bias {
                    acc += bias.data()[o];
                }
                y[b * out + o] = acc;
            }
        }
        Ok(Tensor::from_parts(vec![n, out], y))
    }

    fn linear_backward(&self, x: &Tensor, g: &Tensor) -> (Tensor, Tensor, Option<Tensor>) {
        let w = self.weight.as_ref().expect("validated");
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let n = x.batch();
        let wd = w.data();
        let gd = g.data();
        let mut gw = vec![0.0; out * inp];
        let mut gx = vec![0.0; n * inp];
        let mut gb = vec![0.0; out];
        for b in 0..n {
            let xs = x.sample(b);
            for o in 0..out {
                let go = gd[b * out + o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let row = &mut gw[o * inp..(o + 1) * inp];
                for (r, xv) in row.iter_mut().zip(xs) {
                    *r += go * xv;
                }
                let gxs = &mut gx[b * inp..(b + 1) * inp];
                for (gxv, wv) in gxs.iter_mut().zip(&wd[o * inp..(o + 1) * inp]) {
                    *gxv += go * wv;
                }
            }
        }
        (
            Tensor::from_parts(x.shape().to_vec(), gx),
            Tensor::from_parts(w.shape().to_vec(), gw),
            self.bias.as_ref().map(|_| Tensor::from_parts(vec![out], gb)),
        )
    }

    fn conv_geometry(&self, index: usize, x: &Tensor) -> Result<ConvGeom> {
        let w = self.weight.as_ref().expect("validated");
        let ws = w.shape();
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape {
                layer: index,
                msg: format!("conv2d expects [batch, {}, h, w] input, got {:?}", ws[1], xs),
            });
        }
        let (h, wi) = (xs[2] + 2 * self.padding, xs[3] + 2 * self.padding);
        if h < ws[2] || wi < ws[3] {
            return Err(Error::Shape {
                layer: index,
                msg: format!("kernel {:?} larger than padded input {:?}", &ws[2..], xs),
            });
        }
        Ok(ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh: (h - ws[2]) / self.stride + 1,
            ow: (wi - ws[3]) / self.stride + 1,
            stride: self.stride,
            pad: self.padding,
        })
    }

    fn conv_forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let g = self.conv_geometry(index, x)?;
        let wd = self.weight.as_ref().expect("validated").data();
        let xd = x.data();
        let mut y = vec![0.0; g.n * g.o * g.oh * g.ow];
        for b in 0..g.n {
            for o in 0..g.o {
                let bias = self.bias.as_ref().map_or(0.0, |t| t.data()[o]);
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                let Some(r) = g.src(i, ki, g.h) else { continue };
                                for kj in 0..g.kw {
                                    let Some(s) = g.src(j, kj, g.w) else { continue };
                                    acc += wd[((o * g.c + c) * g.kh + ki) * g.kw + kj]
                                        * xd[((b * g.c + c) * g.h + r) * g.w + s];
                                }
                            }
                        }
                        y[((b * g.o + o) * g.oh + i) * g.ow + j] = acc + bias;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], y))
    }

    fn conv_backward(&self, x: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Option<Tensor>) {
        let g = self.conv_geometry(0, x).expect("forward succeeded");
        let w = self.weight.as_ref().expect("validated");
        let wd = w.data();
        let xd = x.data();
        let gd = grad.data();
        let mut gw = vec![0.0; wd.len()];
        let mut gx = vec![0.0; xd.len()];
        let mut gb = vec![0.0; g.o];
        for b in 0..g.n {
            for o in 0..g.o {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let go = gd[((b * g.o + o) * g.oh + i) * g.ow + j];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                let Some(r) = g.src(i, ki, g.h) else { continue };
                                for kj in 0..g.kw {
                                    let Some(s) = g.src(j, kj, g.w) else { continue };
                                    let wi = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                                    let xi = ((b * g.c + c) * g.h + r) * g.w + s;
                                    gw[wi] += go * xd[xi];
                                    gx[xi] += go * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            Tensor::from_parts(x.shape().to_vec(), gx),
            Tensor::from_parts(w.shape().to_vec(), gw),
            self.bias.as_ref().map(|_| Tensor::from_parts(vec![g.o], gb)),
        )
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Source coordinate for output position `out` and kernel tap `k`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn src(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let p = out * self.stride + k;
        if p < self.pad || p - self.pad >= extent {
            None
        } else {
            Some(p - self.pad)
        }
    }
}

fn global_avg_pool(index: usize, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            layer: index,
            msg: format!("global_avg_pool expects [batch, c, h, w], got {s:?}"),
        });
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut y = Vec::with_capacity(n * c);
    for plane in x.data().chunks(hw) {
        y.push(plane.iter().sum::<f64>() / hw as f64);
    }
    Ok(Tensor::from_parts(vec![n, c], y))
}
