//! Differentiable building blocks on channel-last tensors. Convolutions are
//! expressed as shifted taps concatenated along channels followed by one
//! matmul, which keeps every op inside the autograd-supported set.

use candle_core::{Tensor, Var, D};

use super::params::{Init, Scope};
use crate::error::{ensure, Result};

pub const NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Exact (erf) GELU composed from primitives: the fused kernel's backward
/// uses a truncated 1/sqrt(2 pi) and drifts by ~1e-7 per element.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let cdf = ((x * std::f64::consts::FRAC_1_SQRT_2)?.erf()? + 1.0)?;
    Ok((x * cdf)?.affine(0.5, 0.0)?)
}

/// Softmax over the last axis; the subtracted row maximum is a constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `n` entries of axis `dim` starting at `start` with step `stride`.
fn strided(x: &Tensor, dim: usize, start: usize, n: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, start, n)?);
    }
    let idx: Vec<u32> = (0..n).map(|i| (start + i * stride) as u32).collect();
    let idx = Tensor::from_vec(idx, n, x.device())?;
    Ok(x.contiguous()?.index_select(&idx, dim)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(sc: &mut Scope, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let init = Init::fan_in(d_in);
        let w = sc.param("w", &[d_in, d_out], init)?;
        let b = if bias { Some(sc.param("b", &[d_out], init)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    /// Zero weights; bias set to `bias`.
    pub fn with_const(sc: &mut Scope, d_in: usize, d_out: usize, bias: &[f64]) -> Result<Self> {
        ensure!(bias.len() == d_out, "bias has {} values, layer has {d_out} outputs", bias.len());
        Ok(Self {
            w: sc.param("w", &[d_in, d_out], Init::Const(0.0))?,
            b: Some(sc.param_values("b", &[d_out], bias.to_vec())?),
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        ensure!(
            dims.last() == Some(&self.d_in),
            "linear expects last dim {}, got {:?}",
            self.d_in,
            dims
        );
        let n: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((n, self.d_in))?.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b)?;
        }
        let mut out = dims;
        *out.last_mut().unwrap() = self.d_out;
        Ok(y.reshape(out)?)
    }
}

/// Geometry of a 2-D convolution over (time, frequency).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub time_dilation: usize,
    /// (front, back) zero padding along time.
    pub pad_t: (usize, usize),
    /// (low, high) zero padding along frequency.
    pub pad_f: (usize, usize),
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: (usize, usize)) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: (1, 1),
            time_dilation: 1,
            pad_t: (0, 0),
            pad_f: (0, 0),
        }
    }

    pub fn stride(mut self, st: usize, sf: usize) -> Self {
        self.stride = (st, sf);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.time_dilation = d;
        self
    }

    pub fn pad(mut self, pad_t: (usize, usize), pad_f: (usize, usize)) -> Self {
        self.pad_t = pad_t;
        self.pad_f = pad_f;
        self
    }

    /// Causal time padding: the receptive field ends at the current frame.
    pub fn causal(mut self) -> Self {
        self.pad_t = ((self.kernel.0 - 1) * self.time_dilation, 0);
        self
    }

    pub fn out_size(&self, t: usize, f: usize) -> Result<(usize, usize)> {
        let tp = t + self.pad_t.0 + self.pad_t.1;
        let fp = f + self.pad_f.0 + self.pad_f.1;
        let span_t = self.time_dilation * (self.kernel.0 - 1) + 1;
        ensure!(tp >= span_t && fp >= self.kernel.1, "input {t}x{f} too small for conv {:?}", self);
        Ok(((tp - span_t) / self.stride.0 + 1, (fp - self.kernel.1) / self.stride.1 + 1))
    }

    pub fn n_weights(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.c_in
    }
}

/// Convolution over (B, T, F, C_in) -> (B, T', F', C_out).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv2d {
    pub fn new(sc: &mut Scope, spec: ConvSpec) -> Result<Self> {
        let init = Init::fan_in(spec.n_weights());
        let w = sc.param("w", &[spec.n_weights(), spec.c_out], init)?;
        let b = sc.param("b", &[spec.c_out], init)?;
        Ok(Self { spec, w, b })
    }

    /// Zero weights and a constant bias: outputs `bias` until trained.
    pub fn constant(sc: &mut Scope, spec: ConvSpec, bias: f64) -> Result<Self> {
        let w = sc.param("w", &[spec.n_weights(), spec.c_out], Init::Const(0.0))?;
        let b = sc.param("b", &[spec.c_out], Init::Const(bias))?;
        Ok(Self { spec, w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let (b, t, f, c) = x.dims4()?;
        ensure!(c == s.c_in, "conv expects {} input channels, got {c}", s.c_in);
        let (to, fo) = s.out_size(t, f)?;
        let x = x.pad_with_zeros(1, s.pad_t.0, s.pad_t.1)?.pad_with_zeros(2, s.pad_f.0, s.pad_f.1)?;
        let mut taps = Vec::with_capacity(s.kernel.0 * s.kernel.1);
        for i in 0..s.kernel.0 {
            let xt = strided(&x, 1, i * s.time_dilation, to, s.stride.0)?;
            for j in 0..s.kernel.1 {
                taps.push(strided(&xt, 2, j, fo, s.stride.1)?);
            }
        }
        let k = s.n_weights();
        let cols = if taps.len() == 1 { taps.pop().unwrap().contiguous()? } else { Tensor::cat(&taps, 3)? };
        Ok(cols
            .reshape((b * to * fo, k))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?
            .reshape((b, to, fo, s.c_out))?)
    }
}

/// Per-channel depthwise convolution along axis 1 of (N, L, D).
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub w: Tensor,
    pub b: Tensor,
    pub kernel: usize,
    pub causal: bool,
}

impl DepthwiseConv1d {
    pub fn new(sc: &mut Scope, dim: usize, kernel: usize, causal: bool) -> Result<Self> {
        let init = Init::fan_in(kernel);
        Ok(Self {
            w: sc.param("w", &[kernel, dim], init)?,
            b: sc.param("b", &[dim], init)?,
            kernel,
            causal,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, l, _) = x.dims3()?;
        let k = self.kernel;
        let (front, back) = if self.causal { (k - 1, 0) } else { ((k - 1) / 2, k / 2) };
        let xp = x.pad_with_zeros(1, front, back)?;
        let mut acc: Option<Tensor> = None;
        for j in 0..k {
            let tap = xp.narrow(1, j, l)?.broadcast_mul(&self.w.get(j)?)?;
            acc = Some(match acc {
                None => tap,
                Some(a) => (a + tap)?,
            });
        }
        Ok(acc.expect("kernel > 0").broadcast_add(&self.b)?)
    }
}

/// Layer normalisation over the last axis with per-channel affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Tensor,
    pub b: Tensor,
}

impl LayerNorm {
    pub fn new(sc: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            g: sc.param("g", &[dim], Init::Const(1.0))?,
            b: sc.param("b", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

/// Per-channel PReLU: relu(x) - a * relu(-x).
#[derive(Debug, Clone)]
pub struct PRelu {
    pub a: Tensor,
}

impl PRelu {
    pub fn new(sc: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            a: sc.param("a", &[dim], Init::Const(0.25))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x.relu()? - x.neg()?.relu()?.broadcast_mul(&self.a)?)?)
    }
}

/// Batch normalisation over all leading axes of a channel-last tensor. In
/// training mode batch statistics are used and the running estimates are
/// updated (momentum 0.1, unbiased variance).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub g: Tensor,
    pub b: Tensor,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(sc: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            g: sc.param("g", &[dim], Init::Const(1.0))?,
            b: sc.param("b", &[dim], Init::Const(0.0))?,
            running_mean: sc.buffer("running_mean", &[dim], 0.0)?,
            running_var: sc.buffer("running_var", &[dim], 1.0)?,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let c = *dims.last().unwrap();
        let n: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((n, c))?;
        let (mean, var) = if train {
            let mean = flat.mean_keepdim(0)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
            let m = self.momentum;
            let unbiased = if n > 1 { (var.detach() * (n as f64 / (n - 1) as f64))? } else { var.detach() };
            let rm = ((self.running_mean.as_detached_tensor() * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
            let rv = ((self.running_var.as_detached_tensor() * (1.0 - m))? + (unbiased.squeeze(0)? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor().unsqueeze(0)?,
                self.running_var.as_detached_tensor().unsqueeze(0)?,
            )
        };
        let y = flat.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.g)?.broadcast_add(&self.b)?.reshape(dims)?)
    }
}

/// Instance normalisation of (B, T, F, C) over (T, F) per sample and channel.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub g: Tensor,
    pub b: Tensor,
}

impl InstanceNorm {
    pub fn new(sc: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            g: sc.param("g", &[dim], Init::Const(1.0))?,
            b: sc.param("b", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim((1, 2))?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim((1, 2))?;
        let y = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

/// Conv, channel layer norm, PReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub act: PRelu,
}

impl ConvBlock {
    pub fn new(sc: &mut Scope, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut sc.sub("conv"), spec)?,
            norm: LayerNorm::new(&mut sc.sub("norm"), spec.c_out)?,
            act: PRelu::new(&mut sc.sub("act"), spec.c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.act.forward(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use candle_core::{DType, Device};

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &[f64], (b, t, f, c): (usize, usize, usize, usize), w: &[f64], bias: &[f64], s: &ConvSpec) -> Vec<f64> {
        let (to, fo) = s.out_size(t, f).unwrap();
        let mut out = vec![0.0; b * to * fo * s.c_out];
        for bi in 0..b {
            for ot in 0..to {
                for of in 0..fo {
                    for co in 0..s.c_out {
                        let mut acc = bias[co];
                        for i in 0..s.kernel.0 {
                            for j in 0..s.kernel.1 {
                                let ti = (ot * s.stride.0 + i * s.time_dilation) as isize - s.pad_t.0 as isize;
                                let fi = (of * s.stride.1 + j) as isize - s.pad_f.0 as isize;
                                if ti < 0 || fi < 0 || ti >= t as isize || fi >= f as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x[((bi * t + ti as usize) * f + fi as usize) * c + ci];
                                    acc += xv * w[((i * s.kernel.1 + j) * c + ci) * s.c_out + co];
                                }
                            }
                        }
                        out[((bi * to + ot) * fo + of) * s.c_out + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let specs = [
            ConvSpec::new(2, 3, (1, 3)).stride(1, 2).pad((0, 0), (1, 1)),
            ConvSpec::new(3, 2, (2, 3)).dilation(2).causal().pad((2, 0), (1, 1)),
            ConvSpec::new(3, 4, (3, 3)).stride(2, 2).pad((1, 1), (1, 1)),
            ConvSpec::new(2, 2, (1, 2)),
        ];
        for (n, s) in specs.iter().enumerate() {
            let mut ps = ParamStore::new(n as u64, DType::F64);
            let conv = Conv2d::new(&mut Scope::new(&mut ps, "c"), *s).unwrap();
            let shape = (2, 5, 9, s.c_in);
            let xv: Vec<f64> = (0..2 * 5 * 9 * s.c_in).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let x = Tensor::from_vec(xv.clone(), (2, 5, 9, s.c_in), &Device::Cpu).unwrap();
            let y: Vec<f64> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let w: Vec<f64> = conv.w.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = conv.b.to_vec1().unwrap();
            let expect = naive_conv(&xv, shape, &w, &b, s);
            assert_eq!(y.len(), expect.len());
            for (a, e) in y.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_and_sigmoid() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1e9, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        let z: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((s[0][2] - (3.0 - z).exp()).abs() < 1e-15);
        assert_eq!(s[1][0], 0.0);
        assert!((s[1][1] - 0.5).abs() < 1e-15);
        let sg: Vec<f64> = sigmoid(&Tensor::new(&[0.0f64, 2.0, -30.0], &Device::Cpu).unwrap()).unwrap().to_vec1().unwrap();
        assert!((sg[0] - 0.5).abs() < 1e-15);
        assert!((sg[1] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert!(sg[2] > 0.0);
    }

    #[test]
    fn norms() {
        let mut ps = ParamStore::new(0, DType::F64);
        let mut sc = Scope::new(&mut ps, "");
        let ln = LayerNorm::new(&mut sc.sub("ln"), 4).unwrap();
        let bn = BatchNorm::new(&mut sc.sub("bn"), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [2.0, 2.0, 2.0, 10.0]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = ln.forward(&x).unwrap().to_vec2().unwrap();
        let m: f64 = y[0].iter().sum::<f64>() / 4.0;
        let v: f64 = y[0].iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.25 / (1.25 + 1e-5)).abs() < 1e-9);
        let yb: Vec<Vec<f64>> = bn.forward(&x, true).unwrap().to_vec2().unwrap();
        assert!((yb[0][0] + yb[1][0]).abs() < 1e-12);
        let rm: Vec<f64> = bn.running_mean.as_tensor().to_vec1().unwrap();
        assert!((rm[0] - 0.15).abs() < 1e-12);
        let rv: Vec<f64> = bn.running_var.as_tensor().to_vec1().unwrap();
        assert!((rv[0] - (0.9 + 0.1 * 0.5)).abs() < 1e-12);
    }
}
