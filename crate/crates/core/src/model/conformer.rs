//! Pre-norm Conformer over sequences (N, L, C): half-step feed-forward,
//! multi-head self-attention, convolution module, half-step feed-forward,
//! final layer norm. `causal` masks attention to past positions and pads the
//! depthwise convolution on the left only.

use candle_core::{Tensor, D};

use super::layers::{sigmoid, softmax_last, DepthwiseConv1d, LayerNorm, Linear};
use super::params::Scope;
use crate::error::{ensure, Result};

const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(sc: &mut Scope, c: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut sc.sub("norm"), c)?,
            up: Linear::new(&mut sc.sub("up"), c, 4 * c, true)?,
            down: Linear::new(&mut sc.sub("down"), 4 * c, c, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(&self.norm.forward(x)?)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl SelfAttention {
    pub fn new(sc: &mut Scope, c: usize, heads: usize, causal: bool) -> Result<Self> {
        ensure!(c % heads == 0, "heads {heads} must divide channels {c}");
        Ok(Self {
            norm: LayerNorm::new(&mut sc.sub("norm"), c)?,
            q: Linear::new(&mut sc.sub("q"), c, c, true)?,
            k: Linear::new(&mut sc.sub("k"), c, c, true)?,
            v: Linear::new(&mut sc.sub("v"), c, c, true)?,
            out: Linear::new(&mut sc.sub("out"), c, c, true)?,
            heads,
            causal,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        let dh = c / self.heads;
        let h = self.norm.forward(x)?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((n, l, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if self.causal && l > 1 {
            let mask: Vec<f64> = (0..l * l)
                .map(|i| if i % l > i / l { MASK_VALUE } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, (l, l), x.device())?.to_dtype(x.dtype())?;
            scores = scores.broadcast_add(&mask)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, l, c))?;
        self.out.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise: DepthwiseConv1d,
    /// Channel layer norm in place of batch norm, so every position is
    /// normalised independently.
    pub mid_norm: LayerNorm,
    pub pointwise_out: Linear,
    inner: usize,
}

impl ConvModule {
    pub fn new(sc: &mut Scope, c: usize, kernel: usize, causal: bool) -> Result<Self> {
        let inner = 2 * c;
        Ok(Self {
            norm: LayerNorm::new(&mut sc.sub("norm"), c)?,
            pointwise_in: Linear::new(&mut sc.sub("pw_in"), c, 2 * inner, true)?,
            depthwise: DepthwiseConv1d::new(&mut sc.sub("dw"), inner, kernel, causal)?,
            mid_norm: LayerNorm::new(&mut sc.sub("mid_norm"), inner)?,
            pointwise_out: Linear::new(&mut sc.sub("pw_out"), inner, c, true)?,
            inner,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.pointwise_in.forward(&self.norm.forward(x)?)?;
        let a = h.narrow(D::Minus1, 0, self.inner)?;
        let g = h.narrow(D::Minus1, self.inner, self.inner)?;
        let h = (a * sigmoid(&g)?)?;
        let h = self.mid_norm.forward(&self.depthwise.forward(&h)?)?.silu()?;
        self.pointwise_out.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Conformer {
    pub ff1: FeedForward,
    pub attn: SelfAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub norm_out: LayerNorm,
}

impl Conformer {
    pub fn new(sc: &mut Scope, c: usize, heads: usize, kernel: usize, causal: bool) -> Result<Self> {
        Ok(Self {
            ff1: FeedForward::new(&mut sc.sub("ff1"), c)?,
            attn: SelfAttention::new(&mut sc.sub("attn"), c, heads, causal)?,
            conv: ConvModule::new(&mut sc.sub("conv"), c, kernel, causal)?,
            ff2: FeedForward::new(&mut sc.sub("ff2"), c)?,
            norm_out: LayerNorm::new(&mut sc.sub("norm_out"), c)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(x)? * 0.5)?)?;
        let x = (&x + self.attn.forward(&x)?)?;
        let x = (&x + self.conv.forward(&x)?)?;
        let x = (&x + (self.ff2.forward(&x)? * 0.5)?)?;
        self.norm_out.forward(&x)
    }
}
