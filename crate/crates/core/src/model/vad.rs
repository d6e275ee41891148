//! Frame-level voice-activity head: frequency average pool, pointwise conv,
//! layer norm, PReLU, unidirectional GRU, linear, sigmoid.

use candle_core::{Tensor, D};

use super::layers::{sigmoid, LayerNorm, Linear, PRelu};
use super::params::Scope;
use super::trace::{ctf, Tracer};
use crate::error::Result;

/// Single-layer GRU with gate order (reset, update, new).
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub size: usize,
}

impl Gru {
    pub fn new(sc: &mut Scope, d_in: usize, size: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(&mut sc.sub("ih"), d_in, 3 * size, true)?,
            hidden: Linear::new(&mut sc.sub("hh"), size, 3 * size, true)?,
            size,
        })
    }

    /// (B, T, D) -> (B, T, H), zero initial state.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let hs = self.size;
        let gi = self.input.forward(x)?;
        let mut h = Tensor::zeros((b, hs), x.dtype(), x.device())?;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let gi_t = gi.narrow(1, step, 1)?.squeeze(1)?;
            let gh = self.hidden.forward(&h)?;
            let r = sigmoid(&(gi_t.narrow(D::Minus1, 0, hs)? + gh.narrow(D::Minus1, 0, hs)?)?)?;
            let z = sigmoid(&(gi_t.narrow(D::Minus1, hs, hs)? + gh.narrow(D::Minus1, hs, hs)?)?)?;
            let n = (gi_t.narrow(D::Minus1, 2 * hs, hs)? + (r * gh.narrow(D::Minus1, 2 * hs, hs)?)?)?.tanh()?;
            h = (&n + (z * (&h - &n)?)?)?;
            outs.push(h.clone());
        }
        Ok(Tensor::stack(&outs, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct VadHead {
    pub pointwise: Linear,
    pub norm: LayerNorm,
    pub act: PRelu,
    pub gru: Gru,
    pub out: Linear,
}

impl VadHead {
    pub fn new(sc: &mut Scope, c: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            pointwise: Linear::new(&mut sc.sub("pw"), c, c, true)?,
            norm: LayerNorm::new(&mut sc.sub("norm"), c)?,
            act: PRelu::new(&mut sc.sub("act"), c)?,
            gru: Gru::new(&mut sc.sub("gru"), c, hidden)?,
            out: Linear::new(&mut sc.sub("out"), hidden, 1, true)?,
        })
    }

    /// (B, T, F', C) -> (B, T) probabilities.
    pub fn forward(&self, h: &Tensor, tr: &mut Tracer) -> Result<Tensor> {
        let pooled = h.mean_keepdim(2)?;
        tr.record("VAD Estimator/AveragePool", &[ctf(h)], ctf(&pooled));
        let p = self.pointwise.forward(&pooled.squeeze(2)?)?;
        let (_, t, c) = p.dims3()?;
        tr.record("VAD Estimator/Permute", &[ctf(&pooled)], vec![t, c]);
        let x = self.act.forward(&self.norm.forward(&p)?)?;
        let g = self.gru.forward(&x)?;
        tr.record("VAD Estimator/GRU", &[vec![t, c]], vec![t, self.gru.size]);
        let logits = self.out.forward(&g)?;
        tr.record("VAD Estimator/Linear", &[vec![t, self.gru.size]], vec![t, 1]);
        tr.record("VAD Estimator", &[ctf(h)], vec![t, 1]);
        sigmoid(&logits.squeeze(2)?)
    }
}
