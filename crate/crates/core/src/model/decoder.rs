//! Mask and phase decoders: dense block, then sub-pixel stages that each
//! double the frequency axis (F -> 2F - 1) by channel-to-frequency shuffle.

use candle_core::Tensor;

use super::config::ModelConfig;
use super::encoder::DenseBlock;
use super::layers::{Conv2d, ConvSpec, LayerNorm, PRelu};
use super::params::Scope;
use super::trace::{ctf, Tracer};
use crate::error::Result;

/// 1x3 conv to 2*C_mid channels, shuffle to (2F, C_mid), 1x2 conv to C_out.
#[derive(Debug, Clone)]
pub struct SubPixel {
    pub expand: Conv2d,
    pub merge: Conv2d,
    c_mid: usize,
}

impl SubPixel {
    /// `out_const` starts the merge conv at zero weights with that bias.
    pub fn new(sc: &mut Scope, c_in: usize, c_mid: usize, c_out: usize, out_const: Option<f64>) -> Result<Self> {
        let expand = Conv2d::new(&mut sc.sub("expand"), ConvSpec::new(c_in, 2 * c_mid, (1, 3)).pad((0, 0), (1, 1)))?;
        let spec = ConvSpec::new(c_mid, c_out, (1, 2));
        let merge = match out_const {
            Some(v) => Conv2d::constant(&mut sc.sub("merge"), spec, v)?,
            None => Conv2d::new(&mut sc.sub("merge"), spec)?,
        };
        Ok(Self { expand, merge, c_mid })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.expand.forward(x)?;
        let (b, t, f, _) = h.dims4()?;
        // channel r*C_mid + c moves to frequency 2f + r
        let h = h.reshape((b, t, 2 * f, self.c_mid))?;
        self.merge.forward(&h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Mask,
    Phase,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub dense: DenseBlock,
    pub stages: Vec<SubPixel>,
    /// Norm and activation after every stage but the last.
    pub mids: Vec<(LayerNorm, PRelu)>,
    /// Output activation of the mask path.
    pub out_act: Option<PRelu>,
}

impl Decoder {
    pub fn new(sc: &mut Scope, cfg: &ModelConfig, kind: DecoderKind) -> Result<Self> {
        let c = cfg.channels;
        let n = cfg.n_down();
        // the untrained mask is 1 and the untrained phase residual is 0
        let (c_last, init) = match kind {
            DecoderKind::Mask => (1, 1.0),
            DecoderKind::Phase => (2, 0.0),
        };
        let stages = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                SubPixel::new(&mut sc.sub(&format!("sp{i}")), c, c, if last { c_last } else { c }, last.then_some(init))
            })
            .collect::<Result<_>>()?;
        let mids = (0..n - 1)
            .map(|i| {
                let mut s = sc.sub(&format!("mid{i}"));
                Ok((LayerNorm::new(&mut s.sub("norm"), c)?, PRelu::new(&mut s.sub("act"), c)?))
            })
            .collect::<Result<_>>()?;
        let out_act = match kind {
            DecoderKind::Mask => Some(PRelu::new(&mut sc.sub("out_act"), 1)?),
            DecoderKind::Phase => None,
        };
        Ok(Self {
            kind,
            dense: DenseBlock::new(&mut sc.sub("dense"), c, cfg.dense_depth)?,
            stages,
            mids,
            out_act,
        })
    }

    /// (B, T, F', C) -> (B, T, F, 1) mask or (B, T, F, 2) phase planes.
    pub fn forward(&self, x: &Tensor, tr: &mut Tracer) -> Result<Tensor> {
        let label = match self.kind {
            DecoderKind::Mask => "Mask",
            DecoderKind::Phase => "Phase",
        };
        let mut h = self.dense.forward(x, &mut Tracer::off(), "")?;
        for (i, sp) in self.stages.iter().enumerate() {
            let prev = ctf(&h);
            h = sp.forward(&h)?;
            if let Some((norm, act)) = self.mids.get(i) {
                h = act.forward(&norm.forward(&h)?)?;
            }
            tr.record(&format!("{label} Decoder/Sub-pixel_{}", i + 1), &[prev], ctf(&h));
        }
        if let Some(act) = &self.out_act {
            // non-negative magnitude mask
            h = act.forward(&h)?.relu()?;
        }
        tr.record(&format!("{label} Decoder"), &[ctf(x)], ctf(&h));
        Ok(h)
    }
}
