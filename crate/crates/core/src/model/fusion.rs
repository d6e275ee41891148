//! Audiogram-conditioned fusion: per-stage affine modulation heads and the
//! frequency/time fusion stages of one AMFT block.
//!
//! A stage computes
//! `Z' = Conformer(Z*(1+g1)+b1)*a1 + Z` and `Z^ = MLP(Z'*(1+g2)+b2)*a2 + Z'`
//! with the modulation arrays broadcast over the sequence-major axis.

use candle_core::{DType, Device, Tensor, D};

use super::conformer::Conformer;
use super::layers::{gelu, Linear};
use super::params::Scope;
use crate::error::{ensure, Result};

/// Six (B, F', C) arrays: scale, shift and gate for the Conformer and MLP.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub gamma1: Tensor,
    pub beta1: Tensor,
    pub alpha1: Tensor,
    pub gamma2: Tensor,
    pub beta2: Tensor,
    pub alpha2: Tensor,
}

impl Modulation {
    fn filled(b: usize, f: usize, c: usize, gate: f64, dtype: DType) -> Result<Self> {
        let z = Tensor::zeros((b, f, c), dtype, &Device::Cpu)?;
        let g = (z.ones_like()? * gate)?;
        Ok(Self {
            gamma1: z.clone(),
            beta1: z.clone(),
            alpha1: g.clone(),
            gamma2: z.clone(),
            beta2: z,
            alpha2: g,
        })
    }

    /// g = b = 0, a = 1: the stage reduces to the plain residual stack.
    pub fn identity(b: usize, f: usize, c: usize, dtype: DType) -> Result<Self> {
        Self::filled(b, f, c, 1.0, dtype)
    }

    /// a = 0: both branches are gated off.
    pub fn closed(b: usize, f: usize, c: usize, dtype: DType) -> Result<Self> {
        Self::filled(b, f, c, 0.0, dtype)
    }

    pub fn arrays(&self) -> [&Tensor; 6] {
        [&self.gamma1, &self.beta1, &self.alpha1, &self.gamma2, &self.beta2, &self.alpha2]
    }
}

/// SiLU followed by one linear map C -> 6C. Weights start at zero with unit
/// gate bias, so an untrained head yields the identity modulation.
#[derive(Debug, Clone)]
pub struct ModulationHead {
    pub linear: Linear,
    channels: usize,
}

impl ModulationHead {
    pub fn new(sc: &mut Scope, c: usize) -> Result<Self> {
        let mut bias = vec![0.0; 6 * c];
        for slot in [2, 5] {
            bias[slot * c..(slot + 1) * c].fill(1.0);
        }
        Ok(Self {
            linear: Linear::with_const(sc, c, 6 * c, &bias)?,
            channels: c,
        })
    }

    pub fn forward(&self, code: &Tensor) -> Result<Modulation> {
        let p = self.linear.forward(&code.silu()?)?;
        let c = self.channels;
        let part = |i: usize| p.narrow(D::Minus1, i * c, c);
        Ok(Modulation {
            gamma1: part(0)?,
            beta1: part(1)?,
            alpha1: part(2)?,
            gamma2: part(3)?,
            beta2: part(4)?,
            alpha2: part(5)?,
        })
    }
}

/// Two linear layers with hidden size 2C and GELU.
#[derive(Debug, Clone)]
pub struct StageMlp {
    pub up: Linear,
    pub down: Linear,
}

impl StageMlp {
    pub fn new(sc: &mut Scope, c: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut sc.sub("up"), c, 2 * c, true)?,
            down: Linear::new(&mut sc.sub("down"), 2 * c, c, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&gelu(&self.up.forward(x)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Sequences run over frequency within each frame; unmasked attention.
    Frequency,
    /// Sequences run over time within each bin; causal attention.
    Time,
}

#[derive(Debug, Clone)]
pub struct FusionStage {
    pub axis: Axis,
    pub conformer: Conformer,
    pub mlp: StageMlp,
    pub head: ModulationHead,
}

fn modulate(z: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(z.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(beta)?)
}

impl FusionStage {
    pub fn new(sc: &mut Scope, axis: Axis, c: usize, heads: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            axis,
            conformer: Conformer::new(&mut sc.sub("conformer"), c, heads, kernel, axis == Axis::Time)?,
            mlp: StageMlp::new(&mut sc.sub("mlp"), c)?,
            head: ModulationHead::new(&mut sc.sub("head"), c)?,
        })
    }

    /// `z`: (B, T, F', C); `code`: (B, F', C).
    pub fn forward(&self, z: &Tensor, code: &Tensor) -> Result<Tensor> {
        let m = self.head.forward(code)?;
        self.forward_with(z, &m)
    }

    /// Sequence-major view of `z`: (B, T, F', C) for frequency, (B, F', T, C) for time.
    pub fn to_sequences(&self, z: &Tensor) -> Result<Tensor> {
        Ok(match self.axis {
            Axis::Frequency => z.clone(),
            Axis::Time => z.transpose(1, 2)?.contiguous()?,
        })
    }

    pub fn from_sequences(&self, zs: &Tensor) -> Result<Tensor> {
        self.to_sequences(zs)
    }

    /// Applies the stage with explicit modulation arrays.
    pub fn forward_with(&self, z: &Tensor, m: &Modulation) -> Result<Tensor> {
        let (b, _, f, c) = z.dims4()?;
        for a in m.arrays() {
            ensure!(a.dims() == [b, f, c], "modulation shape {:?} does not match ({b}, {f}, {c})", a.dims());
        }
        let pshape = match self.axis {
            Axis::Frequency => (b, 1, f, c),
            Axis::Time => (b, f, 1, c),
        };
        let p = |x: &Tensor| x.reshape(pshape);
        let zs = self.to_sequences(z)?;
        let (_, n1, n2, _) = zs.dims4()?;
        let h = modulate(&zs, &p(&m.gamma1)?, &p(&m.beta1)?)?.reshape((b * n1, n2, c))?;
        let h = self.conformer.forward(&h)?.reshape((b, n1, n2, c))?;
        let z1 = (h.broadcast_mul(&p(&m.alpha1)?)? + &zs)?;
        let h = self.mlp.forward(&modulate(&z1, &p(&m.gamma2)?, &p(&m.beta2)?)?)?;
        let z2 = (h.broadcast_mul(&p(&m.alpha2)?)? + &z1)?;
        self.from_sequences(&z2)
    }
}

/// Frequency-stage followed by time-stage fusion, each with its own head.
#[derive(Debug, Clone)]
pub struct AmftBlock {
    pub freq: FusionStage,
    pub time: FusionStage,
}

impl AmftBlock {
    pub fn new(sc: &mut Scope, c: usize, heads: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            freq: FusionStage::new(&mut sc.sub("freq"), Axis::Frequency, c, heads, kernel)?,
            time: FusionStage::new(&mut sc.sub("time"), Axis::Time, c, heads, kernel)?,
        })
    }

    pub fn forward(&self, z: &Tensor, code: &Tensor) -> Result<Tensor> {
        self.time.forward(&self.freq.forward(z, code)?, code)
    }
}
