//! Spectrum encoder (strided frequency downsampling + causal dilated dense
//! block) and the audiogram encoder.

use candle_core::Tensor;

use super::config::ModelConfig;
use super::layers::{gelu, BatchNorm, Conv2d, ConvBlock, ConvSpec, Linear, PRelu};
use super::params::Scope;
use super::trace::{ctf, Tracer};
use crate::error::{ensure, Result};

/// Audiogram thresholds are fed to the network in units of 100 dB HL.
pub const HL_INPUT_SCALE: f64 = 0.01;

fn downsample_spec(c_in: usize, c_out: usize) -> ConvSpec {
    ConvSpec::new(c_in, c_out, (1, 3)).stride(1, 2).pad((0, 0), (1, 1))
}

/// Densely connected causal convolutions: layer i sees the concatenation of
/// the block input and every earlier layer output, kernel 2x3, time
/// dilation 2^i.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub layers: Vec<ConvBlock>,
}

impl DenseBlock {
    pub fn new(sc: &mut Scope, c: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let dil = 1 << i;
                let spec = ConvSpec::new(c * (i + 1), c, (2, 3)).dilation(dil).pad((dil, 0), (1, 1));
                ConvBlock::new(&mut sc.sub(&format!("layer{i}")), spec)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor, tr: &mut Tracer, name: &str) -> Result<Tensor> {
        let mut skip = x.clone();
        let mut out = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            out = layer.forward(&skip)?;
            tr.record(&format!("{name}_{i}"), &[ctf(x)], ctf(&out));
            if i + 1 < self.layers.len() {
                skip = Tensor::cat(&[&out, &skip], 3)?;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SpectrumEncoder {
    pub downs: Vec<ConvBlock>,
    pub dense: DenseBlock,
}

impl SpectrumEncoder {
    pub fn new(sc: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let downs = (0..cfg.n_down())
            .map(|i| ConvBlock::new(&mut sc.sub(&format!("down{i}")), downsample_spec(if i == 0 { 2 } else { c }, c)))
            .collect::<Result<_>>()?;
        Ok(Self {
            downs,
            dense: DenseBlock::new(&mut sc.sub("dense"), c, cfg.dense_depth)?,
        })
    }

    /// (B, T, F, 2) -> (B, T, F', C).
    pub fn forward(&self, x: &Tensor, tr: &mut Tracer) -> Result<Tensor> {
        ensure!(x.dims4()?.3 == 2, "spectrum encoder expects 2 input planes");
        let mut h = x.clone();
        for (i, d) in self.downs.iter().enumerate() {
            let prev = ctf(&h);
            h = d.forward(&h)?;
            tr.record(&format!("Down-sample_{}", i + 1), &[prev], ctf(&h));
        }
        let out = self.dense.forward(&h, tr, "DilatedDense")?;
        tr.record("Spectrum Encoder", &[ctf(x)], ctf(&out));
        Ok(out)
    }
}

/// Conv, batch norm, PReLU over the single-row audiogram plane.
#[derive(Debug, Clone)]
pub struct HlConv {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub act: PRelu,
}

/// Dense audiogram (B, F) -> code (B, F', C).
#[derive(Debug, Clone)]
pub struct AudiogramEncoder {
    pub expand: Linear,
    pub convs: Vec<HlConv>,
    pub project: Linear,
    n_bins: usize,
}

impl AudiogramEncoder {
    pub fn new(sc: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let f = cfg.n_bins();
        let mut chans = vec![4, 16, 64];
        while chans.len() < cfg.n_down() + 1 {
            chans.push(64);
        }
        let convs = (0..cfg.n_down())
            .map(|i| {
                let mut s = sc.sub(&format!("conv{i}"));
                Ok(HlConv {
                    conv: Conv2d::new(&mut s.sub("conv"), downsample_spec(chans[i], chans[i + 1]))?,
                    norm: BatchNorm::new(&mut s.sub("norm"), chans[i + 1])?,
                    act: PRelu::new(&mut s.sub("act"), chans[i + 1])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            expand: Linear::new(&mut sc.sub("expand"), f, 4 * f, true)?,
            convs,
            project: Linear::new(&mut sc.sub("project"), *chans.last().unwrap(), cfg.channels, true)?,
            n_bins: f,
        })
    }

    pub fn forward(&self, hl: &Tensor, train: bool, tr: &mut Tracer) -> Result<Tensor> {
        let (b, f) = hl.dims2()?;
        ensure!(f == self.n_bins, "dense audiogram has {f} bins, expected {}", self.n_bins);
        tr.record("HL-Linear", &[vec![1, 6]], vec![1, f]);
        let h = self.expand.forward(&(hl * HL_INPUT_SCALE)?)?;
        tr.record("Linear_1", &[vec![1, f]], vec![1, 4 * f]);
        // (B, 4F) -> 4 x 1 x F, stored channel-last as (B, 1, F, 4)
        let mut h = gelu(&h)?.reshape((b, 4, f))?.transpose(1, 2)?.contiguous()?.unsqueeze(1)?;
        tr.record("Permute_1", &[vec![1, 4 * f]], ctf(&h));
        for (i, c) in self.convs.iter().enumerate() {
            let prev = ctf(&h);
            h = c.act.forward(&c.norm.forward(&c.conv.forward(&h)?, train)?)?;
            tr.record(&format!("Conv2d_{}", i + 1), &[prev], ctf(&h));
        }
        let prev = ctf(&h);
        let h = h.squeeze(1)?;
        tr.record("Permute_2", &[prev], h.dims()[1..].to_vec());
        let out = self.project.forward(&h)?;
        tr.record("Linear_2", &[h.dims()[1..].to_vec()], out.dims()[1..].to_vec());
        tr.record("Audiogram Encoder", &[vec![1, 6]], out.dims()[1..].to_vec());
        Ok(out)
    }
}
