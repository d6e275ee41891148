//! Metric discriminator D(X, X^, HL) -> [0, 1]: compressed magnitude planes
//! of reference and estimate plus the dense audiogram plane, four strided
//! conv / instance-norm / PReLU blocks, global average pool, two linears,
//! sigmoid.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::dsp::{power, TensorStft};
use super::encoder::HL_INPUT_SCALE;
use super::layers::{sigmoid, Conv2d, ConvSpec, InstanceNorm, Linear, PRelu};
use super::params::Scope;
use crate::error::{ensure, Result};

pub const DISC_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Keeps the compressed-magnitude derivative finite at zero power.
const POWER_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub compress_exponent: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 256,
            compress_exponent: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
    pub act: PRelu,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub stft: TensorStft,
    pub blocks: Vec<DiscBlock>,
    pub hidden: Linear,
    pub hidden_act: PRelu,
    pub out: Linear,
    compress_exponent: f64,
}

impl Discriminator {
    pub fn new(sc: &mut Scope, cfg: &DiscConfig, dtype: DType) -> Result<Self> {
        let mut c_in = 3;
        let mut blocks = Vec::new();
        for (i, &c) in DISC_CHANNELS.iter().enumerate() {
            let mut s = sc.sub(&format!("block{i}"));
            blocks.push(DiscBlock {
                conv: Conv2d::new(&mut s.sub("conv"), ConvSpec::new(c_in, c, (3, 3)).stride(2, 2).pad((1, 1), (1, 1)))?,
                norm: InstanceNorm::new(&mut s.sub("norm"), c)?,
                act: PRelu::new(&mut s.sub("act"), c)?,
            });
            c_in = c;
        }
        Ok(Self {
            stft: TensorStft::new(cfg.n_fft, cfg.hop, dtype)?,
            blocks,
            hidden: Linear::new(&mut sc.sub("hidden"), c_in, 64, true)?,
            hidden_act: PRelu::new(&mut sc.sub("hidden_act"), 64)?,
            out: Linear::new(&mut sc.sub("out"), 64, 1, true)?,
            compress_exponent: cfg.compress_exponent,
        })
    }

    fn compressed_magnitude(&self, x: &Tensor) -> Result<Tensor> {
        let (re, im) = self.stft.forward(x)?;
        Ok((power(&re, &im)? + POWER_EPS)?.powf(self.compress_exponent / 2.0)?)
    }

    /// `reference`, `estimate`: (B, L); `hl`: dense audiogram (B, F) in dB HL.
    /// Returns (B) scores.
    pub fn forward(&self, reference: &Tensor, estimate: &Tensor, hl: &Tensor) -> Result<Tensor> {
        ensure!(reference.dims() == estimate.dims(), "reference {:?} and estimate {:?} differ in shape", reference.dims(), estimate.dims());
        let r = self.compressed_magnitude(reference)?;
        let e = self.compressed_magnitude(estimate)?;
        let (b, t, f) = r.dims3()?;
        ensure!(hl.dims() == [b, f], "audiogram plane {:?} does not match ({b}, {f})", hl.dims());
        let a = (hl * HL_INPUT_SCALE)?.unsqueeze(1)?.broadcast_as((b, t, f))?;
        let mut h = Tensor::stack(&[&r, &e, &a], 3)?;
        for blk in &self.blocks {
            h = blk.act.forward(&blk.norm.forward(&blk.conv.forward(&h)?)?)?;
        }
        let pooled = h.mean((1, 2))?;
        let z = self.out.forward(&self.hidden_act.forward(&self.hidden.forward(&pooled)?)?)?;
        sigmoid(&z.squeeze(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck;
    use crate::model::params::ParamStore;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn small() -> DiscConfig {
        DiscConfig {
            n_fft: 64,
            hop: 32,
            compress_exponent: 0.3,
        }
    }

    fn signal(seed: u64, b: usize, len: usize) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..b * len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn planes(b: usize, f: usize) -> Tensor {
        let v: Vec<f64> = (0..b * f).map(|i| (i % 90) as f64).collect();
        Tensor::from_vec(v, (b, f), &Device::Cpu).unwrap()
    }

    #[test]
    fn scores_are_bounded_and_order_sensitive() {
        let mut ps = ParamStore::new(3, DType::F64);
        let d = Discriminator::new(&mut Scope::new(&mut ps, "d"), &small(), DType::F64).unwrap();
        let x = Tensor::from_vec(signal(1, 3, 256), (3, 256), &Device::Cpu).unwrap();
        let y = Tensor::from_vec(signal(2, 3, 256), (3, 256), &Device::Cpu).unwrap();
        let hl = planes(3, 33);
        let a: Vec<f64> = d.forward(&x, &y, &hl).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = d.forward(&y, &x, &hl).unwrap().to_vec1().unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().chain(&b).all(|s| (0.0..=1.0).contains(s)));
        assert!(a.iter().zip(&b).any(|(p, q)| p != q));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = ParamStore::new(3, DType::F64);
        let d = Discriminator::new(&mut Scope::new(&mut ps, "d"), &small(), DType::F64).unwrap();
        let x = Tensor::zeros((1, 256), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::zeros((1, 200), DType::F64, &Device::Cpu).unwrap();
        assert!(d.forward(&x, &y, &planes(1, 33)).unwrap_err().is_validation());
    }

    #[test]
    fn estimate_gradient_matches_finite_differences() {
        let mut ps = ParamStore::new(4, DType::F64);
        let d = Discriminator::new(&mut Scope::new(&mut ps, "d"), &small(), DType::F64).unwrap();
        let x = Tensor::from_vec(signal(5, 2, 160), (2, 160), &Device::Cpu).unwrap();
        let est = Var::from_vec(signal(6, 2, 160), (2, 160), &Device::Cpu).unwrap();
        let hl = planes(2, 33);
        let f = || Ok(d.forward(&x, est.as_tensor(), &hl)?.sum_all()?);
        let r = gradcheck::check(&[("est".into(), est.clone())], f, 60, 1e-6, 1).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let vars: Vec<(String, Var)> = ps.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let r = gradcheck::check(&vars, f, 3, 1e-6, 2).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
