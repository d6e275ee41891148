//! Training objectives. Every loss takes batched (B, L) waveform tensors and
//! returns a differentiable scalar; `*_wave` helpers evaluate single
//! waveforms in float64.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::discriminator::Discriminator;
use crate::model::dsp::{power, TensorStft};
use crate::spectral::Waveform;

/// Magnitudes are floored here before any ratio or logarithm.
pub const MAG_FLOOR: f64 = 1e-5;
/// Probabilities entering the focal loss are clamped to [eps, 1 - eps].
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Adversarial term.
    pub alpha: f64,
    /// Perceptual term.
    pub lambda: f64,
    /// Multi-resolution STFT term.
    pub mu: f64,
    pub focal_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.3,
            mu: 1.0,
            focal_weight: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("lambda", self.lambda), ("mu", self.mu), ("focal_weight", self.focal_weight)] {
            ensure!(w.is_finite() && w >= 0.0, "loss weight {name} = {w} must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftResolutionSet(pub Vec<(usize, usize)>);

impl Default for StftResolutionSet {
    fn default() -> Self {
        Self(vec![(1024, 512), (512, 256), (256, 128)])
    }
}

impl StftResolutionSet {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.0.is_empty(), "resolution set is empty");
        for &(frame, hop) in &self.0 {
            ensure!(hop >= 1 && hop <= frame, "resolution ({frame}, {hop}) needs 1 <= hop <= frame");
        }
        Ok(())
    }
}

fn same_shape(x: &Tensor, y: &Tensor) -> Result<(usize, usize)> {
    let (b, l) = x.dims2()?;
    ensure!(y.dims() == [b, l], "signal shapes differ: {:?} vs {:?}", x.dims(), y.dims());
    Ok((b, l))
}

/// Floored magnitude max(|X|, MAG_FLOOR); the gradient is zero below the floor.
fn floored_magnitude(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    Ok(power(re, im)?.maximum(MAG_FLOOR * MAG_FLOOR)?.sqrt()?)
}

/// Spectral convergence and log-magnitude terms for one resolution from
/// (B, T, F) spectra, averaged over the batch: (L_sc, L_mag).
pub fn stft_terms(x_re: &Tensor, x_im: &Tensor, y_re: &Tensor, y_im: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, t, _) = x_re.dims3()?;
    let mx = floored_magnitude(x_re, x_im)?;
    let my = floored_magnitude(y_re, y_im)?;
    let num = (&mx - &my)?.sqr()?.sum((1, 2))?.sqrt()?;
    let den = mx.sqr()?.sum((1, 2))?.sqrt()?;
    let sc = (num / den)?.mean_all()?;
    let mag = ((mx.log()? - my.log()?)?.abs()?.sum((1, 2))? / t as f64)?.mean_all()?;
    Ok((sc, mag))
}

/// Mean over resolutions of 0.5 * (L_sc + L_mag).
pub fn multires_stft_loss(x: &Tensor, y: &Tensor, res: &StftResolutionSet) -> Result<Tensor> {
    same_shape(x, y)?;
    res.validate()?;
    let mut total: Option<Tensor> = None;
    for &(frame, hop) in &res.0 {
        let stft = TensorStft::new(frame, hop, x.dtype())?;
        let (xr, xi) = stft.forward(x)?;
        let (yr, yi) = stft.forward(y)?;
        let (sc, mag) = stft_terms(&xr, &xi, &yr, &yi)?;
        let term = ((sc + mag)? * 0.5)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok((total.expect("non-empty set") / res.0.len() as f64)?)
}

/// Differentiable stand-in for a perceptual quality loss.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;
    fn loss(&self, x: &Tensor, y: &Tensor) -> Result<Tensor>;
}

/// Mean squared difference of floored natural-log magnitudes.
#[derive(Debug, Clone)]
pub struct LogSpectralDistance {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for LogSpectralDistance {
    fn default() -> Self {
        Self { n_fft: 512, hop: 256 }
    }
}

impl PerceptualLoss for LogSpectralDistance {
    fn name(&self) -> &str {
        "lsd"
    }

    fn loss(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        same_shape(x, y)?;
        let stft = TensorStft::new(self.n_fft, self.hop, x.dtype())?;
        let (xr, xi) = stft.forward(x)?;
        let (yr, yi) = stft.forward(y)?;
        let d = (floored_magnitude(&xr, &xi)?.log()? - floored_magnitude(&yr, &yi)?.log()?)?;
        Ok(d.sqr()?.mean_all()?)
    }
}

/// Mean over frames of -(1 - p_t)^gamma * log(p_t), p_t the probability of
/// the labelled class. `labels` holds 0/1 values with the shape of `probs`.
pub fn focal_vad_loss(probs: &Tensor, labels: &Tensor, gamma: f64) -> Result<Tensor> {
    ensure!(probs.dims() == labels.dims(), "vad shapes differ: {:?} vs {:?}", probs.dims(), labels.dims());
    ensure!(gamma.is_finite() && gamma >= 0.0, "focal gamma {gamma} must be non-negative");
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let labels = labels.to_dtype(p.dtype())?;
    // p_t = y p + (1 - y)(1 - p)
    let pt = ((&labels * &p)? + ((1.0 - &labels)? * (1.0 - &p)?)?)?;
    let w = (1.0 - &pt)?.powf(gamma)?;
    Ok((w * pt.log()?)?.neg()?.mean_all()?)
}

/// Term values of one generator evaluation, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adversarial: f64,
    pub perceptual: f64,
    pub stft: f64,
    pub focal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.adversarial, self.perceptual, self.stft, self.focal, self.total].iter().all(|v| v.is_finite())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Everything the generator objective reads for one batch.
pub struct GeneratorInputs<'a> {
    /// Training target (B, L).
    pub target: &'a Tensor,
    /// Network output (B, L).
    pub estimate: &'a Tensor,
    /// Dense audiograms (B, F).
    pub audiogram: &'a Tensor,
    /// Per-frame 0/1 speech labels (B, T).
    pub vad_labels: &'a Tensor,
    /// Per-frame probabilities (B, T).
    pub vad_probs: &'a Tensor,
}

/// alpha * E[(D(X, X^, HL) - 1)^2] + lambda * perceptual + mu * stft + focal_weight * focal.
/// The discriminator is only read; the caller must not apply its gradients.
pub fn generator_loss(
    inp: &GeneratorInputs,
    disc: &Discriminator,
    perceptual: &dyn PerceptualLoss,
    res: &StftResolutionSet,
    w: &LossWeights,
    gamma: f64,
) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    same_shape(inp.target, inp.estimate)?;
    let adv = (disc.forward(inp.target, inp.estimate, inp.audiogram)? - 1.0)?.sqr()?.mean_all()?;
    let per = perceptual.loss(inp.target, inp.estimate)?;
    let stft = multires_stft_loss(inp.target, inp.estimate, res)?;
    let focal = focal_vad_loss(inp.vad_probs, inp.vad_labels, gamma)?;
    let total = ((((&adv * w.alpha)? + (&per * w.lambda)?)? + (&stft * w.mu)?)? + (&focal * w.focal_weight)?)?;
    let breakdown = LossBreakdown {
        adversarial: scalar(&adv)?,
        perceptual: scalar(&per)?,
        stft: scalar(&stft)?,
        focal: scalar(&focal)?,
        total: scalar(&total)?,
    };
    Ok((total, breakdown))
}

/// E[(D(X, X, HL) - 1)^2] + E[(D(X, X^, HL) - q)^2]; `oracle` (B) is data.
pub fn discriminator_loss(target: &Tensor, estimate: &Tensor, audiogram: &Tensor, disc: &Discriminator, oracle: &Tensor) -> Result<Tensor> {
    let (b, _) = same_shape(target, estimate)?;
    ensure!(oracle.dims() == [b], "oracle scores {:?} do not match batch {b}", oracle.dims());
    let real = (disc.forward(target, target, audiogram)? - 1.0)?.sqr()?.mean_all()?;
    let fake = (disc.forward(target, &estimate.detach(), audiogram)? - oracle.detach())?.sqr()?.mean_all()?;
    Ok((real + fake)?)
}

fn wave_tensor(x: &Waveform) -> Result<Tensor> {
    Ok(Tensor::from_vec(x.samples().to_vec(), (1, x.len()), &Device::Cpu)?)
}

/// Single-pair multi-resolution STFT loss in float64.
pub fn multires_stft_loss_wave(x: &Waveform, y: &Waveform, res: &StftResolutionSet) -> Result<f64> {
    ensure!(x.len() == y.len(), "signal lengths differ: {} vs {}", x.len(), y.len());
    scalar(&multires_stft_loss(&wave_tensor(x)?, &wave_tensor(y)?, res)?)
}

/// Single-pair perceptual loss in float64.
pub fn perceptual_loss_wave(loss: &dyn PerceptualLoss, x: &Waveform, y: &Waveform) -> Result<f64> {
    ensure!(x.len() == y.len(), "signal lengths differ: {} vs {}", x.len(), y.len());
    scalar(&loss.loss(&wave_tensor(x)?, &wave_tensor(y)?)?)
}
