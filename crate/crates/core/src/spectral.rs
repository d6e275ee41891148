//! STFT analysis/synthesis, sub-band SPL measurement and mask/phase
//! spectrum reconstruction.
//!
//! Framing pads `frame_len / 2` reflected samples at the start only and
//! zero-fills the tail up to the next full frame, so frame `l` never reads
//! input beyond sample `l * hop + frame_len / 2`.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FRAME_LEN: usize = 512;
pub const DEFAULT_HOP: usize = 256;
/// Digital RMS 1.0 corresponds to this many dB SPL.
pub const DEFAULT_CALIBRATION_DB: f64 = 100.0;
/// Magnitude floor used inside logarithms.
pub const MAG_FLOOR: f64 = 1e-5;
const POWER_FLOOR_DB: f64 = -100.0;

/// Mono 16 kHz audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(crate::Error::validation(format!("sample {i} is not finite")));
        }
        Ok(Self { samples })
    }

    pub fn from_f64(samples: &[f64]) -> Result<Self> {
        Self::new(samples.iter().map(|&s| s as f32).collect())
    }

    pub fn zeros(len: usize) -> Self {
        Self { samples: vec![0.0; len] }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann.
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: DEFAULT_FRAME_LEN,
            hop: DEFAULT_HOP,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(frame_len: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            frame_len,
            hop,
            window: Window::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.frame_len >= 2 && self.frame_len % 2 == 0,
            "frame length {} must be even and >= 2",
            self.frame_len
        );
        ensure!(
            self.hop >= 1 && self.hop <= self.frame_len,
            "hop {} must be in [1, {}]",
            self.hop,
            self.frame_len
        );
        ensure!(
            self.frame_len % self.hop == 0,
            "hop {} must divide the frame length {}",
            self.hop,
            self.frame_len
        );
        // constant overlap-add of the analysis window
        let w = self.window.coefficients(self.frame_len);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| w.iter().skip(n).step_by(self.hop).sum())
            .collect();
        let first = sums[0];
        ensure!(
            first > 0.0 && sums.iter().all(|s| (s - first).abs() <= 1e-9 * first),
            "window is not constant-overlap-add at hop {}",
            self.hop
        );
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn pad_start(&self) -> usize {
        self.frame_len / 2
    }

    /// Frames produced for `len` input samples.
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + self.pad_start();
        if padded <= self.frame_len {
            1
        } else {
            1 + (padded - self.frame_len).div_ceil(self.hop)
        }
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * SAMPLE_RATE as f64 / self.frame_len as f64
    }

    /// Frame rate in frames per second.
    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.hop as f64
    }
}

/// A real-valued `T x F` time-frequency array, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TfGrid {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f64>,
}

impl TfGrid {
    pub fn new(n_frames: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == n_frames * n_bins,
            "grid data length {} != {n_frames} x {n_bins}",
            data.len()
        );
        Ok(Self { n_frames, n_bins, data })
    }

    pub fn filled(n_frames: usize, n_bins: usize, value: f64) -> Self {
        Self {
            n_frames,
            n_bins,
            data: vec![value; n_frames * n_bins],
        }
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.data[l * self.n_bins + k]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames, self.n_bins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: TfGrid,
    pub imag: TfGrid,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn zeros(n_frames: usize, config: StftConfig) -> Self {
        let f = config.n_bins();
        Self {
            real: TfGrid::filled(n_frames, f, 0.0),
            imag: TfGrid::filled(n_frames, f, 0.0),
            config,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.real.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.real.n_bins
    }

    pub fn magnitude(&self) -> TfGrid {
        let data = self
            .real
            .data
            .iter()
            .zip(&self.imag.data)
            .map(|(r, i)| r.hypot(*i))
            .collect();
        TfGrid {
            n_frames: self.n_frames(),
            n_bins: self.n_bins(),
            data,
        }
    }

    /// Multiplies every bin of every frame by `gain(l, k)`.
    pub fn scale_by(&mut self, gain: impl Fn(usize, usize) -> f64) {
        let f = self.n_bins();
        for (idx, (r, i)) in self.real.data.iter_mut().zip(self.imag.data.iter_mut()).enumerate() {
            let g = gain(idx / f, idx % f);
            *r *= g;
            *i *= g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.real.data.iter().chain(&self.imag.data).all(|v| v.is_finite())
    }
}

/// Reusable forward/inverse STFT engine for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: config.window.coefficients(config.frame_len),
            forward: planner.plan_fft_forward(config.frame_len),
            inverse: planner.plan_fft_inverse(config.frame_len),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Reflect-pads the start and zero-fills the tail of `x`.
    pub fn padded_frames_source(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let pad = cfg.pad_start();
        ensure!(!x.is_empty(), "cannot analyse an empty waveform");
        ensure!(
            x.len() > pad,
            "waveform of {} samples is too short for a {}-sample frame",
            x.len(),
            cfg.frame_len
        );
        let t = cfg.n_frames(x.len());
        let total = (t - 1) * cfg.hop + cfg.frame_len;
        let mut out = Vec::with_capacity(total);
        out.extend((1..=pad).rev().map(|i| x[i]));
        out.extend_from_slice(x);
        out.resize(total, 0.0);
        Ok(out)
    }

    pub fn analyse(&self, x: &[f64]) -> Result<ComplexSpectrogram> {
        let cfg = self.config;
        let padded = self.padded_frames_source(x)?;
        let t = cfg.n_frames(x.len());
        let n = cfg.frame_len;
        let f = cfg.n_bins();
        let mut spec = ComplexSpectrogram::zeros(t, cfg);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for l in 0..t {
            let frame = &padded[l * cfg.hop..l * cfg.hop + n];
            for ((b, s), w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..f {
                spec.real.data[l * f + k] = buf[k].re;
                spec.imag.data[l * f + k] = buf[k].im;
            }
        }
        Ok(spec)
    }

    /// Windowed overlap-add normalised by the summed squared window.
    pub fn synthesise(&self, spec: &ComplexSpectrogram, out_len: usize) -> Result<Vec<f64>> {
        let cfg = self.config;
        ensure!(
            spec.config == cfg,
            "spectrogram was produced with {:?}, not {:?}",
            spec.config,
            cfg
        );
        let n = cfg.frame_len;
        let f = cfg.n_bins();
        ensure!(spec.n_bins() == f, "spectrogram has {} bins, expected {f}", spec.n_bins());
        let t = spec.n_frames();
        let total = (t.max(1) - 1) * cfg.hop + n;
        let mut acc = vec![0.0; total];
        let mut env = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for l in 0..t {
            for k in 0..f {
                buf[k] = Complex::new(spec.real.data[l * f + k], spec.imag.data[l * f + k]);
            }
            // Hermitian completion; imaginary parts of DC and Nyquist are ignored.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for k in 1..n / 2 {
                buf[n - k] = buf[k].conj();
            }
            self.inverse.process(&mut buf);
            let off = l * cfg.hop;
            for (i, (b, w)) in buf.iter().zip(&self.window).enumerate() {
                acc[off + i] += b.re / n as f64 * w;
                env[off + i] += w * w;
            }
        }
        let pad = cfg.pad_start();
        Ok((0..out_len)
            .map(|i| {
                let j = i + pad;
                if j < total && env[j] > 1e-10 {
                    acc[j] / env[j]
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Parseval-normalised mean-square power of the bins in `band` per frame.
    pub fn band_power(&self, spec: &ComplexSpectrogram, band: Range<usize>) -> Result<Vec<f64>> {
        let f = spec.n_bins();
        ensure!(
            band.start < band.end && band.end <= f,
            "band {:?} is empty or outside [0, {f})",
            band
        );
        let n = self.config.frame_len;
        let wsq: f64 = self.window.iter().map(|w| w * w).sum();
        let norm = 1.0 / (n as f64 * wsq);
        Ok((0..spec.n_frames())
            .map(|l| {
                band.clone()
                    .map(|k| {
                        let side = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                        let (r, i) = (spec.real.get(l, k), spec.imag.get(l, k));
                        side * (r * r + i * i)
                    })
                    .sum::<f64>()
                    * norm
            })
            .collect())
    }
}

pub fn stft(x: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(*cfg)?.analyse(&x.to_f64())
}

pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, out_len: usize) -> Result<Waveform> {
    let y = Stft::new(*cfg)?.synthesise(spec, out_len)?;
    Waveform::from_f64(&y)
}

/// Converts a mean-square power to dB SPL with the -100 dB floor applied
/// before calibration.
pub fn power_to_spl(power: f64, calib_db: f64) -> f64 {
    let db = if power > 0.0 { 10.0 * power.log10() } else { POWER_FLOOR_DB };
    db.max(POWER_FLOOR_DB) + calib_db
}

/// Per-frame SPL of a band of bins: the band's mean-square signal power in
/// dB re digital full scale (RMS 1.0) plus `calib_db`.
pub fn band_spl(spec: &ComplexSpectrogram, band: Range<usize>, calib_db: f64) -> Result<Vec<f64>> {
    let engine = Stft::new(spec.config)?;
    Ok(engine
        .band_power(spec, band)?
        .into_iter()
        .map(|p| power_to_spl(p, calib_db))
        .collect())
}

/// Mask-and-phase reconstruction: `|out| = mask * |noisy|`, angle taken from
/// `atan2(phase_imag, phase_real)` (0 where both are zero).
pub fn reconstruct_spectrum(
    mask: &TfGrid,
    noisy: &ComplexSpectrogram,
    phase_real: &TfGrid,
    phase_imag: &TfGrid,
) -> Result<ComplexSpectrogram> {
    let shape = noisy.real.shape();
    ensure!(
        mask.shape() == shape && phase_real.shape() == shape && phase_imag.shape() == shape,
        "shape mismatch: mask {:?}, noisy {:?}, phase {:?}/{:?}",
        mask.shape(),
        shape,
        phase_real.shape(),
        phase_imag.shape()
    );
    ensure!(
        mask.data.iter().all(|m| *m >= 0.0 && m.is_finite()),
        "mask must be finite and non-negative"
    );
    let mut out = ComplexSpectrogram::zeros(shape.0, noisy.config);
    for idx in 0..mask.data.len() {
        let mag = mask.data[idx] * noisy.real.data[idx].hypot(noisy.imag.data[idx]);
        let (pr, pi) = (phase_real.data[idx], phase_imag.data[idx]);
        let phi = if pr == 0.0 && pi == 0.0 { 0.0 } else { pi.atan2(pr) };
        out.real.data[idx] = mag * phi.cos();
        out.imag.data[idx] = mag * phi.sin();
    }
    Ok(out)
}

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn mean_square(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / x.len() as f64
}
