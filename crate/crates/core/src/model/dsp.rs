//! STFT and inverse STFT as tensor ops (DFT by matmul), with the same
//! framing as [`crate::spectral::Stft`]: reflect padding of N/2 at the start,
//! zero fill to a whole frame grid at the end, periodic Hann window.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Result};
use crate::spectral::Window;

#[derive(Debug, Clone)]
pub struct TensorStft {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<f64>,
    /// (N, F) window-weighted analysis bases.
    cos_w: Tensor,
    sin_w: Tensor,
    /// (F, N) inverse bases including the one/two-sided weights and 1/N.
    icos: Tensor,
    isin: Tensor,
    /// (N) synthesis window.
    win: Tensor,
}

impl TensorStft {
    pub fn new(n_fft: usize, hop: usize, dtype: DType) -> Result<Self> {
        ensure!(n_fft % 2 == 0 && hop > 0 && n_fft % hop == 0, "invalid STFT geometry {n_fft}/{hop}");
        let dev = Device::Cpu;
        let f = n_fft / 2 + 1;
        let window = Window::Hann.coefficients(n_fft);
        let mut cw = vec![0.0; n_fft * f];
        let mut sw = vec![0.0; n_fft * f];
        let mut ic = vec![0.0; f * n_fft];
        let mut is = vec![0.0; f * n_fft];
        for n in 0..n_fft {
            for k in 0..f {
                // reduce k*n mod N before the trig call to keep the bases exact
                let ang = 2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                let (s, c) = ang.sin_cos();
                cw[n * f + k] = window[n] * c;
                sw[n * f + k] = -window[n] * s;
                let side = if k == 0 || k == n_fft / 2 { 1.0 } else { 2.0 };
                ic[k * n_fft + n] = side * c / n_fft as f64;
                is[k * n_fft + n] = if side == 1.0 { 0.0 } else { -side * s / n_fft as f64 };
            }
        }
        let t = |v: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?)
        };
        Ok(Self {
            n_fft,
            hop,
            cos_w: t(cw, (n_fft, f))?,
            sin_w: t(sw, (n_fft, f))?,
            icos: t(ic, (f, n_fft))?,
            isin: t(is, (f, n_fft))?,
            win: Tensor::from_vec(window.clone(), n_fft, &dev)?.to_dtype(dtype)?,
            window,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        let half = self.n_fft / 2;
        if len + half <= self.n_fft {
            1
        } else {
            1 + (len + half - self.n_fft).div_ceil(self.hop)
        }
    }

    /// (B, L) waveform -> (real, imag), each (B, T, F).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, len) = x.dims2()?;
        let half = self.n_fft / 2;
        ensure!(len > half, "waveform of {len} samples is too short for a {}-point frame", self.n_fft);
        let t = self.n_frames(len);
        let total = (t - 1) * self.hop + self.n_fft;
        let idx: Vec<u32> = (0..half).map(|i| (half - i) as u32).collect();
        let idx = Tensor::from_vec(idx, half, x.device())?;
        let padded = Tensor::cat(&[&x.index_select(&idx, 1)?, x], 1)?.pad_with_zeros(1, 0, total - half - len)?;
        let r = self.n_fft / self.hop;
        let blocks = padded.reshape((b, total / self.hop, self.hop))?;
        let parts: Vec<Tensor> = (0..r).map(|j| blocks.narrow(1, j, t)).collect::<candle_core::Result<_>>()?;
        let frames = Tensor::cat(&parts, 2)?.reshape((b * t, self.n_fft))?;
        let f = self.n_bins();
        let re = frames.matmul(&self.cos_w)?.reshape((b, t, f))?;
        let im = frames.matmul(&self.sin_w)?.reshape((b, t, f))?;
        Ok((re, im))
    }

    /// (real, imag) each (B, T, F) -> (B, out_len) waveform.
    pub fn inverse(&self, re: &Tensor, im: &Tensor, out_len: usize) -> Result<Tensor> {
        let (b, t, f) = re.dims3()?;
        ensure!(f == self.n_bins(), "spectrum has {f} bins, expected {}", self.n_bins());
        ensure!(im.dims() == re.dims(), "real/imag shapes differ");
        let n = self.n_fft;
        let frames = (re.reshape((b * t, f))?.matmul(&self.icos)? + im.reshape((b * t, f))?.matmul(&self.isin)?)?
            .broadcast_mul(&self.win)?
            .reshape((b, t, n))?;
        let r = n / self.hop;
        let total = (t - 1) * self.hop + n;
        let mut acc: Option<Tensor> = None;
        for j in 0..r {
            // hop-block j of every frame lands at block index l + j
            let part = frames.narrow(2, j * self.hop, self.hop)?.pad_with_zeros(1, j, r - 1 - j)?;
            acc = Some(match acc {
                None => part,
                Some(a) => (a + part)?,
            });
        }
        let ola = acc.expect("r >= 1").reshape((b, total))?;
        let half = n / 2;
        ensure!(out_len + half <= total, "requested {out_len} samples from {t} frames");
        let inv_env = self.inverse_envelope(t, half, out_len);
        let inv = Tensor::from_vec(inv_env, out_len, re.device())?.to_dtype(re.dtype())?;
        Ok(ola.narrow(1, half, out_len)?.broadcast_mul(&inv)?)
    }

    /// 1 / sum_l w^2(n - l hop) over the kept region (0 where the envelope vanishes).
    fn inverse_envelope(&self, t: usize, start: usize, len: usize) -> Vec<f64> {
        let total = (t - 1) * self.hop + self.n_fft;
        let mut env = vec![0.0; total];
        for l in 0..t {
            for (i, w) in self.window.iter().enumerate() {
                env[l * self.hop + i] += w * w;
            }
        }
        env[start..start + len]
            .iter()
            .map(|&e| if e > 1e-10 { 1.0 / e } else { 0.0 })
            .collect()
    }
}

/// |X|^2 from real/imag parts.
pub fn power(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    Ok((re.sqr()? + im.sqr()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{istft, stft, StftConfig, Waveform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_fft_engine_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(n, hop, len) in &[(512usize, 256usize, 4000usize), (64, 32, 128), (1024, 512, 3001), (256, 128, 700)] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = StftConfig::new(n, hop).unwrap();
            let w = Waveform::from_f64(&x).unwrap();
            let oracle = stft(&w, &cfg).unwrap();
            let ts = TensorStft::new(n, hop, DType::F64).unwrap();
            let xt = Tensor::from_vec(w.to_f64(), (1, len), &Device::Cpu).unwrap();
            let (re, im) = ts.forward(&xt).unwrap();
            assert_eq!(re.dims(), &[1, oracle.n_frames(), n / 2 + 1]);
            let re: Vec<f64> = re.flatten_all().unwrap().to_vec1().unwrap();
            let im: Vec<f64> = im.flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..re.len() {
                assert!((re[i] - oracle.real.data[i]).abs() < 1e-9);
                assert!((im[i] - oracle.imag.data[i]).abs() < 1e-9);
            }
            let (re, im) = ts.forward(&xt).unwrap();
            let y: Vec<f64> = ts.inverse(&re, &im, len).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let y_oracle = istft(&oracle, &cfg, len).unwrap();
            for i in 0..len {
                assert!((y[i] - w.to_f64()[i]).abs() < 1e-9, "{n} {i}");
                assert!((y[i] - y_oracle.samples()[i] as f64).abs() < 1e-6);
            }
        }
    }
}
