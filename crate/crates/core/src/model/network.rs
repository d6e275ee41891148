use candle_core::{DType, Device, Tensor};

use super::config::ModelConfig;
use super::decoder::{Decoder, DecoderKind};
use super::dsp::{power, TensorStft};
use super::encoder::{AudiogramEncoder, SpectrumEncoder};
use super::fusion::AmftBlock;
use super::params::{ParamStore, Scope};
use super::trace::{ctf, ShapeRow, Tracer};
use super::vad::VadHead;
use crate::audiogram::Audiogram;
use crate::error::{ensure, Result};
use crate::spectral::{Waveform, SAMPLE_RATE};

/// Keeps the power-law compression differentiable at zero power.
const COMPRESS_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct NetOutput {
    /// (B, L) time-domain output, same length as the input.
    pub enhanced: Tensor,
    /// (B, T) speech probabilities.
    pub vad: Tensor,
    /// (B, T, F) non-negative magnitude mask.
    pub mask: Tensor,
    pub phase_real: Tensor,
    pub phase_imag: Tensor,
    /// (B, T, F) reconstructed spectrum.
    pub est_real: Tensor,
    pub est_imag: Tensor,
}

/// The spectral-domain part of [`NetOutput`].
#[derive(Debug, Clone)]
pub struct SpectralOutput {
    pub vad: Tensor,
    pub mask: Tensor,
    pub phase_real: Tensor,
    pub phase_imag: Tensor,
    pub est_real: Tensor,
    pub est_imag: Tensor,
}

/// Joint enhancement and compensation network.
#[derive(Debug, Clone)]
pub struct HearNet {
    pub cfg: ModelConfig,
    pub stft: TensorStft,
    pub encoder: SpectrumEncoder,
    pub hl_encoder: AudiogramEncoder,
    pub blocks: Vec<AmftBlock>,
    pub mask_decoder: Decoder,
    pub phase_decoder: Decoder,
    pub vad: VadHead,
}

/// Masked-magnitude reconstruction: magnitude `mask * |Y|`, angle of the phase
/// planes (angle 0 where both planes vanish).
pub fn reconstruct(
    mask: &Tensor,
    noisy_re: &Tensor,
    noisy_im: &Tensor,
    phase_re: &Tensor,
    phase_im: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mag = (mask * power(noisy_re, noisy_im)?.sqrt()?)?;
    let r2 = power(phase_re, phase_im)?;
    let pos = r2.gt(0.0)?;
    let ones = r2.ones_like()?;
    let r = pos.where_cond(&r2, &ones)?.sqrt()?;
    let cos = pos.where_cond(&(phase_re / &r)?, &ones)?;
    let sin = pos.where_cond(&(phase_im / &r)?, &r2.zeros_like()?)?;
    Ok(((&mag * cos)?, (mag * sin)?))
}

impl HearNet {
    /// A copy over `store`'s parameters that records no autograd history and
    /// follows later updates to the store. Use it for every no-grad forward:
    /// a tracked forward keeps all intermediates alive until it is dropped.
    pub fn inference(store: &ParamStore, prefix: &str, cfg: ModelConfig) -> Result<Self> {
        Self::new(&mut Scope::new(&mut store.inference_view(), prefix), cfg)
    }

    pub fn new(sc: &mut Scope, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let blocks = (0..cfg.n_amft_blocks)
            .map(|i| AmftBlock::new(&mut sc.sub(&format!("amft{i}")), c, cfg.attn_heads, cfg.conv_kernel))
            .collect::<Result<_>>()?;
        Ok(Self {
            stft: TensorStft::new(cfg.n_fft, cfg.hop, sc.dtype())?,
            encoder: SpectrumEncoder::new(&mut sc.sub("encoder"), &cfg)?,
            hl_encoder: AudiogramEncoder::new(&mut sc.sub("hl_encoder"), &cfg)?,
            blocks,
            mask_decoder: Decoder::new(&mut sc.sub("mask_decoder"), &cfg, DecoderKind::Mask)?,
            phase_decoder: Decoder::new(&mut sc.sub("phase_decoder"), &cfg, DecoderKind::Phase)?,
            vad: VadHead::new(&mut sc.sub("vad"), c, cfg.vad_hidden)?,
            cfg,
        })
    }

    /// Power-law compressed complex spectrum as (B, T, F, 2).
    pub fn compressed_input(&self, re: &Tensor, im: &Tensor) -> Result<Tensor> {
        let scale = (power(re, im)? + COMPRESS_EPS)?.powf((self.cfg.compress_exponent - 1.0) / 2.0)?;
        Ok(Tensor::stack(&[(re * &scale)?, (im * &scale)?], 3)?)
    }

    /// `noisy`: (B, L); `hl`: dense audiograms (B, F) in dB HL.
    pub fn forward(&self, noisy: &Tensor, hl: &Tensor, train: bool) -> Result<NetOutput> {
        self.forward_traced(noisy, hl, train, &mut Tracer::off())
    }

    pub fn forward_traced(&self, noisy: &Tensor, hl: &Tensor, train: bool, tr: &mut Tracer) -> Result<NetOutput> {
        let (_, len) = noisy.dims2()?;
        let (re, im) = self.stft.forward(noisy)?;
        let s = self.forward_spectrum(&re, &im, hl, train, tr)?;
        let enhanced = self.stft.inverse(&s.est_real, &s.est_imag, len)?;
        Ok(NetOutput {
            enhanced,
            vad: s.vad,
            mask: s.mask,
            phase_real: s.phase_real,
            phase_imag: s.phase_imag,
            est_real: s.est_real,
            est_imag: s.est_imag,
        })
    }

    /// Everything after the analysis STFT; `re`/`im` are (B, T, F).
    pub fn forward_spectrum(&self, re: &Tensor, im: &Tensor, hl: &Tensor, train: bool, tr: &mut Tracer) -> Result<SpectralOutput> {
        let (b, _, f) = re.dims3()?;
        ensure!(f == self.cfg.n_bins(), "spectrum has {f} bins, expected {}", self.cfg.n_bins());
        ensure!(hl.dims() == [b, self.cfg.n_bins()], "audiogram batch {:?} does not match ({b}, {})", hl.dims(), self.cfg.n_bins());
        let x = self.compressed_input(re, im)?;
        let z = self.encoder.forward(&x, tr)?;
        let code = self.hl_encoder.forward(hl, train, tr)?;
        let mut h = z;
        for blk in &self.blocks {
            let prev = ctf(&h);
            let code_shape = vec![code.dims()[1], 1, code.dims()[2]];
            let zf = blk.freq.forward(&h, &code)?;
            let (_, t, f, c) = zf.dims4()?;
            tr.record("AMFT-Conformer/F-Conformer", &[vec![t, f, c]], vec![t, f, c]);
            h = blk.time.forward(&zf, &code)?;
            tr.record("AMFT-Conformer/T-Conformer", &[vec![f, t, c]], vec![f, t, c]);
            tr.record("AMFT-Conformer", &[prev, code_shape], ctf(&h));
        }
        let mask = self.mask_decoder.forward(&h, tr)?.squeeze(3)?;
        // the phase path refines the compressed noisy spectrum
        let phase = (self.phase_decoder.forward(&h, tr)? + &x)?;
        let phase_real = phase.narrow(3, 0, 1)?.squeeze(3)?;
        let phase_imag = phase.narrow(3, 1, 1)?.squeeze(3)?;
        let vad = self.vad.forward(&h, tr)?;
        let (est_real, est_imag) = reconstruct(&mask, re, im, &phase_real, &phase_imag)?;
        Ok(SpectralOutput {
            vad,
            mask,
            phase_real,
            phase_imag,
            est_real,
            est_imag,
        })
    }

    /// Dense audiogram rows (B, F) for this configuration's bin grid.
    pub fn dense_audiograms(&self, audiograms: &[Audiogram], dtype: DType) -> Result<Tensor> {
        dense_audiograms(&self.cfg, audiograms, dtype)
    }

    /// Single-utterance inference: enhanced waveform and per-frame VAD.
    pub fn enhance(&self, x: &Waveform, audiogram: &Audiogram, dtype: DType) -> Result<(Waveform, Vec<f64>)> {
        let t = Tensor::from_vec(x.samples().to_vec(), (1, x.len()), &Device::Cpu)?.to_dtype(dtype)?;
        let hl = self.dense_audiograms(std::slice::from_ref(audiogram), dtype)?;
        let out = self.forward(&t, &hl, false)?;
        let y: Vec<f64> = out.enhanced.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
        let vad: Vec<f64> = out.vad.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
        ensure!(y.iter().all(|v| v.is_finite()), "network produced non-finite samples");
        Ok((Waveform::from_f64(&y)?, vad))
    }
}

pub fn dense_audiograms(cfg: &ModelConfig, audiograms: &[Audiogram], dtype: DType) -> Result<Tensor> {
    let f = cfg.n_bins();
    let mut v = Vec::with_capacity(audiograms.len() * f);
    for a in audiograms {
        v.extend(a.interpolate(f, SAMPLE_RATE as f64, cfg.n_fft)?.values);
    }
    Ok(Tensor::from_vec(v, (audiograms.len(), f), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Trainable generator scalars; `with_vad` includes the training-only VAD head.
pub fn parameter_count(cfg: ModelConfig, with_vad: bool) -> Result<usize> {
    let mut ps = ParamStore::new(0, DType::F32);
    HearNet::new(&mut Scope::new(&mut ps, "g"), cfg)?;
    let vad = ps.count("g.vad.");
    Ok(if with_vad { ps.total() } else { ps.total() - vad })
}

/// Module shape rows for a random-weight network on `t` frames.
pub fn shape_trace(cfg: ModelConfig, t: usize) -> Result<Vec<ShapeRow>> {
    ensure!(t >= 1, "need at least one frame");
    let mut ps = ParamStore::new(0, DType::F32);
    HearNet::new(&mut Scope::new(&mut ps, "g"), cfg)?;
    let net = HearNet::inference(&ps, "g", cfg)?;
    // the table starts at the spectrum, so no waveform framing is involved
    let spec = Tensor::zeros((1, t, cfg.n_bins()), DType::F32, &Device::Cpu)?;
    let hl = Tensor::zeros((1, cfg.n_bins()), DType::F32, &Device::Cpu)?;
    let mut tr = Tracer::on();
    net.forward_spectrum(&spec, &spec, &hl, false, &mut tr)?;
    Ok(tr.rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck;

    fn build(cfg: ModelConfig, seed: u64, dtype: DType) -> (ParamStore, HearNet) {
        let mut ps = ParamStore::new(seed, dtype);
        let net = HearNet::new(&mut Scope::new(&mut ps, "g"), cfg).unwrap();
        (ps, net)
    }

    /// Randomizes the parameters that start at identity values.
    fn scramble(ps: &ParamStore, seed: u64) {
        ps.randomize(".head.", 0.2, seed).unwrap();
        ps.randomize("_decoder.sp", 0.2, seed + 1).unwrap();
    }

    fn noise(seed: u64, b: usize, len: usize, dtype: DType) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * len).map(|_| rng.random_range(-0.3..0.3)).collect();
        Tensor::from_vec(v, (b, len), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn hl(cfg: &ModelConfig, values: [f64; 6], dtype: DType) -> Tensor {
        dense_audiograms(cfg, &[Audiogram::new(values).unwrap()], dtype).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn output_shapes_and_ranges() {
        let cfg = ModelConfig::tiny();
        let (_, net) = build(cfg, 1, DType::F32);
        let len = 300;
        let x = noise(2, 2, len, DType::F32);
        let h = Tensor::cat(&[hl(&cfg, [10.0, 20.0, 30.0, 40.0, 50.0, 60.0], DType::F32), hl(&cfg, [0.0; 6], DType::F32)], 0).unwrap();
        let out = net.forward(&x, &h, false).unwrap();
        let t = cfg.n_frames(len);
        assert_eq!(out.enhanced.dims(), &[2, len]);
        assert_eq!(out.vad.dims(), &[2, t]);
        assert_eq!(out.mask.dims(), &[2, t, cfg.n_bins()]);
        let mask: Vec<f32> = out.mask.flatten_all().unwrap().to_vec1().unwrap();
        assert!(mask.iter().all(|&m| m >= 0.0));
        let vad: Vec<f32> = out.vad.flatten_all().unwrap().to_vec1().unwrap();
        assert!(vad.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn untrained_network_passes_input_through() {
        let cfg = ModelConfig::tiny();
        let (ps, net) = build(cfg, 2, DType::F64);
        let len = 700;
        let x = noise(3, 1, len, DType::F64);
        let out = net.forward(&x, &hl(&cfg, [10.0, 30.0, 50.0, 60.0, 70.0, 80.0], DType::F64), false).unwrap();
        let mask: Vec<f64> = out.mask.flatten_all().unwrap().to_vec1().unwrap();
        assert!(mask.iter().all(|&m| m == 1.0));
        let inner = |t: &Tensor| t.narrow(1, cfg.n_fft, len - 2 * cfg.n_fft).unwrap();
        assert!(max_abs_diff(&inner(&x), &inner(&out.enhanced)) < 1e-9);
        ps.randomize("mask_decoder.sp", 0.2, 4).unwrap();
        let out = net.forward(&x, &hl(&cfg, [10.0; 6], DType::F64), false).unwrap();
        assert!(max_abs_diff(&inner(&x), &inner(&out.enhanced)) > 1e-3);
    }

    #[test]
    fn audiogram_changes_output() {
        let cfg = ModelConfig::tiny();
        let (ps, net) = build(cfg, 3, DType::F64);
        scramble(&ps, 9);
        let x = noise(4, 1, 256, DType::F64);
        let a = net.forward(&x, &hl(&cfg, [20.0, 20.0, 30.0, 40.0, 50.0, 60.0], DType::F64), false).unwrap();
        let b = net.forward(&x, &hl(&cfg, [20.0, 20.0, 30.0, 40.0, 50.0, 80.0], DType::F64), false).unwrap();
        assert!(max_abs_diff(&a.enhanced, &b.enhanced) > 0.0);
    }

    #[test]
    fn future_samples_do_not_reach_past_frames() {
        let cfg = ModelConfig::tiny();
        let (ps, net) = build(cfg, 5, DType::F64);
        scramble(&ps, 11);
        let len = 400;
        let x = noise(6, 1, len, DType::F64);
        let h = hl(&cfg, [30.0, 35.0, 40.0, 45.0, 50.0, 55.0], DType::F64);
        let base = net.forward(&x, &h, false).unwrap();
        for t0 in [2usize, 5, 9] {
            let start = t0 * cfg.hop;
            let mut v: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
            for s in &mut v[start..] {
                *s = -*s + 0.1;
            }
            let y = Tensor::from_vec(v, (1, len), &Device::Cpu).unwrap();
            let out = net.forward(&y, &h, false).unwrap();
            let past = |t: &Tensor, n: usize| t.narrow(1, 0, n).unwrap();
            assert!(max_abs_diff(&past(&base.vad, t0), &past(&out.vad, t0)) < 1e-12);
            assert!(max_abs_diff(&past(&base.mask, t0), &past(&out.mask, t0)) < 1e-12);
            let n = (t0 - 1) * cfg.hop;
            assert!(max_abs_diff(&past(&base.enhanced, n), &past(&out.enhanced, n)) < 1e-12);
            // the perturbation itself is visible
            assert!(max_abs_diff(&base.vad, &out.vad) > 0.0);
        }
    }

    #[test]
    fn reconstruct_uses_phase_angle_only() {
        let dev = Device::Cpu;
        let t = |v: Vec<f64>| Tensor::from_vec(v, (1, 4), &dev).unwrap();
        let mask = t(vec![1.0, 0.5, 2.0, 1.0]);
        let (yr, yi) = (t(vec![3.0, 0.0, 1.0, 0.0]), t(vec![4.0, 2.0, 0.0, 0.0]));
        let (pr, pi) = (t(vec![0.0, -2.0, 0.0, 1.0]), t(vec![5.0, 0.0, 0.0, 1.0]));
        let (er, ei) = reconstruct(&mask, &yr, &yi, &pr, &pi).unwrap();
        let er: Vec<f64> = er.flatten_all().unwrap().to_vec1().unwrap();
        let ei: Vec<f64> = ei.flatten_all().unwrap().to_vec1().unwrap();
        // magnitudes 5, 1, 2, 0 at angles pi/2, pi, 0 (undefined -> 0), pi/4
        let want = [(0.0, 5.0), (-1.0, 0.0), (2.0, 0.0), (0.0, 0.0)];
        for i in 0..4 {
            assert!((er[i] - want[i].0).abs() < 1e-12 && (ei[i] - want[i].1).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn untrained_parameter_counts_are_stable() {
        let cfg = ModelConfig::tiny();
        assert!(parameter_count(cfg, true).unwrap() > parameter_count(cfg, false).unwrap());
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let (ps, net) = build(cfg, 11, DType::F64);
        scramble(&ps, 10);
        let len = 128;
        assert_eq!(cfg.n_frames(len), 4);
        let x = noise(12, 2, len, DType::F64);
        let h = Tensor::cat(&[hl(&cfg, [10.0, 25.0, 30.0, 45.0, 60.0, 70.0], DType::F64), hl(&cfg, [40.0; 6], DType::F64)], 0).unwrap();
        let w = noise(13, 2, len, DType::F64);
        let wv = noise(14, 2, 4, DType::F64);
        let loss = || {
            let out = net.forward(&x, &h, true)?;
            Ok(((&out.enhanced * &w)?.sum_all()? + (&out.vad * &wv)?.sum_all()?)?)
        };
        let vars: Vec<(String, candle_core::Var)> = ps.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let r = gradcheck::check(&vars, loss, 2, 1e-6, 0).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn trace_covers_every_module() {
        for t in [1, 3] {
            let rows = shape_trace(ModelConfig::tiny(), t).unwrap();
            assert_eq!(rows.iter().find(|r| r.module == "VAD Estimator").unwrap().output, vec![t, 1]);
            for name in ["Spectrum Encoder", "Audiogram Encoder", "AMFT-Conformer", "Mask Decoder", "Phase Decoder", "VAD Estimator"] {
                assert!(rows.iter().any(|r| r.module == name), "{name}");
            }
        }
    }
}
