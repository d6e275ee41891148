//! Classical wide dynamic range compression driven by the FIG6 prescription,
//! plus the VAD-guarded target rule used when synthesising training data.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::audiogram::{Audiogram, AUDIOMETRIC_FREQS};
use crate::error::{ensure, Result};
use crate::spectral::{
    power_to_spl, ComplexSpectrogram, Stft, StftConfig, Waveform, DEFAULT_CALIBRATION_DB,
};

pub const N_BANDS: usize = 6;
pub const DEFAULT_MAX_GAIN_DB: f64 = 60.0;
/// Below this input level the compressor is inactive.
pub const ACTIVATION_SPL_DB: f64 = 20.0;

/// FIG6 gain at the 40 dB SPL anchor.
fn gain_40(hl: f64) -> f64 {
    if hl < 20.0 {
        0.0
    } else if hl <= 60.0 {
        hl - 20.0
    } else {
        0.5 * hl + 10.0
    }
}

fn gain_65(hl: f64) -> f64 {
    if hl < 20.0 {
        0.0
    } else if hl <= 60.0 {
        0.6 * (hl - 20.0)
    } else {
        0.8 * hl - 23.0
    }
}

fn gain_95(hl: f64) -> f64 {
    if hl < 40.0 {
        0.0
    } else {
        0.1 * (hl - 40.0).powf(1.4)
    }
}

/// FIG6 insertion gain in dB for hearing loss `hl` (dB HL) at `input_spl`,
/// capped at `max_gain_db`.
pub fn fig6_gain_capped(hl: f64, input_spl: f64, max_gain_db: f64) -> f64 {
    if input_spl < ACTIVATION_SPL_DB {
        return 0.0;
    }
    let (g40, g65, g95) = (gain_40(hl), gain_65(hl), gain_95(hl));
    let g = if input_spl <= 40.0 {
        g40
    } else if input_spl <= 65.0 {
        g40 + (g65 - g40) * (input_spl - 40.0) / 25.0
    } else if input_spl <= 95.0 {
        g65 + (g95 - g65) * (input_spl - 65.0) / 30.0
    } else {
        g95
    };
    g.clamp(0.0, max_gain_db)
}

/// [`fig6_gain_capped`] with the default 60 dB cap.
pub fn fig6_insertion_gain(hl: f64, input_spl: f64) -> f64 {
    fig6_gain_capped(hl, input_spl, DEFAULT_MAX_GAIN_DB)
}

/// Six contiguous bin ranges, one per audiometric frequency, with edges at
/// the geometric means of neighbouring audiometric frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPlan {
    pub bands: Vec<Range<usize>>,
    pub edges_hz: Vec<f64>,
}

impl BandPlan {
    pub fn standard(cfg: &StftConfig) -> Result<Self> {
        let f = cfg.n_bins();
        let mut edges_hz = vec![0.0];
        edges_hz.extend(AUDIOMETRIC_FREQS.windows(2).map(|w| (w[0] * w[1]).sqrt()));
        edges_hz.push(cfg.bin_freq(f - 1));
        let mut bands = Vec::with_capacity(N_BANDS);
        let mut start = 0;
        for b in 0..N_BANDS {
            let end = if b + 1 == N_BANDS {
                f
            } else {
                (0..f).find(|&k| cfg.bin_freq(k) >= edges_hz[b + 1]).unwrap_or(f)
            };
            bands.push(start..end);
            start = end;
        }
        let plan = Self { bands, edges_hz };
        plan.validate(cfg)?;
        Ok(plan)
    }

    pub fn validate(&self, cfg: &StftConfig) -> Result<()> {
        ensure!(self.bands.len() == N_BANDS, "band plan needs {N_BANDS} bands");
        let mut next = 0;
        for (b, r) in self.bands.iter().enumerate() {
            ensure!(r.start == next && r.end > r.start, "band {b} ({r:?}) breaks the partition");
            let center = (AUDIOMETRIC_FREQS[b] / cfg.bin_freq(1)).round() as usize;
            ensure!(
                r.contains(&center.min(cfg.n_bins() - 1)),
                "band {b} ({r:?}) misses its center bin {center}"
            );
            next = r.end;
        }
        ensure!(next == cfg.n_bins(), "bands cover {next} of {} bins", cfg.n_bins());
        Ok(())
    }

    pub fn band_of(&self, k: usize) -> usize {
        self.bands.iter().position(|r| r.contains(&k)).unwrap_or(N_BANDS - 1)
    }
}

/// One-pole attack/release smoothing of the gain track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub attack_ms: f64,
    pub release_ms: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            attack_ms: 5.0,
            release_ms: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdrcConfig {
    pub calibration_db: f64,
    pub max_gain_db: f64,
    /// `None` evaluates gains frame by frame.
    pub smoothing: Option<Smoothing>,
}

impl Default for WdrcConfig {
    fn default() -> Self {
        Self {
            calibration_db: DEFAULT_CALIBRATION_DB,
            max_gain_db: DEFAULT_MAX_GAIN_DB,
            smoothing: Some(Smoothing::default()),
        }
    }
}

impl WdrcConfig {
    pub fn unsmoothed() -> Self {
        Self {
            smoothing: None,
            ..Self::default()
        }
    }
}

/// Per-frame, per-band gains in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTrajectory {
    pub gains_db: Vec<[f64; N_BANDS]>,
}

impl GainTrajectory {
    pub fn n_frames(&self) -> usize {
        self.gains_db.len()
    }

    pub fn max_gain(&self) -> f64 {
        self.gains_db.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Sub-band WDRC compensator bound to one STFT configuration.
#[derive(Debug)]
pub struct Compensator {
    stft: Stft,
    plan: BandPlan,
    config: WdrcConfig,
}

impl Compensator {
    pub fn new(stft_cfg: StftConfig, config: WdrcConfig) -> Result<Self> {
        let plan = BandPlan::standard(&stft_cfg)?;
        Self::with_plan(stft_cfg, plan, config)
    }

    pub fn with_plan(stft_cfg: StftConfig, plan: BandPlan, config: WdrcConfig) -> Result<Self> {
        plan.validate(&stft_cfg)?;
        ensure!(
            config.max_gain_db.is_finite() && config.max_gain_db >= 0.0,
            "max gain must be finite and non-negative"
        );
        if let Some(s) = config.smoothing {
            ensure!(
                s.attack_ms > 0.0 && s.release_ms > 0.0,
                "smoothing time constants must be positive"
            );
        }
        Ok(Self {
            stft: Stft::new(stft_cfg)?,
            plan,
            config,
        })
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Measures band SPLs of `spec` and maps them through FIG6.
    pub fn band_gains(&self, spec: &ComplexSpectrogram, audiogram: &Audiogram) -> Result<GainTrajectory> {
        let t = spec.n_frames();
        let mut gains = vec![[0.0; N_BANDS]; t];
        let hl = audiogram.thresholds();
        for (b, band) in self.plan.bands.iter().enumerate() {
            let power = self.stft.band_power(spec, band.clone())?;
            let mut state: Option<f64> = None;
            for (l, p) in power.into_iter().enumerate() {
                let spl = power_to_spl(p, self.config.calibration_db);
                let target = fig6_gain_capped(hl[b], spl, self.config.max_gain_db);
                let g = match (self.config.smoothing, state) {
                    (Some(s), Some(prev)) => {
                        let tau = if target < prev { s.attack_ms } else { s.release_ms };
                        let a = (-1000.0 / (self.stft.config().frame_rate() * tau)).exp();
                        a * prev + (1.0 - a) * target
                    }
                    _ => target,
                };
                state = Some(g);
                gains[l][b] = g;
            }
        }
        Ok(GainTrajectory { gains_db: gains })
    }

    /// Applies `10^(G/20)` to every bin of each band.
    pub fn apply_gains(&self, spec: &mut ComplexSpectrogram, gains: &GainTrajectory) -> Result<()> {
        ensure!(
            gains.n_frames() == spec.n_frames(),
            "gain track has {} frames, spectrogram {}",
            gains.n_frames(),
            spec.n_frames()
        );
        let band_of: Vec<usize> = (0..spec.n_bins()).map(|k| self.plan.band_of(k)).collect();
        let lin: Vec<[f64; N_BANDS]> = gains
            .gains_db
            .iter()
            .map(|row| row.map(|g| 10f64.powf(g / 20.0)))
            .collect();
        spec.scale_by(|l, k| lin[l][band_of[k]]);
        Ok(())
    }

    /// Spectrogram-domain compensation: returns the compensated spectrum and gains.
    pub fn compensate_spectrum(
        &self,
        spec: &ComplexSpectrogram,
        audiogram: &Audiogram,
    ) -> Result<(ComplexSpectrogram, GainTrajectory)> {
        let gains = self.band_gains(spec, audiogram)?;
        let mut out = spec.clone();
        self.apply_gains(&mut out, &gains)?;
        Ok((out, gains))
    }

    pub fn compensate(&self, x: &Waveform, audiogram: &Audiogram) -> Result<(Waveform, GainTrajectory)> {
        let spec = self.stft.analyse(&x.to_f64())?;
        let (out, gains) = self.compensate_spectrum(&spec, audiogram)?;
        let y = self.stft.synthesise(&out, x.len())?;
        Ok((Waveform::from_f64(&y)?, gains))
    }
}

pub fn wdrc_compensate(
    x: &Waveform,
    audiogram: &Audiogram,
    plan: &BandPlan,
    config: WdrcConfig,
) -> Result<(Waveform, GainTrajectory)> {
    Compensator::with_plan(StftConfig::default(), plan.clone(), config)?.compensate(x, audiogram)
}

/// Per-sample weight of the speech source: the frame decisions linearly
/// interpolated between frame centres (`l * hop`), so each speech/non-speech
/// boundary is a one-hop crossfade.
pub fn vad_sample_weights(vad: &[bool], len: usize, hop: usize) -> Vec<f64> {
    let t = vad.len();
    let v = |l: usize| if vad[l] { 1.0 } else { 0.0 };
    (0..len)
        .map(|n| {
            let l0 = n / hop;
            if l0 + 1 >= t {
                v(t - 1)
            } else {
                let frac = (n - l0 * hop) as f64 / hop as f64;
                if vad[l0] == vad[l0 + 1] {
                    v(l0)
                } else {
                    (1.0 - frac) * v(l0) + frac * v(l0 + 1)
                }
            }
        })
        .collect()
}

/// Speech frames from `compensated`, non-speech frames from `original`.
pub fn vad_guarded_target(
    compensated: &Waveform,
    original: &Waveform,
    vad: &[bool],
    cfg: &StftConfig,
) -> Result<Waveform> {
    ensure!(
        compensated.len() == original.len(),
        "compensated ({}) and original ({}) lengths differ",
        compensated.len(),
        original.len()
    );
    let t = cfg.n_frames(original.len());
    ensure!(vad.len() == t, "vad has {} frames, STFT grid has {t}", vad.len());
    let w = vad_sample_weights(vad, original.len(), cfg.hop);
    let out = compensated
        .samples()
        .iter()
        .zip(original.samples())
        .zip(&w)
        .map(|((&c, &o), &m)| {
            if m == 1.0 {
                c
            } else if m == 0.0 {
                o
            } else {
                (m * c as f64 + (1.0 - m) * o as f64) as f32
            }
        })
        .collect();
    Waveform::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn fig6_examples() {
        assert_eq!(fig6_insertion_gain(10.0, 50.0), 0.0);
        assert_eq!(fig6_insertion_gain(10.0, 90.0), 0.0);
        assert!((fig6_insertion_gain(40.0, 40.0) - 20.0).abs() < 1e-12);
        assert!((fig6_insertion_gain(40.0, 65.0) - 12.0).abs() < 1e-12);
        assert!((fig6_insertion_gain(40.0, 52.5) - 16.0).abs() < 1e-12);
        assert_eq!(fig6_insertion_gain(50.0, 10.0), 0.0);
        // clamped outside the anchors
        assert_eq!(fig6_insertion_gain(40.0, 30.0), 20.0);
        assert_eq!(fig6_insertion_gain(80.0, 110.0), 0.1 * 40f64.powf(1.4));
        // cap
        assert_eq!(fig6_insertion_gain(120.0, 40.0), 60.0);
    }

    #[test]
    fn standard_plan_partitions_bins() {
        let cfg = StftConfig::default();
        let plan = BandPlan::standard(&cfg).unwrap();
        assert_eq!(plan.bands.first().unwrap().start, 0);
        assert_eq!(plan.bands.last().unwrap().end, 257);
        assert_eq!(plan.bands[0], 0..12);
        assert_eq!(plan.band_of(32), 2);
        assert!((plan.edges_hz[1] - 353.553).abs() < 1e-3);
        assert!((plan.edges_hz[5] - 5656.854).abs() < 1e-3);
    }

    fn tone(freq: f64, amp: f64, len: usize) -> Waveform {
        let v: Vec<f64> = (0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / 16000.0).sin()).collect();
        Waveform::from_f64(&v).unwrap()
    }

    #[test]
    fn zero_audiogram_is_transparent() {
        let x = tone(440.0, 0.3, 8000);
        let c = Compensator::new(StftConfig::default(), WdrcConfig::default()).unwrap();
        let (y, g) = c.compensate(&x, &Audiogram::flat(0.0).unwrap()).unwrap();
        assert!(g.gains_db.iter().flatten().all(|&v| v == 0.0));
        assert!(x.samples().iter().zip(y.samples()).all(|(a, b)| (a - b).abs() < 1e-4));
        let (s, _) = c.compensate(&Waveform::zeros(4000), &Audiogram::flat(70.0).unwrap()).unwrap();
        assert!(s.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn steady_state_tone_gain_matches_prescription() {
        // mean-square of a sinusoid at 65 dB SPL with 100 dB calibration
        let amp = (2.0 * 10f64.powf(-35.0 / 10.0)).sqrt();
        let x = tone(1000.0, amp, 16000);
        let a = Audiogram::new([0.0, 0.0, 40.0, 0.0, 0.0, 0.0]).unwrap();
        let c = Compensator::new(StftConfig::default(), WdrcConfig::default()).unwrap();
        let spec = c.stft().analyse(&x.to_f64()).unwrap();
        let spl = crate::spectral::band_spl(&spec, c.plan().bands[2].clone(), 100.0).unwrap();
        assert!((spl[30] - 65.0).abs() < 0.05, "{}", spl[30]);
        let (y, g) = c.compensate(&x, &a).unwrap();
        assert!((g.gains_db[30][2] - 12.0).abs() < 0.5);
        let mid = 4000..12000;
        let gain_db = 20.0 * (crate::spectral::rms(&y.samples()[mid.clone()]) / crate::spectral::rms(&x.samples()[mid])).log10();
        assert!((gain_db - 12.0).abs() < 0.5, "{gain_db}");
    }

    #[test]
    fn smoothing_attack_faster_than_release() {
        let c = Compensator::new(StftConfig::default(), WdrcConfig::default()).unwrap();
        let a = Audiogram::flat(50.0).unwrap();
        // quiet then loud then quiet
        let mut v = vec![0.0f64; 24000];
        for (n, s) in v.iter_mut().enumerate() {
            let amp = if (8000..16000).contains(&n) { 0.5 } else { 0.005 };
            *s = amp * (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin();
        }
        let x = Waveform::from_f64(&v).unwrap();
        let (_, g) = c.compensate(&x, &a).unwrap();
        let track: Vec<f64> = g.gains_db.iter().map(|r| r[2]).collect();
        let (lo, hi) = (track[20], track[50]);
        assert!(lo > hi);
        // after 2 frames of attack most of the drop is done; release is slower
        let onset = 8000 / 256 + 2;
        let offset = 16000 / 256 + 2;
        let attack_progress = (lo - track[onset + 1]) / (lo - hi);
        let release_progress = (track[offset + 1] - hi) / (lo - hi);
        assert!(attack_progress > 0.9, "{attack_progress}");
        assert!(release_progress < attack_progress);
    }

    #[test]
    fn guarded_target_rules() {
        let cfg = StftConfig::default();
        let len = 4000;
        let t = cfg.n_frames(len);
        let comp = Waveform::new((0..len).map(|n| (n as f32 * 0.01).sin()).collect()).unwrap();
        let orig = Waveform::new((0..len).map(|n| (n as f32 * 0.013).cos() * 0.1).collect()).unwrap();
        assert_eq!(vad_guarded_target(&comp, &orig, &vec![true; t], &cfg).unwrap(), comp);
        assert_eq!(vad_guarded_target(&comp, &orig, &vec![false; t], &cfg).unwrap(), orig);
        let vad: Vec<bool> = (0..t).map(|l| (l / 3) % 2 == 0).collect();
        let out = vad_guarded_target(&comp, &orig, &vad, &cfg).unwrap();
        for n in 0..len {
            let l0 = n / cfg.hop;
            let (a, b) = (vad[l0.min(t - 1)], vad[(l0 + 1).min(t - 1)]);
            let (o, c, y) = (orig.samples()[n], comp.samples()[n], out.samples()[n]);
            if a && b {
                assert_eq!(y, c);
            } else if !a && !b {
                assert_eq!(y, o);
            } else {
                let (lo, hi) = (o.min(c), o.max(c));
                assert!(y >= lo - 1e-6 && y <= hi + 1e-6);
            }
        }
        assert!(vad_guarded_target(&comp, &orig, &vad[1..], &cfg).is_err());
        assert!(vad_guarded_target(&comp, &Waveform::zeros(10), &vad, &cfg).is_err());
    }

    #[test]
    fn masked_then_compensated_equals_joint_gain() {
        // the compensated spectrum of Y*M equals Y * (M * Gbar)
        let x = tone(700.0, 0.2, 8000);
        let c = Compensator::new(StftConfig::default(), WdrcConfig::unsmoothed()).unwrap();
        let a = Audiogram::new([20.0, 30.0, 45.0, 60.0, 70.0, 80.0]).unwrap();
        let y = c.stft().analyse(&x.to_f64()).unwrap();
        let mask = |l: usize, k: usize| 0.2 + 0.6 * (((l * 7 + k * 3) % 11) as f64 / 10.0);
        let mut s_hat = y.clone();
        s_hat.scale_by(mask);
        let (x_hat, gains) = c.compensate_spectrum(&s_hat, &a).unwrap();
        let plan = c.plan();
        let mut joint = y.clone();
        joint.scale_by(|l, k| mask(l, k) * 10f64.powf(gains.gains_db[l][plan.band_of(k)] / 20.0));
        for (p, q) in x_hat.real.data.iter().zip(&joint.real.data).chain(x_hat.imag.data.iter().zip(&joint.imag.data)) {
            assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
        // waveform route with a time-frequency constant mask
        let y_wave = c.stft().synthesise(&s_hat_const(&y, 0.5), x.len()).unwrap();
        let (comp, g2) = c.compensate(&Waveform::from_f64(&y_wave).unwrap(), &a).unwrap();
        let mut joint2 = y.clone();
        joint2.scale_by(|l, k| 0.5 * 10f64.powf(g2.gains_db[l][plan.band_of(k)] / 20.0));
        let direct = c.stft().synthesise(&joint2, x.len()).unwrap();
        let err = comp.samples().iter().zip(&direct).map(|(p, q)| (*p as f64 - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
    }

    fn s_hat_const(y: &ComplexSpectrogram, m: f64) -> ComplexSpectrogram {
        let mut s = y.clone();
        s.scale_by(|_, _| m);
        s
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_in_hl(hl in 20.0f64..100.0, d in 0.0f64..20.0, spl in 40.0f64..120.0) {
                let hl2 = (hl + d).min(100.0);
                prop_assert!(fig6_insertion_gain(hl2, spl) >= fig6_insertion_gain(hl, spl));
            }

            #[test]
            fn compression(hl in 20.1f64..120.0) {
                let (a, b, c) = (
                    fig6_insertion_gain(hl, 40.0),
                    fig6_insertion_gain(hl, 65.0),
                    fig6_insertion_gain(hl, 95.0),
                );
                prop_assert!(a >= b && b >= c);
            }

            #[test]
            fn continuous_above_activation(hl in -10.0f64..120.0, spl in 20.0f64..130.0) {
                let e = 1e-7;
                let d = (fig6_insertion_gain(hl, spl + e) - fig6_insertion_gain(hl, spl)).abs();
                prop_assert!(d < 1e-4);
            }
        }
    }
}
