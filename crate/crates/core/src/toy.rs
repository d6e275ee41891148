//! Deterministic synthetic sources for tests, demos and smoke training:
//! speech-like harmonic syllables separated by pauses, coloured and babble
//! noise, and random audiograms.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audiogram::Audiogram;
use crate::spectral::{rms, Waveform, SAMPLE_RATE};
use crate::synthesis::SourcePool;

const FS: f64 = SAMPLE_RATE as f64;
const SPEECH_FLOOR_DB: f64 = 50.0;

fn scale_to_db(mut v: Vec<f64>, level_db: f64) -> Waveform {
    let r = (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
    if r > 0.0 {
        let g = 10f64.powf(level_db / 20.0) / r;
        v.iter_mut().for_each(|x| *x = (*x * g).clamp(-1.0, 1.0));
    }
    Waveform::from_f64(&v).expect("finite")
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let d = Normal::new(0.0, 1.0).expect("valid");
    (0..n).map(|_| d.sample(rng)).collect()
}

pub fn white_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Waveform {
    let v: Vec<f64> = gaussian(rng, len).into_iter().map(|x| x * std).collect();
    Waveform::from_f64(&v).expect("finite")
}

/// Pink noise via the Paul Kellet filter, normalised to `level_db` dBFS.
pub fn pink_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, level_db: f64) -> Waveform {
    let mut b = [0.0f64; 7];
    let v = gaussian(rng, len)
        .into_iter()
        .map(|w| {
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect();
    scale_to_db(v, level_db)
}

/// Mains hum (50 Hz and harmonics) over a low white-noise bed.
pub fn hum_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, level_db: f64) -> Waveform {
    let phases: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let bed = gaussian(rng, len);
    let v = (0..len)
        .map(|n| {
            let t = n as f64 / FS;
            let h: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, p)| (2.0 * PI * 50.0 * (k + 1) as f64 * t + p).sin() / (k + 1) as f64)
                .sum();
            h + 0.05 * bed[n]
        })
        .collect();
    scale_to_db(v, level_db)
}

/// Several overlapping talkers at equal level.
pub fn babble_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, level_db: f64) -> Waveform {
    let mut acc = vec![0.0f64; len];
    for _ in 0..4 {
        let s = speech_like(rng, len, -30.0);
        acc.iter_mut().zip(s.samples()).for_each(|(a, &x)| *a += x as f64);
    }
    scale_to_db(acc, level_db)
}

/// Speech-like signal: voiced syllables (harmonic series with a gliding f0
/// and two formant peaks, raised-cosine envelope), occasional fricative
/// bursts, short gaps between syllables and occasional longer pauses.
pub fn speech_like<R: Rng + ?Sized>(rng: &mut R, len: usize, level_db: f64) -> Waveform {
    let mut v = vec![0.0f64; len];
    let base_f0: f64 = rng.random_range(95.0..230.0);
    let mut t = rng.random_range(0..(0.05 * FS) as usize);
    while t < len {
        let dur = rng.random_range((0.12 * FS) as usize..(0.35 * FS) as usize);
        let end = (t + dur).min(len);
        if rng.random::<f64>() < 0.2 {
            // fricative: differenced (high-passed) noise
            let n = gaussian(rng, end - t + 1);
            let amp = rng.random_range(0.05..0.15);
            for i in t..end {
                let env = (PI * (i - t) as f64 / (end - t) as f64).sin();
                v[i] += amp * env * (n[i - t + 1] - n[i - t]);
            }
        } else {
            let f0_start: f64 = base_f0 * rng.random_range(0.85..1.15);
            let f0_end = base_f0 * rng.random_range(0.85..1.15);
            let f1 = rng.random_range(300.0..900.0);
            let f2 = rng.random_range(900.0..2500.0);
            let n_h = (3800.0 / f0_start.max(f0_end)) as usize;
            let amps: Vec<f64> = (1..=n_h)
                .map(|k| {
                    let f = k as f64 * f0_start;
                    let formant = (-((f - f1) / 150.0).powi(2)).exp() + 0.6 * (-((f - f2) / 250.0).powi(2)).exp();
                    (0.15 + formant) / k as f64
                })
                .collect();
            let mut phase = 0.0;
            for i in t..end {
                let frac = (i - t) as f64 / (end - t) as f64;
                let f0 = f0_start + (f0_end - f0_start) * frac;
                phase += 2.0 * PI * f0 / FS;
                let env = (PI * frac).sin().powi(2);
                let s: f64 = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum();
                v[i] += env * s;
            }
        }
        let gap = if rng.random::<f64>() < 0.15 {
            rng.random_range(0.2..0.5)
        } else {
            rng.random_range(0.03..0.08)
        };
        t = end + (gap * FS) as usize;
    }
    // Recordings never contain digital silence. A floor 50 dB under the
    // speech level keeps log-spectral targets in pauses finite.
    let floor = 10f64.powf((level_db - SPEECH_FLOOR_DB) / 20.0);
    let v: Vec<f64> = scale_to_db(v, level_db).to_f64();
    let n = gaussian(rng, len);
    Waveform::from_f64(&v.iter().zip(&n).map(|(x, e)| x + floor * e).collect::<Vec<_>>()).expect("finite")
}

/// `n` speech-like items of `secs` seconds at -30..-20 dBFS.
pub fn speech_pool<R: Rng + ?Sized>(rng: &mut R, n: usize, secs: f64) -> SourcePool {
    let len = (secs * FS).round() as usize;
    SourcePool::new(
        (0..n)
            .map(|i| {
                let level = rng.random_range(-30.0..-20.0);
                (format!("speech{i:03}"), speech_like(rng, len, level))
            })
            .collect(),
    )
}

/// `n` noise items cycling through pink, babble, hum and white noise.
pub fn noise_pool<R: Rng + ?Sized>(rng: &mut R, n: usize, secs: f64) -> SourcePool {
    let len = (secs * FS).round() as usize;
    SourcePool::new(
        (0..n)
            .map(|i| {
                let level = rng.random_range(-35.0..-20.0);
                let (kind, w) = match i % 4 {
                    0 => ("pink", pink_noise(rng, len, level)),
                    1 => ("babble", babble_noise(rng, len, level)),
                    2 => ("hum", hum_noise(rng, len, level)),
                    _ => {
                        let std = 10f64.powf(level / 20.0);
                        ("white", white_noise(rng, len, std))
                    }
                };
                (format!("{kind}{i:03}"), w)
            })
            .collect(),
    )
}

/// Random sloping audiograms spanning mild to severe loss.
pub fn audiogram_pool<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Audiogram> {
    (0..n)
        .map(|_| {
            let base = rng.random_range(20.0..75.0);
            let slope = rng.random_range(0.0..8.0);
            let mut th = [0.0; 6];
            for (i, v) in th.iter_mut().enumerate() {
                let x: f64 = base + slope * i as f64 + rng.random_range(-5.0..5.0);
                *v = (x / 5.0).round() * 5.0;
                *v = v.clamp(0.0, 110.0);
            }
            Audiogram::new(th).expect("in range")
        })
        .collect()
}

/// RMS level of a waveform in dBFS (no floor).
pub fn level_db(x: &Waveform) -> f64 {
    20.0 * rms(x.samples()).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::activity_fraction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn levels_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = speech_like(&mut rng, 32000, -25.0);
        assert!((level_db(&s) + 25.0).abs() < 0.1);
        let p = pink_noise(&mut rng, 16000, -30.0);
        assert!((level_db(&p) + 30.0).abs() < 0.1);
        let a = speech_like(&mut ChaCha8Rng::seed_from_u64(7), 8000, -25.0);
        let b = speech_like(&mut ChaCha8Rng::seed_from_u64(7), 8000, -25.0);
        assert_eq!(a, b);
    }

    #[test]
    fn speech_like_is_mostly_active() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ok = 0;
        for _ in 0..10 {
            let s = speech_like(&mut rng, 48000, -25.0);
            if activity_fraction(&s).unwrap() >= 0.6 {
                ok += 1;
            }
        }
        assert!(ok >= 5, "{ok}");
    }
}
