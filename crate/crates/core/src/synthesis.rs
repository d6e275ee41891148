//! Training-sample synthesis: activity-screened speech crops, level
//! transformation (release / attack / bypass), noise augmentation and SNR
//! mixing, FIG6 compensation of the clean speech and the VAD-guarded target.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audiogram::Audiogram;
use crate::compensation::{vad_guarded_target, Compensator, WdrcConfig};
use crate::error::{ensure, Error, Result};
use crate::spectral::{mean_square, rms, StftConfig, Waveform, SAMPLE_RATE};
use crate::wav::{read_wav, write_wav, WavFormat};

pub const RMS_FLOOR_DB: f64 = -100.0;

/// 20·log10(RMS) in dBFS, floored at -100.
pub fn rms_db(x: &Waveform) -> f64 {
    let r = rms(x.samples());
    if r > 0.0 {
        (20.0 * r.log10()).max(RMS_FLOOR_DB)
    } else {
        RMS_FLOOR_DB
    }
}

/// Energy-threshold activity detector on the STFT frame grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityDetector {
    pub stft: StftConfig,
    /// Frames within this many dB of the loudest frame count as active.
    pub range_db: f64,
    pub hangover_frames: usize,
}

impl Default for ActivityDetector {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            range_db: 40.0,
            hangover_frames: 2,
        }
    }
}

impl ActivityDetector {
    pub fn frame_energies(&self, x: &Waveform) -> Result<Vec<f64>> {
        let cfg = self.stft;
        ensure!(!x.is_empty(), "activity detection needs a non-empty waveform");
        let samples = x.to_f64();
        let pad = cfg.pad_start();
        let t = cfg.n_frames(x.len());
        // reflect start padding when possible; otherwise zeros
        let at = |i: usize| -> f64 {
            if i < pad {
                samples.get(pad - i).copied().unwrap_or(0.0)
            } else {
                samples.get(i - pad).copied().unwrap_or(0.0)
            }
        };
        Ok((0..t)
            .map(|l| {
                let start = l * cfg.hop;
                (start..start + cfg.frame_len).map(|i| at(i) * at(i)).sum::<f64>() / cfg.frame_len as f64
            })
            .collect())
    }

    pub fn labels(&self, x: &Waveform) -> Result<Vec<bool>> {
        let e = self.frame_energies(x)?;
        let peak = e.iter().copied().fold(0.0, f64::max);
        let floor = 10f64.powf(RMS_FLOOR_DB / 10.0);
        if peak <= floor {
            return Ok(vec![false; e.len()]);
        }
        let thresh = peak * 10f64.powf(-self.range_db / 10.0);
        let raw: Vec<bool> = e.iter().map(|&v| v > thresh && v > floor).collect();
        let mut out = raw.clone();
        for (l, &a) in raw.iter().enumerate() {
            if a {
                for o in out.iter_mut().skip(l + 1).take(self.hangover_frames) {
                    *o = true;
                }
            }
        }
        Ok(out)
    }

    pub fn fraction(&self, x: &Waveform) -> Result<f64> {
        let l = self.labels(x)?;
        Ok(l.iter().filter(|&&v| v).count() as f64 / l.len() as f64)
    }
}

pub fn activity_fraction(x: &Waveform) -> Result<f64> {
    ActivityDetector::default().fraction(x)
}

pub fn vad_labels(x: &Waveform) -> Result<Vec<bool>> {
    ActivityDetector::default().labels(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelMode {
    Release,
    Attack,
    Bypass,
}

impl LevelMode {
    pub const ALL: [LevelMode; 3] = [LevelMode::Release, LevelMode::Attack, LevelMode::Bypass];

    pub fn index(self) -> usize {
        match self {
            LevelMode::Release => 0,
            LevelMode::Attack => 1,
            LevelMode::Bypass => 2,
        }
    }
}

/// Categorical draw over release/attack/bypass.
pub fn draw_mode<R: Rng + ?Sized>(rng: &mut R, probs: &[f64; 3]) -> LevelMode {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, p) in LevelMode::ALL.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *m;
        }
    }
    // u landed in rounding slack; return the last mode with mass
    *LevelMode::ALL
        .iter()
        .zip(probs)
        .rev()
        .find(|(_, p)| **p > 0.0)
        .map(|(m, _)| m)
        .unwrap_or(&LevelMode::Bypass)
}

/// Scales `s` to the `target_db` dBFS RMS level. The gain ramps linearly from
/// unity to its final value over `ramp_secs`; the final gain is solved so that
/// the whole-signal RMS lands exactly on the target. Returns the output and
/// whether it had to be clipped to [-1, 1].
pub fn apply_level(s: &Waveform, target_db: f64, ramp_secs: f64) -> Result<(Waveform, bool)> {
    ensure!(target_db.is_finite(), "target level must be finite");
    ensure!(target_db <= 0.0, "target level {target_db} dBFS leaves no headroom");
    ensure!(ramp_secs >= 0.0, "ramp length must be non-negative");
    let x = s.to_f64();
    let n = x.len();
    let p = mean_square(s.samples());
    if n == 0 || p == 0.0 {
        return Ok((s.clone(), false));
    }
    let target_ms = 10f64.powf(target_db / 10.0);
    let ramp = ((ramp_secs * SAMPLE_RATE as f64).round() as usize).min(n);
    // out[i] = x[i] * (1 + (g - 1) r_i), r_i = min(i / ramp, 1); solve mean(out^2) = target
    let r = |i: usize| if ramp == 0 || i >= ramp { 1.0 } else { i as f64 / ramp as f64 };
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let ri = r(i);
        let (u, w) = ((1.0 - ri) * v, ri * v);
        a += w * w;
        b += 2.0 * u * w;
        c += u * u;
    }
    let (a, b, c) = (a / n as f64, b / n as f64, c / n as f64 - target_ms);
    let g = if (10.0 * (p / target_ms).log10()).abs() < 1e-12 {
        1.0
    } else if a > 0.0 {
        let disc = (b * b - 4.0 * a * c).max(0.0);
        (-b + disc.sqrt()) / (2.0 * a)
    } else {
        (target_ms / p).sqrt()
    };
    let mut clipped = false;
    let out: Vec<f32> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let y = v * (1.0 + (g - 1.0) * r(i));
            if y.abs() > 1.0 {
                clipped = true;
            }
            y.clamp(-1.0, 1.0) as f32
        })
        .collect();
    if clipped {
        warn!("apply_level clipped output at target {target_db:.1} dBFS");
    }
    Ok((Waveform::new(out)?, clipped))
}

/// Scales `noise` so that the full-utterance speech-to-noise power ratio is
/// `snr_db`; returns `(speech + scaled_noise, scaled_noise)`.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    ensure!(
        speech.len() == noise.len(),
        "speech ({}) and noise ({}) lengths differ",
        speech.len(),
        noise.len()
    );
    ensure!(snr_db.is_finite(), "snr must be finite");
    let ps = mean_square(speech.samples());
    let pn = mean_square(noise.samples());
    ensure!(ps > 0.0, "speech is silent");
    ensure!(pn > 0.0, "noise is silent");
    let k = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f32> = noise.samples().iter().map(|&v| (v as f64 * k) as f32).collect();
    let noisy: Vec<f32> = speech
        .samples()
        .iter()
        .zip(&scaled)
        .map(|(&s, &e)| s + e)
        .collect();
    Ok((Waveform::new(noisy)?, Waveform::new(scaled)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub duration_secs: f64,
    pub mode_probs: [f64; 3],
    pub gaussian_prob: f64,
    pub snr_range_db: (f64, f64),
    pub min_activity: f64,
    /// Linear onset ramp used by [`apply_level`].
    pub ramp_secs: f64,
    pub max_attempts: usize,
    pub seed: u64,
    pub wdrc: WdrcConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_secs: 5.0,
            mode_probs: [0.4, 0.3, 0.3],
            gaussian_prob: 0.7,
            snr_range_db: (-5.0, 15.0),
            min_activity: 0.6,
            ramp_secs: 0.05,
            max_attempts: 1000,
            seed: 0,
            wdrc: WdrcConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.duration_secs > 0.0, "duration must be positive");
        ensure!(
            self.mode_probs.iter().all(|p| *p >= 0.0 && p.is_finite())
                && (self.mode_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "mode probabilities {:?} must be non-negative and sum to 1",
            self.mode_probs
        );
        ensure!((0.0..=1.0).contains(&self.gaussian_prob), "gaussian probability outside [0, 1]");
        ensure!(
            self.snr_range_db.0 <= self.snr_range_db.1,
            "snr range {:?} is inverted",
            self.snr_range_db
        );
        ensure!(self.max_attempts > 0, "max_attempts must be positive");
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_secs * SAMPLE_RATE as f64).round() as usize
    }
}

/// Named waveforms to draw from.
#[derive(Debug, Clone, Default)]
pub struct SourcePool {
    pub items: Vec<(String, Waveform)>,
}

impl SourcePool {
    pub fn new(items: Vec<(String, Waveform)>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Loads every `.wav` file in `dir` (sorted by file name).
    pub fn from_dir(dir: &Path) -> Result<Self> {
        ensure!(dir.is_dir(), "source directory {} does not exist", dir.display());
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        ensure!(!paths.is_empty(), "no .wav files in {}", dir.display());
        let items = paths
            .iter()
            .map(|p| {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                read_wav(p).map(|w| (id, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: u64,
    pub seed: u64,
    /// Mode as drawn from the categorical distribution.
    pub mode: LevelMode,
    /// Set when a release draw fell back to bypass (empty level interval).
    pub release_fallback: bool,
    pub speech_rms_db: f64,
    pub target_level_db: f64,
    pub snr_db: f64,
    pub gaussian_added: bool,
    pub gaussian_level_db: Option<f64>,
    pub speech_id: String,
    pub speech_offset: usize,
    pub noise_id: String,
    pub noise_offset: usize,
    pub audiogram_index: usize,
    pub crop_attempts: usize,
    pub clipped: bool,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub noisy: Waveform,
    pub audiogram: Audiogram,
    pub target: Waveform,
    /// Level-transformed clean speech before compensation.
    pub clean: Waveform,
    pub vad: Vec<bool>,
    pub meta: SampleMeta,
}

impl SynthSample {
    pub fn id(&self) -> String {
        format!("{:06}", self.meta.index)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn crop_to<R: Rng + ?Sized>(rng: &mut R, x: &Waveform, len: usize) -> (Waveform, usize) {
    let s = x.samples();
    if s.len() >= len {
        let off = rng.random_range(0..=s.len() - len);
        (Waveform::new(s[off..off + len].to_vec()).expect("finite"), off)
    } else {
        let off = rng.random_range(0..s.len());
        let v = (0..len).map(|i| s[(off + i) % s.len()]).collect();
        (Waveform::new(v).expect("finite"), off)
    }
}

/// Stateless sample generator; safe to share across worker threads.
#[derive(Debug)]
pub struct Synthesizer<'a> {
    pub speech: &'a SourcePool,
    pub noise: &'a SourcePool,
    pub audiograms: &'a [Audiogram],
    pub config: SynthConfig,
    compensator: Compensator,
    detector: ActivityDetector,
}

impl<'a> Synthesizer<'a> {
    pub fn new(
        speech: &'a SourcePool,
        noise: &'a SourcePool,
        audiograms: &'a [Audiogram],
        config: SynthConfig,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(!speech.is_empty(), "speech pool is empty");
        ensure!(!noise.is_empty(), "noise pool is empty");
        ensure!(!audiograms.is_empty(), "audiogram pool is empty");
        let len = config.n_samples();
        ensure!(
            speech.items.iter().any(|(_, w)| w.len() >= len),
            "no speech item is at least {:.2} s long",
            config.duration_secs
        );
        ensure!(
            len > StftConfig::default().pad_start(),
            "duration {:.3} s is shorter than half an analysis frame",
            config.duration_secs
        );
        Ok(Self {
            speech,
            noise,
            audiograms,
            config,
            compensator: Compensator::new(StftConfig::default(), config.wdrc)?,
            detector: ActivityDetector::default(),
        })
    }

    /// Per-sample rng: stream `index` of the corpus seed.
    pub fn sample_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index);
        rng
    }

    fn draw_crop(&self, rng: &mut ChaCha8Rng, attempts: &mut usize) -> Result<(Waveform, String, usize)> {
        let len = self.config.n_samples();
        loop {
            ensure_attempts(*attempts, self.config.max_attempts)?;
            *attempts += 1;
            let (id, src) = &self.speech.items[rng.random_range(0..self.speech.len())];
            if src.len() < len {
                continue;
            }
            let (crop, off) = crop_to(rng, src, len);
            if self.detector.fraction(&crop)? >= self.config.min_activity {
                return Ok((crop, id.clone(), off));
            }
        }
    }

    pub fn sample(&self, index: u64) -> Result<SynthSample> {
        let cfg = &self.config;
        let mut rng = self.sample_rng(index);
        let len = cfg.n_samples();
        let mut attempts = 0;

        let (mut speech, mut speech_id, mut speech_offset) = self.draw_crop(&mut rng, &mut attempts)?;
        let (noise_id, noise_src) = &self.noise.items[rng.random_range(0..self.noise.len())];
        let (mut noise, noise_offset) = crop_to(&mut rng, noise_src, len);
        let mode = draw_mode(&mut rng, &cfg.mode_probs);

        let mut speech_db = rms_db(&speech);
        let mut release_fallback = false;
        let target_level = match mode {
            LevelMode::Release => {
                let lo = speech_db + 5.0;
                if lo >= -10.0 {
                    release_fallback = true;
                    None
                } else {
                    Some(uniform(&mut rng, lo, -10.0))
                }
            }
            LevelMode::Attack => {
                // an empty interval redraws the crop, keeping the mode
                while -35.0 >= speech_db - 5.0 {
                    (speech, speech_id, speech_offset) = self.draw_crop(&mut rng, &mut attempts)?;
                    speech_db = rms_db(&speech);
                }
                Some(uniform(&mut rng, -35.0, speech_db - 5.0))
            }
            LevelMode::Bypass => None,
        };
        let (clean, clipped) = match target_level {
            Some(level) => apply_level(&speech, level, cfg.ramp_secs)?,
            None => (speech.clone(), false),
        };

        let gaussian_added = rng.random::<f64>() < cfg.gaussian_prob;
        let mut gaussian_level_db = None;
        if gaussian_added {
            let e_db = rms_db(&noise);
            let level = uniform(&mut rng, e_db - 10.0, e_db);
            let sigma = 10f64.powf(level / 20.0);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::validation(e.to_string()))?;
            let v: Vec<f32> = noise
                .samples()
                .iter()
                .map(|&x| (x as f64 + normal.sample(&mut rng)) as f32)
                .collect();
            noise = Waveform::new(v)?;
            gaussian_level_db = Some(level);
        }
        let snr_db = uniform(&mut rng, cfg.snr_range_db.0, cfg.snr_range_db.1);
        let (noisy, _) = mix_at_snr(&clean, &noise, snr_db)?;

        let audiogram_index = rng.random_range(0..self.audiograms.len());
        let audiogram = self.audiograms[audiogram_index];
        let (compensated, _) = self.compensator.compensate(&clean, &audiogram)?;
        let vad = self.detector.labels(&clean)?;
        let target = vad_guarded_target(&compensated, &clean, &vad, &self.detector.stft)?;

        Ok(SynthSample {
            noisy,
            audiogram,
            target,
            vad,
            meta: SampleMeta {
                index,
                seed: cfg.seed,
                mode,
                release_fallback,
                speech_rms_db: speech_db,
                target_level_db: target_level.unwrap_or(speech_db),
                snr_db,
                gaussian_added,
                gaussian_level_db,
                speech_id,
                speech_offset,
                noise_id: noise_id.clone(),
                noise_offset,
                audiogram_index,
                crop_attempts: attempts,
                clipped,
            },
            clean,
        })
    }

    /// Synthesises samples `range` using `workers` threads; output order and
    /// content do not depend on the worker count.
    pub fn batch(&self, range: std::ops::Range<u64>, workers: usize) -> Result<Vec<SynthSample>> {
        if workers <= 1 {
            return range.map(|i| self.sample(i)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| range.into_par_iter().map(|i| self.sample(i)).collect())
    }
}

fn ensure_attempts(done: usize, max: usize) -> Result<()> {
    if done >= max {
        return Err(Error::validation(format!(
            "speech pool exhausted: no crop reached the activity threshold in {max} attempts"
        )));
    }
    Ok(())
}

pub fn synthesize_sample(
    speech: &SourcePool,
    noise: &SourcePool,
    audiograms: &[Audiogram],
    cfg: &SynthConfig,
    index: u64,
) -> Result<SynthSample> {
    Synthesizer::new(speech, noise, audiograms, *cfg)?.sample(index)
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub noisy_path: String,
    pub target_path: String,
    pub clean_path: String,
    pub vad_path: String,
    pub audiogram: Audiogram,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| Error::validation(format!("cannot open manifest {}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        let m = Self { root, records };
        m.check_paths()?;
        Ok(m)
    }

    pub fn check_paths(&self) -> Result<()> {
        for r in &self.records {
            for p in [&r.noisy_path, &r.target_path, &r.clean_path, &r.vad_path] {
                let full = self.root.join(p);
                ensure!(full.is_file(), "manifest entry {} points to missing {}", r.id, full.display());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_sample(&self, i: usize) -> Result<SynthSample> {
        let r = &self.records[i];
        let vad_bytes = fs::read(self.root.join(&r.vad_path))?;
        ensure!(
            vad_bytes.iter().all(|b| *b <= 1),
            "vad sidecar {} holds bytes other than 0/1",
            r.vad_path
        );
        Ok(SynthSample {
            noisy: read_wav(&self.root.join(&r.noisy_path))?,
            target: read_wav(&self.root.join(&r.target_path))?,
            clean: read_wav(&self.root.join(&r.clean_path))?,
            audiogram: r.audiogram,
            vad: vad_bytes.iter().map(|&b| b == 1).collect(),
            meta: r.meta.clone(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<SynthSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Streams samples to disk as float32 WAVs plus one-byte-per-frame VAD
/// sidecars; `finish` writes the JSON-lines manifest.
#[derive(Debug)]
pub struct CorpusWriter {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl CorpusWriter {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["noisy", "target", "clean", "vad"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, s: &SynthSample) -> Result<()> {
        let id = s.id();
        let rec = ManifestRecord {
            noisy_path: format!("noisy/{id}.wav"),
            target_path: format!("target/{id}.wav"),
            clean_path: format!("clean/{id}.wav"),
            vad_path: format!("vad/{id}.vad"),
            audiogram: s.audiogram,
            meta: s.meta.clone(),
            id,
        };
        let root = &self.root;
        write_wav(&root.join(&rec.noisy_path), &s.noisy, WavFormat::Float32)?;
        write_wav(&root.join(&rec.target_path), &s.target, WavFormat::Float32)?;
        write_wav(&root.join(&rec.clean_path), &s.clean, WavFormat::Float32)?;
        let bytes: Vec<u8> = s.vad.iter().map(|&v| v as u8).collect();
        fs::write(root.join(&rec.vad_path), bytes)?;
        self.records.push(rec);
        Ok(())
    }

    pub fn finish(self) -> Result<CorpusManifest> {
        let mut w = BufWriter::new(fs::File::create(self.root.join(MANIFEST_FILE))?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(CorpusManifest {
            root: self.root,
            records: self.records,
        })
    }
}

pub fn write_corpus(root: &Path, samples: &[SynthSample]) -> Result<CorpusManifest> {
    let mut w = CorpusWriter::create(root)?;
    for s in samples {
        w.push(s)?;
    }
    w.finish()
}

/// Counts drawn modes in release/attack/bypass order.
pub fn mode_histogram(samples: &[SynthSample]) -> [usize; 3] {
    let mut h = [0; 3];
    for s in samples {
        h[s.meta.mode.index()] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;
    use std::f64::consts::PI;

    fn tone(amp: f64, len: usize) -> Waveform {
        Waveform::from_f64(
            &(0..len)
                .map(|n| amp * (2.0 * PI * 440.0 * n as f64 / 16000.0).sin())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn tone_then_silence() -> Waveform {
        let mut v: Vec<f64> = (0..48_000)
            .map(|n| 0.05 * (2.0 * PI * 300.0 * n as f64 / 16000.0).sin())
            .collect();
        v.resize(80_000, 0.0);
        Waveform::from_f64(&v).unwrap()
    }

    #[test]
    fn rms_db_examples() {
        let square = Waveform::new((0..1600).map(|n| if (n / 8) % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        assert_eq!(rms_db(&square), 0.0);
        assert!((rms_db(&tone(1.0, 16000)) + 3.0103).abs() < 1e-3);
        assert_eq!(rms_db(&Waveform::zeros(100)), -100.0);
    }

    #[test]
    fn activity_examples() {
        assert_eq!(activity_fraction(&Waveform::zeros(80_000)).unwrap(), 0.0);
        assert_eq!(activity_fraction(&tone(1.0, 80_000)).unwrap(), 1.0);
        // 189 frames touch the tone, 2 more from hangover: 191 / 313
        let f = activity_fraction(&tone_then_silence()).unwrap();
        assert!((f - 0.6).abs() <= 0.02, "{f}");
        assert!((f - 191.0 / 313.0).abs() < 1e-12);
    }

    #[test]
    fn vad_label_examples() {
        assert!(vad_labels(&Waveform::zeros(8000)).unwrap().iter().all(|v| !v));
        assert!(vad_labels(&tone(0.5, 8000)).unwrap().iter().all(|v| *v));
        let l = vad_labels(&tone_then_silence()).unwrap();
        assert_eq!(l.len(), 313);
        // first frame lying entirely in the silence: l * 256 - 256 >= 48000
        let boundary = 189usize;
        let flip = l.iter().position(|v| !v).unwrap();
        assert!(flip.abs_diff(boundary) <= 2, "flip at {flip}");
        assert!(l[flip..].iter().all(|v| !v));
    }

    #[test]
    fn draw_mode_frequencies_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut h = [0usize; 3];
        for _ in 0..10_000 {
            h[draw_mode(&mut rng, &[0.4, 0.3, 0.3]).index()] += 1;
        }
        for (c, p) in h.iter().zip([0.4, 0.3, 0.3]) {
            assert!((*c as f64 / 10_000.0 - p).abs() < 0.02, "{h:?}");
        }
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| draw_mode(&mut r, &[1.0, 0.0, 0.0]) == LevelMode::Release));
        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| draw_mode(&mut r, &[0.4, 0.3, 0.3])).collect::<Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
    }

    #[test]
    fn apply_level_examples() {
        let x = tone(0.3, 16000);
        let (y, _) = apply_level(&x, rms_db(&x), 0.05).unwrap();
        assert!(x.samples().iter().zip(y.samples()).all(|(a, b)| (a - b).abs() < 1e-6));
        let quiet = tone(10f64.powf(-20.0 / 20.0) * 2f64.sqrt(), 32000);
        assert!((rms_db(&quiet) + 20.0).abs() < 1e-3);
        let (louder, clipped) = apply_level(&quiet, -10.0, 0.05).unwrap();
        assert!(!clipped);
        let steady = Waveform::new(louder.samples()[1600..].to_vec()).unwrap();
        assert!((rms_db(&steady) + 10.0).abs() < 0.1);
        assert!((rms_db(&louder) + 10.0).abs() < 1e-6);
        let (z, _) = apply_level(&Waveform::zeros(100), -10.0, 0.05).unwrap();
        assert!(z.samples().iter().all(|&v| v == 0.0));
        assert!(apply_level(&x, 3.0, 0.05).is_err());
    }

    #[test]
    fn mix_examples() {
        let s = tone(0.2, 8000);
        let n = toy::white_noise(&mut ChaCha8Rng::seed_from_u64(2), 8000, 0.1);
        let (noisy, e) = mix_at_snr(&s, &n, 0.0).unwrap();
        let db = 10.0 * (mean_square(s.samples()) / mean_square(e.samples())).log10();
        assert!(db.abs() < 0.01);
        assert!(noisy.samples().iter().zip(s.samples()).zip(e.samples()).all(|((y, a), b)| *y == a + b));

        // known powers: speech 1.0, noise 0.25 -> k^2 = 1 / (0.25 * 10)
        let ones = Waveform::new(vec![1.0; 100]).unwrap();
        let halves = Waveform::new(vec![0.5; 100]).unwrap();
        let (_, e) = mix_at_snr(&ones, &halves, 10.0).unwrap();
        let k = (1.0f64 / (0.25 * 10.0)).sqrt();
        assert!(e.samples().iter().all(|&v| (v as f64 - 0.5 * k).abs() < 1e-6));
        assert!(mix_at_snr(&s, &Waveform::zeros(8000), 5.0).is_err());
        assert!(mix_at_snr(&s, &Waveform::zeros(10), 5.0).is_err());
    }

    fn pools() -> (SourcePool, SourcePool, Vec<Audiogram>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (toy::speech_pool(&mut rng, 4, 3.0), toy::noise_pool(&mut rng, 3, 3.0), toy::audiogram_pool(&mut rng, 5))
    }

    #[test]
    fn synthesized_sample_invariants() {
        let (sp, np, ap) = pools();
        let cfg = SynthConfig {
            duration_secs: 1.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let synth = Synthesizer::new(&sp, &np, &ap, cfg).unwrap();
        let det = ActivityDetector::default();
        for i in 0..20 {
            let s = synth.sample(i).unwrap();
            assert_eq!(s.noisy.len(), 16000);
            assert_eq!(s.target.len(), 16000);
            assert_eq!(s.vad.len(), StftConfig::default().n_frames(16000));
            assert!(s.meta.snr_db >= -5.0 && s.meta.snr_db <= 15.0);
            let noise: Vec<f64> = s.noisy.samples().iter().zip(s.clean.samples()).map(|(a, b)| *a as f64 - *b as f64).collect();
            let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
            let realized = 10.0 * (mean_square(s.clean.samples()) / pn).log10();
            assert!((realized - s.meta.snr_db).abs() < 0.1);
            assert_eq!(det.labels(&s.clean).unwrap(), s.vad);
            match s.meta.mode {
                LevelMode::Release if !s.meta.release_fallback => {
                    let l = rms_db(&s.clean);
                    assert!(l > s.meta.speech_rms_db + 5.0 - 1e-6 && l <= -10.0 + 1e-6, "{l}");
                }
                LevelMode::Attack => {
                    let l = rms_db(&s.clean);
                    assert!(l >= -35.0 - 1e-6 && l < s.meta.speech_rms_db - 5.0 + 1e-6, "{l}");
                }
                _ => {}
            }
            let w = crate::compensation::vad_sample_weights(&s.vad, s.clean.len(), 256);
            for n in 0..s.clean.len() {
                if w[n] == 0.0 {
                    assert_eq!(s.target.samples()[n], s.clean.samples()[n]);
                }
            }
        }
        assert_eq!(synth.sample(7).unwrap(), synth.sample(7).unwrap());
        let a = synth.batch(0..6, 1).unwrap();
        let b = synth.batch(0..6, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pool_errors() {
        let (sp, np, ap) = pools();
        let silent = SourcePool::new(vec![("quiet".into(), Waveform::zeros(48_000))]);
        let cfg = SynthConfig {
            duration_secs: 1.0,
            max_attempts: 20,
            ..SynthConfig::default()
        };
        let err = synthesize_sample(&silent, &np, &ap, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("exhausted"));
        assert!(Synthesizer::new(&SourcePool::default(), &np, &ap, cfg).is_err());
        assert!(Synthesizer::new(&sp, &np, &[], cfg).is_err());
        let bad = SynthConfig {
            mode_probs: [0.5, 0.5, 0.5],
            ..cfg
        };
        assert!(Synthesizer::new(&sp, &np, &ap, bad).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let (sp, np, ap) = pools();
        let cfg = SynthConfig {
            duration_secs: 0.5,
            seed: 9,
            ..SynthConfig::default()
        };
        let samples = Synthesizer::new(&sp, &np, &ap, cfg).unwrap().batch(0..3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &samples).unwrap();
        let m = CorpusManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.load_all().unwrap(), samples);
        fs::remove_file(dir.path().join("vad/000001.vad")).unwrap();
        assert!(CorpusManifest::load(&dir.path().join(MANIFEST_FILE)).is_err());
    }
}
