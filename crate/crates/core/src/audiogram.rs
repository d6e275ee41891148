//! Hearing-loss audiograms: validation, dense interpolation onto STFT bins,
//! pure-tone average and severity classes.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Standard audiometric test frequencies in Hz.
pub const AUDIOMETRIC_FREQS: [f64; 6] = [250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0];

pub const MIN_THRESHOLD_DB: f64 = -10.0;
pub const MAX_THRESHOLD_DB: f64 = 120.0;

/// Six hearing thresholds in dB HL, one per [`AUDIOMETRIC_FREQS`] entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Audiogram {
    thresholds: [f64; 6],
}

impl Audiogram {
    pub fn new(thresholds: [f64; 6]) -> Result<Self> {
        for (f, &h) in AUDIOMETRIC_FREQS.iter().zip(&thresholds) {
            ensure!(h.is_finite(), "threshold at {f} Hz is not finite");
            ensure!(
                (MIN_THRESHOLD_DB..=MAX_THRESHOLD_DB).contains(&h),
                "threshold {h} dB HL at {f} Hz outside [{MIN_THRESHOLD_DB}, {MAX_THRESHOLD_DB}]"
            );
        }
        Ok(Self { thresholds })
    }

    pub fn from_slice(thresholds: &[f64]) -> Result<Self> {
        ensure!(
            thresholds.len() == 6,
            "audiogram needs exactly 6 thresholds, got {}",
            thresholds.len()
        );
        let mut t = [0.0; 6];
        t.copy_from_slice(thresholds);
        Self::new(t)
    }

    pub fn flat(level: f64) -> Result<Self> {
        Self::new([level; 6])
    }

    pub fn thresholds(&self) -> &[f64; 6] {
        &self.thresholds
    }

    pub fn frequencies(&self) -> &'static [f64; 6] {
        &AUDIOMETRIC_FREQS
    }

    /// Mean threshold at 500, 1000, 2000 and 4000 Hz.
    pub fn pure_tone_average(&self) -> f64 {
        self.thresholds[1..5].iter().sum::<f64>() / 4.0
    }

    pub fn severity(&self) -> SeverityClass {
        // PTA of a validated audiogram is always finite.
        classify_severity(self.pure_tone_average()).expect("finite PTA")
    }

    /// Piecewise-linear interpolation onto the `n_fft/2 + 1` STFT bin centers.
    pub fn interpolate(&self, n_bins: usize, sample_rate: f64, n_fft: usize) -> Result<DenseAudiogram> {
        interpolate_audiogram(self, n_bins, sample_rate, n_fft)
    }
}

impl fmt::Display for Audiogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, h) in self.thresholds.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{h}")?;
        }
        write!(f, "] dB HL")
    }
}

/// An audiogram resampled onto STFT bin centers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAudiogram {
    pub values: Vec<f64>,
    pub bin_freqs: Vec<f64>,
}

impl DenseAudiogram {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Linear interpolation between audiometric knots, flat outside [250, 8000] Hz.
pub fn interpolate_audiogram(
    audiogram: &Audiogram,
    n_bins: usize,
    sample_rate: f64,
    n_fft: usize,
) -> Result<DenseAudiogram> {
    ensure!(n_fft >= 2, "n_fft must be at least 2");
    ensure!(
        n_bins == n_fft / 2 + 1,
        "n_bins {n_bins} does not match n_fft/2+1 = {}",
        n_fft / 2 + 1
    );
    ensure!(
        sample_rate.is_finite() && sample_rate / 2.0 >= AUDIOMETRIC_FREQS[5],
        "sample rate {sample_rate} Hz cannot represent 8000 Hz"
    );
    let h = audiogram.thresholds();
    let bin_freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * sample_rate / n_fft as f64).collect();
    let values = bin_freqs.iter().map(|&f| interpolate_at(h, f)).collect();
    Ok(DenseAudiogram { values, bin_freqs })
}

fn interpolate_at(h: &[f64; 6], f: f64) -> f64 {
    let knots = &AUDIOMETRIC_FREQS;
    if f <= knots[0] {
        return h[0];
    }
    if f >= knots[5] {
        return h[5];
    }
    let i = knots.iter().rposition(|&k| k <= f).unwrap_or(0).min(4);
    let t = (f - knots[i]) / (knots[i + 1] - knots[i]);
    // convex form keeps knots exact and preserves elementwise ordering under rounding
    (1.0 - t) * h[i] + t * h[i + 1]
}

pub fn pure_tone_average(audiogram: &Audiogram) -> f64 {
    audiogram.pure_tone_average()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityClass {
    Mild,
    Moderate,
    Severe,
}

impl fmt::Display for SeverityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SeverityClass::Mild => "mild",
            SeverityClass::Moderate => "moderate",
            SeverityClass::Severe => "severe",
        };
        f.write_str(s)
    }
}

/// `< 40` mild, `[40, 70]` moderate, `> 70` severe.
pub fn classify_severity(pta: f64) -> Result<SeverityClass> {
    ensure!(pta.is_finite(), "pure-tone average must be finite, got {pta}");
    Ok(if pta < 40.0 {
        SeverityClass::Mild
    } else if pta <= 70.0 {
        SeverityClass::Moderate
    } else {
        SeverityClass::Severe
    })
}

/// On-disk JSON form: `{"freqs": [...], "thresholds_dB": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AudiogramRecord {
    pub freqs: Vec<f64>,
    #[serde(rename = "thresholds_dB")]
    pub thresholds_db: Vec<f64>,
}

impl From<&Audiogram> for AudiogramRecord {
    fn from(a: &Audiogram) -> Self {
        Self {
            freqs: AUDIOMETRIC_FREQS.to_vec(),
            thresholds_db: a.thresholds.to_vec(),
        }
    }
}

impl TryFrom<&AudiogramRecord> for Audiogram {
    type Error = Error;

    fn try_from(r: &AudiogramRecord) -> Result<Self> {
        ensure!(
            r.freqs.len() == 6 && r.freqs.iter().zip(&AUDIOMETRIC_FREQS).all(|(a, b)| a == b),
            "audiogram frequencies {:?} must be exactly {:?}",
            r.freqs,
            AUDIOMETRIC_FREQS
        );
        Audiogram::from_slice(&r.thresholds_db)
    }
}

impl Serialize for Audiogram {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AudiogramRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Audiogram {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = AudiogramRecord::deserialize(d)?;
        Audiogram::try_from(&r).map_err(serde::de::Error::custom)
    }
}

/// Parses either a single JSON object, a JSON array of objects, or CSV rows of
/// six thresholds (an optional non-numeric header row is skipped).
pub fn parse_audiograms(text: &str) -> Result<Vec<Audiogram>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let r: AudiogramRecord = serde_json::from_str(text)?;
        return Ok(vec![Audiogram::try_from(&r)?]);
    }
    if trimmed.starts_with('[') {
        let rs: Vec<AudiogramRecord> = serde_json::from_str(text)?;
        return rs.iter().map(Audiogram::try_from).collect();
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (row_idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(vals) => out.push(Audiogram::from_slice(&vals)?),
            Err(_) if row_idx == 0 => continue,
            Err(e) => return Err(Error::validation(format!("csv row {}: {e}", row_idx + 1))),
        }
    }
    ensure!(!out.is_empty(), "no audiograms found");
    Ok(out)
}

pub fn load_audiograms(path: &Path) -> Result<Vec<Audiogram>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot read audiogram file {}: {e}", path.display())))?;
    parse_audiograms(&text)
}

/// Loads a file that must contain exactly one audiogram.
pub fn load_audiogram(path: &Path) -> Result<Audiogram> {
    let mut v = load_audiograms(path)?;
    ensure!(v.len() == 1, "{} holds {} audiograms, expected 1", path.display(), v.len());
    Ok(v.remove(0))
}
