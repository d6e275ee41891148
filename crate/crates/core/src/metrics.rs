//! Native waveform metrics, the bounded quality oracle and a registry of
//! externally implemented metrics.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::audiogram::Audiogram;
use crate::error::{ensure, Error, Result};
use crate::spectral::Waveform;
use crate::wav::{write_wav, WavFormat};

/// Ratios are reported inside [-CAP_DB, CAP_DB].
pub const CAP_DB: f64 = 60.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn capped_ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return CAP_DB;
    }
    if num <= 0.0 {
        return -CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
}

fn zero_mean(x: &Waveform) -> Vec<f64> {
    let v = x.to_f64();
    let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
    v.into_iter().map(|s| s - m).collect()
}

/// Scale-invariant SNR after mean removal, capped at +/-60 dB.
pub fn si_snr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    ensure!(reference.len() == estimate.len(), "lengths differ: {} vs {}", reference.len(), estimate.len());
    let r = zero_mean(reference);
    let e = zero_mean(estimate);
    let rr = dot(&r, &r);
    ensure!(rr > 0.0, "reference is silent");
    let a = dot(&e, &r) / rr;
    let target: Vec<f64> = r.iter().map(|v| a * v).collect();
    let noise: f64 = e.iter().zip(&target).map(|(x, t)| (x - t).powi(2)).sum();
    Ok(capped_ratio_db(dot(&target, &target), noise))
}

/// Signal-to-distortion ratio ||ref||^2 / ||ref - est||^2, capped at +/-60 dB.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    ensure!(reference.len() == estimate.len(), "lengths differ: {} vs {}", reference.len(), estimate.len());
    let r = reference.to_f64();
    let rr = dot(&r, &r);
    ensure!(rr > 0.0, "reference is silent");
    let err: f64 = r.iter().zip(estimate.samples()).map(|(a, &b)| (a - b as f64).powi(2)).sum();
    Ok(capped_ratio_db(rr, err))
}

/// Quality score in [0, 1] used as the discriminator's regression target.
pub trait QualityOracle: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, reference: &Waveform, estimate: &Waveform, audiogram: &Audiogram) -> Result<f64>;
}

/// clip((SI-SNR + 10) / 40, 0, 1). A proxy: the audiogram is accepted for
/// interface parity but unused.
#[derive(Debug, Clone, Copy, Default)]
pub struct SiSnrOracle;

pub fn default_oracle(reference: &Waveform, estimate: &Waveform, _audiogram: &Audiogram) -> Result<f64> {
    Ok(((si_snr(reference, estimate)? + 10.0) / 40.0).clamp(0.0, 1.0))
}

impl QualityOracle for SiSnrOracle {
    fn name(&self) -> &str {
        "si_snr_proxy"
    }

    fn score(&self, reference: &Waveform, estimate: &Waveform, audiogram: &Audiogram) -> Result<f64> {
        default_oracle(reference, estimate, audiogram)
    }
}

/// Resolves an oracle by its configured name.
pub fn oracle_by_name(name: &str) -> Result<Arc<dyn QualityOracle>> {
    match name {
        "si_snr_proxy" | "default" => Ok(Arc::new(SiSnrOracle)),
        other => Err(Error::Config(format!("unknown quality oracle {other:?}; available: si_snr_proxy"))),
    }
}

/// Valid score range of the well-known external metrics.
pub fn known_range(name: &str) -> Option<(f64, f64)> {
    match name {
        "pesq" | "pesq_wb" | "pesq_nb" => Some((-0.5, 4.5)),
        "stoi" | "estoi" | "hasqi" | "haspi" => Some((0.0, 1.0)),
        _ => None,
    }
}

pub type MetricFn = dyn Fn(&Waveform, &Waveform, Option<&Audiogram>) -> Result<f64> + Send + Sync;

struct Adapter {
    f: Arc<MetricFn>,
    range: (f64, f64),
    /// Serial adapters are invoked under a per-adapter lock.
    lock: Option<Mutex<()>>,
}

/// Externally implemented metrics, registered by name.
#[derive(Default)]
pub struct MetricRegistry {
    adapters: BTreeMap<String, Adapter>,
}

impl std::fmt::Debug for MetricRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricRegistry").field("names", &self.names()).finish()
    }
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `f` under `name`; the score range defaults to the metric's
    /// known range and must be given for unknown names.
    pub fn register(&mut self, name: &str, range: Option<(f64, f64)>, serial: bool, f: Arc<MetricFn>) -> Result<()> {
        let range = range
            .or_else(|| known_range(name))
            .ok_or_else(|| Error::Config(format!("metric {name:?} has no known range; give one explicitly")))?;
        ensure!(range.0 < range.1, "empty range {range:?} for metric {name:?}");
        self.adapters.insert(
            name.to_string(),
            Adapter {
                f,
                range,
                lock: serial.then(|| Mutex::new(())),
            },
        );
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn is_serial(&self, name: &str) -> Option<bool> {
        self.adapters.get(name).map(|a| a.lock.is_some())
    }

    /// Invokes the named metric and validates the score range.
    pub fn evaluate(&self, name: &str, reference: &Waveform, estimate: &Waveform, audiogram: Option<&Audiogram>) -> Result<f64> {
        let a = self
            .adapters
            .get(name)
            .ok_or_else(|| Error::Config(format!("metric {name:?} is not registered (registered: {:?})", self.names())))?;
        let score = match &a.lock {
            Some(m) => {
                let _guard = m.lock().unwrap_or_else(|p| p.into_inner());
                (a.f)(reference, estimate, audiogram)?
            }
            None => (a.f)(reference, estimate, audiogram)?,
        };
        if !(score.is_finite() && score >= a.range.0 && score <= a.range.1) {
            return Err(Error::Adapter(format!("metric {name:?} returned {score}, outside [{}, {}]", a.range.0, a.range.1)));
        }
        Ok(score)
    }
}

/// Adapter that shells out to an external program. Argument templates may
/// contain `{ref}`, `{est}` and `{audiogram}` placeholders, which are
/// replaced by paths of temporary float32 WAV files and a JSON audiogram; the
/// last non-empty stdout line is parsed as the score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandMetric {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandMetric {
    pub fn run(&self, reference: &Waveform, estimate: &Waveform, audiogram: Option<&Audiogram>) -> Result<f64> {
        let dir = tempfile::tempdir()?;
        let ref_path = dir.path().join("ref.wav");
        let est_path = dir.path().join("est.wav");
        let hl_path = dir.path().join("audiogram.json");
        write_wav(&ref_path, reference, WavFormat::Float32)?;
        write_wav(&est_path, estimate, WavFormat::Float32)?;
        if let Some(a) = audiogram {
            let mut f = std::fs::File::create(&hl_path)?;
            f.write_all(serde_json::to_string(a.thresholds())?.as_bytes())?;
        }
        let (rp, ep, hp) = (ref_path.to_string_lossy(), est_path.to_string_lossy(), hl_path.to_string_lossy());
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{ref}", &rp).replace("{est}", &ep).replace("{audiogram}", &hp))
            .collect();
        let out = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| Error::Adapter(format!("cannot run {}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::Adapter(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let line = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        line.trim()
            .parse::<f64>()
            .map_err(|_| Error::Adapter(format!("{} printed {line:?}, expected a number", self.program)))
    }

    pub fn into_metric(self) -> Arc<MetricFn> {
        Arc::new(move |r, e, a| self.run(r, e, a))
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub sdr_db: f64,
    pub si_snr_db: f64,
    pub oracle: f64,
    #[serde(default)]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Column name to mean over rows.
    pub means: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Builds the report and its aggregate means. Every row must carry the
    /// same external metric names.
    pub fn new(rows: Vec<EvalRow>) -> Result<Self> {
        let names: Vec<String> = rows.first().map(|r| r.external.keys().cloned().collect()).unwrap_or_default();
        for r in &rows {
            ensure!(r.external.keys().eq(names.iter()), "row {} has metrics {:?}, expected {names:?}", r.id, r.external.keys().collect::<Vec<_>>());
        }
        let n = rows.len().max(1) as f64;
        let mut means = BTreeMap::new();
        means.insert("sdr_db".to_string(), rows.iter().map(|r| r.sdr_db).sum::<f64>() / n);
        means.insert("si_snr_db".to_string(), rows.iter().map(|r| r.si_snr_db).sum::<f64>() / n);
        means.insert("oracle".to_string(), rows.iter().map(|r| r.oracle).sum::<f64>() / n);
        for k in &names {
            means.insert(k.clone(), rows.iter().map(|r| r.external[k]).sum::<f64>() / n);
        }
        Ok(Self { rows, means })
    }

    pub fn columns(&self) -> Vec<String> {
        let mut c = vec!["sdr_db".to_string(), "si_snr_db".to_string(), "oracle".to_string()];
        if let Some(r) = self.rows.first() {
            c.extend(r.external.keys().cloned());
        }
        c
    }

    /// Per-sample rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let cols = self.columns();
        let mut header = vec!["id".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.sdr_db.to_string(), r.si_snr_db.to_string(), r.oracle.to_string()];
            rec.extend(r.external.values().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["mean".to_string()];
        rec.extend(cols.iter().map(|c| self.means[c].to_string()));
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Evaluates one (reference, estimate) pair with the native metrics, the
/// oracle and every requested external metric.
pub fn evaluate_pair(
    id: &str,
    reference: &Waveform,
    estimate: &Waveform,
    audiogram: &Audiogram,
    oracle: &dyn QualityOracle,
    registry: &MetricRegistry,
    external: &[String],
) -> Result<EvalRow> {
    let mut ext = BTreeMap::new();
    for name in external {
        ext.insert(name.clone(), registry.evaluate(name, reference, estimate, Some(audiogram))?);
    }
    Ok(EvalRow {
        id: id.to_string(),
        sdr_db: sdr(reference, estimate)?,
        si_snr_db: si_snr(reference, estimate)?,
        oracle: oracle.score(reference, estimate, audiogram)?,
        external: ext,
    })
}
