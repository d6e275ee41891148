use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::error::{ensure, Result};
use crate::losses::LossWeights;
use crate::synthesis::SynthSample;

/// Cartesian grid over the adversarial and perceptual weights; the other
/// weights come from the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl AblationGrid {
    pub fn cells(&self, base: &LossWeights) -> Vec<LossWeights> {
        let mut out = Vec::new();
        for &alpha in &self.alphas {
            for &lambda in &self.lambdas {
                out.push(LossWeights { alpha, lambda, ..*base });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
    pub focal_weight: f64,
    pub steps: u64,
    pub final_total_loss: f64,
    pub si_snr_db: f64,
    pub sdr_db: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<AblationRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Trains one fresh model per grid cell with `base` and reports validation
/// metrics of the final parameters.
pub fn ablate_weights(grid: &AblationGrid, base: &TrainConfig, train: &[SynthSample], val: &[SynthSample]) -> Result<AblationReport> {
    ensure!(!grid.alphas.is_empty() && !grid.lambdas.is_empty(), "ablation grid is empty");
    ensure!(!val.is_empty(), "ablation needs validation samples");
    let mut rows = Vec::new();
    for weights in grid.cells(&base.weights) {
        let cfg = TrainConfig { weights, ..base.clone() };
        let mut t = Trainer::new(cfg)?;
        let summary = t.fit(train, val, None)?;
        let report = t.evaluate(val)?;
        log::info!("ablation alpha {} lambda {}: oracle {:.3}", weights.alpha, weights.lambda, report.means["oracle"]);
        rows.push(AblationRow {
            alpha: weights.alpha,
            lambda: weights.lambda,
            mu: weights.mu,
            focal_weight: weights.focal_weight,
            steps: t.step,
            final_total_loss: summary.steps.last().map_or(f64::NAN, |s| s.total),
            si_snr_db: report.means["si_snr_db"],
            sdr_db: report.means["sdr_db"],
            oracle: report.means["oracle"],
        });
    }
    Ok(AblationReport { rows })
}
