//! Alternating discriminator/generator optimisation, validation,
//! checkpointing and the loss-weight ablation harness.

mod adam;
mod ablation;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablate_weights, AblationGrid, AblationReport, AblationRow};
pub use adam::{grad_norm, Adam};
pub use checkpoint::{Checkpoint, CheckpointMeta};

use crate::audiogram::Audiogram;
use crate::error::{ensure, Error, Result};
use crate::losses::{
    discriminator_loss, generator_loss, GeneratorInputs, LogSpectralDistance, LossBreakdown, LossWeights, PerceptualLoss,
    StftResolutionSet,
};
use crate::metrics::{evaluate_pair, oracle_by_name, EvalReport, EvalRow, MetricRegistry, QualityOracle};
use crate::model::{dense_audiograms, DiscConfig, Discriminator, HearNet, ModelConfig, NetOutput, ParamStore, Scope};
use crate::spectral::Waveform;
use crate::synthesis::SynthSample;

/// Frame hop the corpus VAD labels are computed on.
pub const LABEL_HOP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub disc: DiscConfig,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub focal_gamma: f64,
    pub resolutions: StftResolutionSet,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub oracle: String,
    pub precision: Precision,
    /// Stop after this many optimisation steps in total.
    pub max_steps: Option<u64>,
    /// Also write `last.safetensors` every this many steps.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            disc: DiscConfig::default(),
            lr: 5e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
            epochs: 25,
            batch_size: 4,
            weights: LossWeights::default(),
            focal_gamma: crate::losses::DEFAULT_FOCAL_GAMMA,
            resolutions: StftResolutionSet::default(),
            grad_clip: Some(5.0),
            seed: 0,
            oracle: "si_snr_proxy".to_string(),
            precision: Precision::F32,
            max_steps: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.resolutions.validate()?;
        ensure!(self.lr.is_finite() && self.lr > 0.0, "learning rate {} must be positive", self.lr);
        ensure!(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0, "lr decay factor {} must be in (0, 1]", self.lr_decay_factor);
        ensure!(self.lr_decay_every >= 1, "lr_decay_every must be at least 1");
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.focal_gamma >= 0.0, "focal gamma must be non-negative");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, "gradient clip {c} must be positive");
        }
        oracle_by_name(&self.oracle)?;
        Ok(())
    }

    /// lr * factor^floor((epoch - 1) / every), epochs counted from 1.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch.max(1) as i32 - 1) / self.lr_decay_every as i32)
    }
}

/// Maps corpus labels (hop LABEL_HOP) onto a model frame grid by frame start time.
pub fn resample_labels(labels: &[bool], src_hop: usize, dst_hop: usize, dst_frames: usize) -> Vec<bool> {
    if labels.is_empty() {
        return vec![false; dst_frames];
    }
    (0..dst_frames)
        .map(|t| {
            let i = ((t * dst_hop) as f64 / src_hop as f64).round() as usize;
            labels[i.min(labels.len() - 1)]
        })
        .collect()
}

/// Stacked tensors for one optimisation step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub noisy: Tensor,
    pub target: Tensor,
    pub hl: Tensor,
    pub vad: Tensor,
    pub targets: Vec<Waveform>,
    pub audiograms: Vec<Audiogram>,
}

impl Batch {
    pub fn new(samples: &[&SynthSample], cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        ensure!(!samples.is_empty(), "empty batch");
        let len = samples[0].noisy.len();
        let frames = cfg.n_frames(len);
        let (mut noisy, mut target, mut vad) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            ensure!(s.noisy.len() == len && s.target.len() == len, "sample {} has length {}, batch uses {len}", s.id(), s.noisy.len());
            noisy.extend(s.noisy.to_f64());
            target.extend(s.target.to_f64());
            let labels = if s.vad.len() == frames && cfg.hop == LABEL_HOP {
                s.vad.clone()
            } else {
                resample_labels(&s.vad, LABEL_HOP, cfg.hop, frames)
            };
            vad.extend(labels.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let b = samples.len();
        let t = |v: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?) };
        let audiograms: Vec<Audiogram> = samples.iter().map(|s| s.audiogram.clone()).collect();
        Ok(Self {
            ids: samples.iter().map(|s| s.id()).collect(),
            noisy: t(noisy, (b, len))?,
            target: t(target, (b, len))?,
            hl: dense_audiograms(cfg, &audiograms, dtype)?,
            vad: t(vad, (b, frames))?,
            targets: samples.iter().map(|s| s.target.clone()).collect(),
            audiograms,
        })
    }
}

/// Logged values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub d_loss: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub stft: f64,
    pub focal: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
    pub focal_weight: f64,
    pub g_grad_norm: f64,
    pub d_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub val_si_snr_db: f64,
    pub val_sdr_db: f64,
    pub val_oracle: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_oracle: Option<f64>,
    /// Stopped by `max_steps` before finishing the epochs.
    pub truncated: bool,
}

fn rows_to_tensor_waves(t: &Tensor) -> Result<Vec<Waveform>> {
    let rows: Vec<Vec<f64>> = t.to_dtype(DType::F64)?.to_vec2()?;
    rows.iter().map(|r| Waveform::from_f64(r)).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Generator, discriminator and both optimisers.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub g_store: ParamStore,
    pub net: HearNet,
    /// Untracked twin of `net` for evaluation.
    infer: HearNet,
    pub d_store: ParamStore,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub step: u64,
    pub best_oracle: Option<f64>,
    oracle: Arc<dyn QualityOracle>,
    perceptual: Box<dyn PerceptualLoss>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        // independent streams for the two networks
        let mut g_store = ParamStore::new(cfg.seed.wrapping_mul(2).wrapping_add(1), dtype);
        let net = HearNet::new(&mut Scope::new(&mut g_store, "g"), cfg.model)?;
        let infer = HearNet::inference(&g_store, "g", cfg.model)?;
        let mut d_store = ParamStore::new(cfg.seed.wrapping_mul(2).wrapping_add(2), dtype);
        let disc = Discriminator::new(&mut Scope::new(&mut d_store, "d"), &cfg.disc, dtype)?;
        Ok(Self {
            oracle: oracle_by_name(&cfg.oracle)?,
            perceptual: Box::new(LogSpectralDistance::default()),
            cfg,
            g_store,
            net,
            infer,
            d_store,
            disc,
            opt_g: Adam::default(),
            opt_d: Adam::default(),
            epoch: 1,
            batch_in_epoch: 0,
            step: 0,
            best_oracle: None,
        })
    }

    pub fn dtype(&self) -> DType {
        self.cfg.precision.dtype()
    }

    pub fn set_perceptual(&mut self, p: Box<dyn PerceptualLoss>) {
        self.perceptual = p;
    }

    pub fn batch(&self, samples: &[&SynthSample]) -> Result<Batch> {
        Batch::new(samples, &self.cfg.model, self.dtype())
    }

    fn non_finite(&self, what: &str, batch: &Batch) -> Error {
        Error::NonFinite {
            what: what.to_string(),
            step: self.step,
            sample_ids: batch.ids.clone(),
        }
    }

    /// Oracle scores of the detached estimates against the targets.
    pub fn oracle_scores(&self, batch: &Batch, estimate: &Tensor) -> Result<Tensor> {
        let est = rows_to_tensor_waves(&estimate.detach())?;
        let scores = est
            .iter()
            .zip(&batch.targets)
            .zip(&batch.audiograms)
            .map(|((e, t), a)| self.oracle.score(t, e, a))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Tensor::from_vec(scores, batch.ids.len(), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Discriminator update against oracle scores of `estimate` (detached).
    pub fn d_step(&mut self, batch: &Batch, estimate: &Tensor, lr: f64) -> Result<(f64, f64)> {
        if !scalar(&estimate.sum_all()?)?.is_finite() {
            return Err(self.non_finite("generator output", batch));
        }
        let q = self.oracle_scores(batch, estimate)?;
        let loss = discriminator_loss(&batch.target, &estimate.detach(), &batch.hl, &self.disc, &q)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(self.non_finite("discriminator loss", batch));
        }
        let grads = loss.backward()?;
        let norm = self.opt_d.step(self.d_store.params(), &grads, lr, self.cfg.grad_clip)?;
        Ok((value, norm))
    }

    /// Generator update on a train-mode forward `out`, with the
    /// discriminator held fixed (its gradients are discarded).
    pub fn g_step(&mut self, batch: &Batch, out: &NetOutput, lr: f64) -> Result<(LossBreakdown, f64)> {
        let (loss, br) = self.generator_objective(batch, &out.enhanced, &out.vad)?;
        if !br.is_finite() {
            return Err(self.non_finite("generator loss", batch));
        }
        let grads = loss.backward()?;
        let norm = self.opt_g.step(self.g_store.params(), &grads, lr, self.cfg.grad_clip)?;
        Ok((br, norm))
    }

    fn generator_objective(&self, batch: &Batch, enhanced: &Tensor, vad: &Tensor) -> Result<(Tensor, LossBreakdown)> {
        let inp = GeneratorInputs {
            target: &batch.target,
            estimate: enhanced,
            audiogram: &batch.hl,
            vad_labels: &batch.vad,
            vad_probs: vad,
        };
        generator_loss(&inp, &self.disc, self.perceptual.as_ref(), &self.cfg.resolutions, &self.cfg.weights, self.cfg.focal_gamma)
    }

    /// One discriminator step on the current generator output, then one
    /// generator step against the updated, frozen discriminator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let lr = self.cfg.lr_at(self.epoch);
        let out = self.net.forward(&batch.noisy, &batch.hl, true)?;
        let (d_loss, d_norm) = self.d_step(batch, &out.enhanced.detach(), lr)?;
        let (br, g_norm) = self.g_step(batch, &out, lr)?;
        self.step += 1;
        let w = self.cfg.weights;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            d_loss,
            adversarial: br.adversarial,
            perceptual: br.perceptual,
            stft: br.stft,
            focal: br.focal,
            total: br.total,
            alpha: w.alpha,
            lambda: w.lambda,
            mu: w.mu,
            focal_weight: w.focal_weight,
            g_grad_norm: g_norm,
            d_grad_norm: d_norm,
        })
    }

    /// Enhanced outputs for `samples` in inference mode, batched by length.
    pub fn enhance_all(&self, samples: &[SynthSample]) -> Result<Vec<Waveform>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.cfg.batch_size) {
            let refs: Vec<&SynthSample> = chunk.iter().collect();
            let b = self.batch(&refs)?;
            out.extend(rows_to_tensor_waves(&self.infer.forward(&b.noisy, &b.hl, false)?.enhanced)?);
        }
        Ok(out)
    }

    /// Per-sample SDR, SI-SNR and oracle of the enhanced outputs vs targets.
    pub fn evaluate(&self, samples: &[SynthSample]) -> Result<EvalReport> {
        let enhanced = self.enhance_all(samples)?;
        let registry = MetricRegistry::new();
        let rows = samples
            .iter()
            .zip(&enhanced)
            .map(|(s, e)| evaluate_pair(&s.id(), &s.target, e, &s.audiogram, self.oracle.as_ref(), &registry, &[]))
            .collect::<Result<Vec<EvalRow>>>()?;
        EvalReport::new(rows)
    }

    /// Batch order of an epoch; a pure function of seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.g_store.snapshot();
        tensors.extend(self.d_store.snapshot());
        for (prefix, opt) in [("opt.g", &self.opt_g), ("opt.d", &self.opt_d)] {
            for (k, m) in &opt.m {
                tensors.insert(format!("{prefix}.m.{k}"), m.clone());
            }
            for (k, v) in &opt.v {
                tensors.insert(format!("{prefix}.v.{k}"), v.clone());
            }
        }
        let mut meta = CheckpointMeta::new(self.cfg.model);
        meta.train = Some(self.cfg.clone());
        meta.epoch = self.epoch;
        meta.batch_in_epoch = self.batch_in_epoch;
        meta.step = self.step;
        meta.adam_g_t = self.opt_g.t;
        meta.adam_d_t = self.opt_d.t;
        meta.best_oracle = self.best_oracle;
        Checkpoint { meta, tensors }
    }

    /// Restores a checkpoint written by `checkpoint` for the same model.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.meta.model != self.cfg.model {
            return Err(Error::Checkpoint(format!("checkpoint holds {}, trainer is configured for {}", ck.meta.model, self.cfg.model)));
        }
        self.g_store.load(&ck.subset("g."))?;
        self.d_store.load(&ck.subset("d."))?;
        for (prefix, opt, t) in [("opt.g", &mut self.opt_g, ck.meta.adam_g_t), ("opt.d", &mut self.opt_d, ck.meta.adam_d_t)] {
            opt.t = t;
            opt.m.clear();
            opt.v.clear();
            for (kind, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let p = format!("{prefix}.{kind}.");
                for (k, v) in ck.subset(&p) {
                    map.insert(k[p.len()..].to_string(), v.to_dtype(self.cfg.precision.dtype())?);
                }
            }
        }
        self.epoch = ck.meta.epoch;
        self.batch_in_epoch = ck.meta.batch_in_epoch;
        self.step = ck.meta.step;
        self.best_oracle = ck.meta.best_oracle;
        Ok(())
    }

    /// Epoch loop with per-epoch validation and best-checkpoint tracking.
    /// Resumes from the current position (set by `restore`). With `out`,
    /// writes `steps.csv`, `epochs.csv`, `epoch_NNN.safetensors`,
    /// `best.safetensors` and `last.safetensors` there.
    pub fn fit(&mut self, train: &[SynthSample], val: &[SynthSample], out: Option<&Path>) -> Result<TrainSummary> {
        ensure!(!train.is_empty(), "training set is empty");
        let logs = out.map(|d| RunLogs::open(d, self.step == 0)).transpose()?;
        let mut summary = TrainSummary {
            steps: Vec::new(),
            epochs: Vec::new(),
            best_oracle: self.best_oracle,
            truncated: false,
        };
        let n_batches = train.len().div_ceil(self.cfg.batch_size);
        while self.epoch <= self.cfg.epochs {
            let order = self.epoch_order(train.len(), self.epoch);
            while self.batch_in_epoch < n_batches {
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    summary.truncated = true;
                    if let Some(d) = out {
                        self.checkpoint().save(&d.join("last.safetensors"))?;
                    }
                    return Ok(summary);
                }
                let b = self.batch_in_epoch;
                let idx = &order[b * self.cfg.batch_size..((b + 1) * self.cfg.batch_size).min(train.len())];
                let refs: Vec<&SynthSample> = idx.iter().map(|&i| &train[i]).collect();
                let batch = self.batch(&refs)?;
                let rec = self.train_step(&batch)?;
                self.batch_in_epoch += 1;
                if let Some(l) = &logs {
                    l.step(&rec)?;
                }
                log::debug!("step {} epoch {} total {:.4} d {:.4}", rec.step, rec.epoch, rec.total, rec.d_loss);
                summary.steps.push(rec);
                if let (Some(d), Some(every)) = (out, self.cfg.checkpoint_every) {
                    if self.step % every == 0 {
                        self.checkpoint().save(&d.join("last.safetensors"))?;
                    }
                }
            }
            let rec = self.end_epoch(val, out)?;
            if let Some(l) = &logs {
                l.epoch(&rec)?;
            }
            log::info!("epoch {} val si-snr {:.2} dB oracle {:.3}", rec.epoch, rec.val_si_snr_db, rec.val_oracle);
            summary.epochs.push(rec);
        }
        summary.best_oracle = self.best_oracle;
        if let Some(d) = out {
            self.checkpoint().save(&d.join("last.safetensors"))?;
        }
        Ok(summary)
    }

    fn end_epoch(&mut self, val: &[SynthSample], out: Option<&Path>) -> Result<EpochRecord> {
        let (si, sd, or) = if val.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let r = self.evaluate(val)?;
            (r.means["si_snr_db"], r.means["sdr_db"], r.means["oracle"])
        };
        let best = !val.is_empty() && self.best_oracle.is_none_or(|b| or > b);
        if best {
            self.best_oracle = Some(or);
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            step: self.step,
            val_si_snr_db: si,
            val_sdr_db: sd,
            val_oracle: or,
            best,
        };
        self.epoch += 1;
        self.batch_in_epoch = 0;
        if let Some(d) = out {
            let ck = self.checkpoint();
            ck.save(&d.join(format!("epoch_{:03}.safetensors", rec.epoch)))?;
            if best {
                ck.save(&d.join("best.safetensors"))?;
            }
        }
        Ok(rec)
    }
}

/// Loads a generator for inference. `expect` refuses a checkpoint trained
/// for a different variant.
pub fn load_generator(path: &Path, expect: Option<ModelConfig>, dtype: DType) -> Result<(ParamStore, HearNet)> {
    let ck = Checkpoint::load(path)?;
    if let Some(m) = expect {
        if m != ck.meta.model {
            return Err(Error::Checkpoint(format!("{} holds a {} model, {} was requested", path.display(), ck.meta.model, m)));
        }
    }
    let mut store = ParamStore::new(0, dtype);
    HearNet::new(&mut Scope::new(&mut store, "g"), ck.meta.model)?;
    store.load(&ck.subset("g."))?;
    let net = HearNet::inference(&store, "g", ck.meta.model)?;
    Ok((store, net))
}

struct RunLogs {
    steps: PathBuf,
    epochs: PathBuf,
}

impl RunLogs {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let l = Self {
            steps: dir.join("steps.csv"),
            epochs: dir.join("epochs.csv"),
        };
        if fresh || !l.steps.exists() {
            let _ = std::fs::remove_file(&l.steps);
            let _ = std::fs::remove_file(&l.epochs);
        }
        Ok(l)
    }

    fn append<T: Serialize>(path: &Path, rec: &T) -> Result<()> {
        let new = !path.exists();
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(new).from_writer(f);
        w.serialize(rec)?;
        w.flush()?;
        Ok(())
    }

    fn step(&self, r: &StepRecord) -> Result<()> {
        Self::append(&self.steps, r)
    }

    fn epoch(&self, r: &EpochRecord) -> Result<()> {
        Self::append(&self.epochs, r)
    }
}

/// Reads a `steps.csv` written by `fit`.
pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>()?)
}

/// Snapshot of parameter values keyed by name, for bit-exact comparisons.
pub fn param_bits(store: &ParamStore) -> Result<BTreeMap<String, Vec<u64>>> {
    store
        .snapshot()
        .into_iter()
        .map(|(k, t)| Ok((k, t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().map(|v| v.to_bits()).collect())))
        .collect()
}

#[cfg(test)]
mod tests;
