use std::fs;
use std::path::{Path, PathBuf};

use hearnet_core::audiogram::{load_audiogram, load_audiograms, AudiogramRecord};
use hearnet_core::metrics::{evaluate_pair, known_range, oracle_by_name, CommandMetric, EvalReport, MetricRegistry};
use hearnet_core::model::ModelConfig;
use hearnet_core::synthesis::{mode_histogram, CorpusManifest, CorpusWriter, SourcePool, MANIFEST_FILE};
use hearnet_core::training::{ablate_weights, load_generator, AblationGrid, Checkpoint, Precision, TrainConfig, Trainer};
use hearnet_core::wav::{read_wav, write_wav, WavFormat};
use hearnet_core::{toy, Compensator, Error, StftConfig, SynthConfig, SynthSample, Synthesizer, WdrcConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{AblateArgs, EnhanceArgs, EvalArgs, Fig6Args, Result, SynthArgs, ToyPoolArgs, TrainArgs, TrainOverrides};

/// Samples synthesized and written per chunk, bounding memory for large corpora.
const SYNTH_CHUNK: u64 = 256;

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Writes the effective configuration next to the outputs.
fn echo_config<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(invalid(format!("{what} directory {} does not exist", p.display())));
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(invalid(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn parse_variant(s: &str) -> Result<ModelConfig> {
    s.parse()
}

pub fn toy_pool(a: ToyPoolArgs) -> Result<()> {
    if a.n_speech == 0 || a.n_noise == 0 || a.n_audiograms == 0 {
        return Err(invalid("toy pool counts must be positive"));
    }
    if !(a.secs > 0.0) {
        return Err(invalid("toy pool item length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let speech = toy::speech_pool(&mut rng, a.n_speech, a.secs);
    let noise = toy::noise_pool(&mut rng, a.n_noise, a.secs);
    let auds = toy::audiogram_pool(&mut rng, a.n_audiograms);
    for (sub, pool) in [("speech", &speech), ("noise", &noise)] {
        let dir = a.out.join(sub);
        fs::create_dir_all(&dir)?;
        for (id, w) in &pool.items {
            write_wav(&dir.join(format!("{id}.wav")), w, WavFormat::Float32)?;
        }
    }
    let recs: Vec<AudiogramRecord> = auds.iter().map(AudiogramRecord::from).collect();
    fs::write(a.out.join("audiograms.json"), serde_json::to_string_pretty(&recs)? + "\n")?;
    println!("wrote {} speech, {} noise items and {} audiograms to {}", a.n_speech, a.n_noise, a.n_audiograms, a.out.display());
    Ok(())
}

/// Effective synthesis run, echoed as `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthRun {
    speech: Option<PathBuf>,
    noise: Option<PathBuf>,
    audiograms: Option<PathBuf>,
    n: u64,
    workers: usize,
    #[serde(flatten)]
    synth: SynthConfig,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            speech: None,
            noise: None,
            audiograms: None,
            n: 0,
            workers: 1,
            synth: SynthConfig::default(),
        }
    }
}

pub fn synth(a: SynthArgs, deterministic: bool) -> Result<()> {
    let mut run: SynthRun = match &a.config {
        Some(p) => read_config(p)?,
        None => SynthRun::default(),
    };
    run.speech = a.speech.or(run.speech);
    run.noise = a.noise.or(run.noise);
    run.audiograms = a.audiograms.or(run.audiograms);
    if let Some(n) = a.n {
        run.n = n;
    }
    if let Some(s) = a.seed {
        run.synth.seed = s;
    }
    if let Some(d) = a.duration {
        run.synth.duration_secs = d;
    }
    if let Some(w) = a.workers {
        run.workers = w;
    }
    if deterministic {
        run.workers = 1;
    }
    if run.n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    if run.workers == 0 {
        return Err(invalid("--workers must be at least 1"));
    }
    run.synth.validate()?;
    let speech_dir = run.speech.clone().ok_or_else(|| invalid("--speech is required"))?;
    let noise_dir = run.noise.clone().ok_or_else(|| invalid("--noise is required"))?;
    let aud_path = run.audiograms.clone().ok_or_else(|| invalid("--audiograms is required"))?;
    require_dir(&speech_dir, "speech")?;
    require_dir(&noise_dir, "noise")?;
    require_file(&aud_path, "audiogram file")?;

    let speech = SourcePool::from_dir(&speech_dir)?;
    let noise = SourcePool::from_dir(&noise_dir)?;
    let auds = load_audiograms(&aud_path)?;
    let synth = Synthesizer::new(&speech, &noise, &auds, run.synth)?;
    echo_config(&a.out, &run)?;
    let mut writer = CorpusWriter::create(&a.out)?;
    let mut hist = [0usize; 3];
    let mut start = 0;
    while start < run.n {
        let end = (start + SYNTH_CHUNK).min(run.n);
        let batch: Vec<SynthSample> = synth.batch(start..end, run.workers)?;
        for (h, c) in hist.iter_mut().zip(mode_histogram(&batch)) {
            *h += c;
        }
        for s in &batch {
            writer.push(s)?;
        }
        log::info!("synthesized {end}/{}", run.n);
        start = end;
    }
    let m = writer.finish()?;
    println!(
        "synthesized {} samples into {} (modes: release {}, attack {}, bypass {})",
        m.len(),
        a.out.join(MANIFEST_FILE).display(),
        hist[0],
        hist[1],
        hist[2]
    );
    Ok(())
}

/// Effective training run, echoed as `config.json`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    train_manifest: Option<PathBuf>,
    val_manifest: Option<PathBuf>,
    #[serde(flatten)]
    train: TrainConfig,
}

fn resolve_train_run(o: &TrainOverrides) -> Result<TrainRun> {
    let mut run: TrainRun = match &o.config {
        Some(p) => read_config(p)?,
        None => TrainRun::default(),
    };
    if let Some(p) = &o.train {
        run.train_manifest = Some(p.clone());
    }
    if let Some(p) = &o.val {
        run.val_manifest = Some(p.clone());
    }
    let c = &mut run.train;
    if let Some(v) = &o.variant {
        c.model = parse_variant(v)?;
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(e) = o.epochs {
        c.epochs = e;
    }
    if let Some(b) = o.batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = o.lr {
        c.lr = lr;
    }
    if let Some(m) = o.max_steps {
        c.max_steps = Some(m);
    }
    if let Some(k) = o.checkpoint_every {
        c.checkpoint_every = Some(k);
    }
    if let Some(p) = &o.precision {
        c.precision = match p.to_ascii_lowercase().as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(invalid(format!("unknown precision {other:?}; use f32 or f64"))),
        };
    }
    c.validate()?;
    let train = run.train_manifest.as_ref().ok_or_else(|| invalid("--train is required"))?;
    require_file(train, "training manifest")?;
    if let Some(v) = &run.val_manifest {
        require_file(v, "validation manifest")?;
    }
    Ok(run)
}

fn load_splits(run: &TrainRun) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let train_path = run.train_manifest.as_ref().expect("checked in resolve_train_run");
    let train = CorpusManifest::load(train_path)?.load_all()?;
    let val = match &run.val_manifest {
        Some(p) => CorpusManifest::load(p)?.load_all()?,
        None => train.clone(),
    };
    if train.is_empty() {
        return Err(invalid(format!("{} lists no samples", train_path.display())));
    }
    Ok((train, val))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let run = resolve_train_run(&a.run)?;
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let (train, val) = load_splits(&run)?;
    echo_config(&a.out, &run)?;
    let mut t = Trainer::new(run.train.clone())?;
    if let Some(r) = &a.resume {
        t.restore(&Checkpoint::load(r)?)?;
    }
    let s = t.fit(&train, &val, Some(&a.out))?;
    let best = s.best_oracle.map_or("n/a".to_string(), |b| format!("{b:.4}"));
    println!(
        "trained {} to step {} (epoch {}{}); best validation oracle {best}; checkpoints in {}",
        run.train.model,
        t.step,
        t.epoch.min(run.train.epochs),
        if s.truncated { ", stopped by max_steps" } else { "" },
        a.out.display()
    );
    Ok(())
}

fn expected_variant(v: &Option<String>) -> Result<Option<ModelConfig>> {
    v.as_deref().map(parse_variant).transpose()
}

pub fn enhance(a: EnhanceArgs) -> Result<()> {
    require_file(&a.input, "input")?;
    require_file(&a.checkpoint, "checkpoint")?;
    let x = read_wav(&a.input)?;
    let hl = load_audiogram(&a.audiogram)?;
    let dtype = Precision::F32.dtype();
    let (_store, net) = load_generator(&a.checkpoint, expected_variant(&a.variant)?, dtype)?;
    let (y, _vad) = net.enhance(&x, &hl, dtype)?;
    debug_assert_eq!(y.len(), x.len());
    write_wav(&a.out, &y, WavFormat::Float32)?;
    println!("enhanced {} ({:.2} s) -> {}", a.input.display(), x.duration_secs(), a.out.display());
    Ok(())
}

pub fn fig6(a: Fig6Args) -> Result<()> {
    require_file(&a.input, "input")?;
    let x = read_wav(&a.input)?;
    let hl = load_audiogram(&a.audiogram)?;
    let comp = Compensator::new(StftConfig::default(), WdrcConfig::default())?;
    let (y, gains) = comp.compensate(&x, &hl)?;
    write_wav(&a.out, &y, WavFormat::Float32)?;
    println!("compensated {} -> {} (max band gain {:.1} dB)", a.input.display(), a.out.display(), gains.max_gain());
    Ok(())
}

fn parse_metric(spec: &str) -> Result<(String, CommandMetric)> {
    let (name, cmd) = spec.split_once('=').ok_or_else(|| invalid(format!("metric {spec:?} must look like name=program args")))?;
    let mut parts = cmd.split_whitespace().map(str::to_string);
    let program = parts.next().ok_or_else(|| invalid(format!("metric {name} has no program")))?;
    Ok((name.trim().to_string(), CommandMetric { program, args: parts.collect() }))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let m = CorpusManifest::load(&a.manifest)?;
    let oracle = oracle_by_name(&a.oracle)?;
    let mut registry = MetricRegistry::new();
    let mut external = Vec::new();
    for spec in &a.metrics {
        let (name, cmd) = parse_metric(spec)?;
        registry.register(&name, known_range(&name), true, cmd.into_metric())?;
        external.push(name);
    }
    let dtype = Precision::F32.dtype();
    let model = match &a.checkpoint {
        Some(p) => Some(load_generator(p, expected_variant(&a.variant)?, dtype)?),
        None => None,
    };
    let mut rows = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let s = m.load_sample(i)?;
        let est = match &model {
            Some((_, net)) => net.enhance(&s.noisy, &s.audiogram, dtype)?.0,
            None => s.noisy.clone(),
        };
        rows.push(evaluate_pair(&s.id(), &s.target, &est, &s.audiogram, oracle.as_ref(), &registry, &external)?);
    }
    let report = EvalReport::new(rows)?;
    fs::create_dir_all(&a.out)?;
    report.write_csv(&a.out.join("report.csv"))?;
    report.write_json(&a.out.join("report.json"))?;
    let means: Vec<String> = report.means.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    println!("evaluated {} samples: {}", report.rows.len(), means.join(", "));
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let run = resolve_train_run(&a.run)?;
    let grid = AblationGrid {
        alphas: a.alphas.clone(),
        lambdas: a.lambdas.clone(),
    };
    let (train, val) = load_splits(&run)?;
    #[derive(Serialize)]
    struct Echo<'a> {
        #[serde(flatten)]
        run: &'a TrainRun,
        grid: &'a AblationGrid,
    }
    echo_config(&a.out, &Echo { run: &run, grid: &grid })?;
    let rep = ablate_weights(&grid, &run.train, &train, &val)?;
    let path = a.out.join("ablation.csv");
    rep.write_csv(&path)?;
    println!("ablation over {} cells written to {}", rep.rows.len(), path.display());
    Ok(())
}
