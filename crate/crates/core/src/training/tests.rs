use super::*;
use crate::losses::multires_stft_loss;
use crate::synthesis::{SynthConfig, Synthesizer};
use crate::toy;

fn corpus(n: u64, seed: u64) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speech = toy::speech_pool(&mut rng, 3, 1.0);
    let noise = toy::noise_pool(&mut rng, 3, 1.0);
    let auds = toy::audiogram_pool(&mut rng, 4);
    let cfg = SynthConfig {
        duration_secs: 0.25,
        seed,
        ..SynthConfig::default()
    };
    Synthesizer::new(&speech, &noise, &auds, cfg).unwrap().batch(0..n, 1).unwrap()
}

fn tiny_cfg(precision: Precision) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        disc: DiscConfig {
            n_fft: 64,
            hop: 32,
            compress_exponent: 0.3,
        },
        resolutions: StftResolutionSet(vec![(128, 64), (64, 32)]),
        batch_size: 2,
        epochs: 3,
        seed: 5,
        precision,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_halves_every_ten_epochs() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(1), 5e-4);
    assert_eq!(c.lr_at(10), 5e-4);
    assert_eq!(c.lr_at(11), 2.5e-4);
    assert_eq!(c.lr_at(21), 1.25e-4);
    assert_eq!(c.lr_at(25), 1.25e-4);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { oracle: "pesq".into(), ..TrainConfig::default() }.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::default());
    // partial configs fill in defaults
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.lr, 5e-4);
}

#[test]
fn label_resampling_follows_frame_start_times() {
    let src = vec![false, true, true, false];
    assert_eq!(resample_labels(&src, 256, 32, 6), vec![false, false, false, false, true, true]);
    assert_eq!(resample_labels(&src, 256, 256, 4), src);
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = corpus(2, 1);
    let refs: Vec<&SynthSample> = data.iter().collect();
    let run = || {
        let mut t = Trainer::new(tiny_cfg(Precision::F32)).unwrap();
        let b = t.batch(&refs).unwrap();
        let r1 = t.train_step(&b).unwrap();
        let r2 = t.train_step(&b).unwrap();
        (param_bits(&t.g_store).unwrap(), param_bits(&t.d_store).unwrap(), r1, r2)
    };
    assert_eq!(run(), run());
}

#[test]
fn generator_step_leaves_discriminator_untouched() {
    let data = corpus(2, 2);
    let refs: Vec<&SynthSample> = data.iter().collect();
    let mut t = Trainer::new(tiny_cfg(Precision::F32)).unwrap();
    let b = t.batch(&refs).unwrap();
    let out = t.net.forward(&b.noisy, &b.hl, true).unwrap();
    let before_d = param_bits(&t.d_store).unwrap();
    let before_g = param_bits(&t.g_store).unwrap();
    t.g_step(&b, &out, 1e-3).unwrap();
    assert_eq!(param_bits(&t.d_store).unwrap(), before_d);
    assert_ne!(param_bits(&t.g_store).unwrap(), before_g);
}

#[test]
fn stft_only_generator_step_equals_plain_regression_step() {
    let data = corpus(2, 3);
    let refs: Vec<&SynthSample> = data.iter().collect();
    let cfg = TrainConfig {
        weights: LossWeights {
            alpha: 0.0,
            lambda: 0.0,
            mu: 1.0,
            focal_weight: 0.0,
        },
        grad_clip: None,
        ..tiny_cfg(Precision::F64)
    };
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let b = t.batch(&refs).unwrap();
    let out = t.net.forward(&b.noisy, &b.hl, true).unwrap();
    t.g_step(&b, &out, 1e-3).unwrap();

    // the same step without any adversarial machinery
    let mut store = ParamStore::new(cfg.seed * 2 + 1, DType::F64);
    let net = HearNet::new(&mut Scope::new(&mut store, "g"), cfg.model).unwrap();
    let y = net.forward(&b.noisy, &b.hl, true).unwrap().enhanced;
    let loss = multires_stft_loss(&b.target, &y, &cfg.resolutions).unwrap();
    let grads = loss.backward().unwrap();
    Adam::default().step(store.params(), &grads, 1e-3, None).unwrap();

    let (a, p) = (t.g_store.snapshot(), store.snapshot());
    for (k, v) in &a {
        let d: f64 = (v - &p[k]).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap();
        assert!(d < 1e-12, "{k}: {d}");
    }
}

#[test]
fn non_finite_input_names_the_batch() {
    let data = corpus(2, 4);
    let refs: Vec<&SynthSample> = data.iter().collect();
    let mut t = Trainer::new(tiny_cfg(Precision::F32)).unwrap();
    let mut b = t.batch(&refs).unwrap();
    b.noisy = (b.noisy * f64::NAN).unwrap();
    match t.train_step(&b) {
        Err(Error::NonFinite { sample_ids, .. }) => assert_eq!(sample_ids, b.ids),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn resume_mid_epoch_matches_uninterrupted_run() {
    let data = corpus(6, 6);
    let val = corpus(2, 7);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(Precision::F32);

    let mut full = Trainer::new(cfg.clone()).unwrap();
    let full_summary = full.fit(&data, &val, Some(&dir.path().join("full"))).unwrap();
    assert_eq!(full.step, 9);
    assert_eq!(full_summary.epochs.len(), 3);

    let part_dir = dir.path().join("part");
    let mut a = Trainer::new(TrainConfig { max_steps: Some(4), ..cfg.clone() }).unwrap();
    let s = a.fit(&data, &val, Some(&part_dir)).unwrap();
    assert!(s.truncated);
    assert_eq!((a.epoch, a.batch_in_epoch), (2, 1));

    let ck = Checkpoint::load(&part_dir.join("last.safetensors")).unwrap();
    let mut b = Trainer::new(cfg.clone()).unwrap();
    b.restore(&ck).unwrap();
    b.fit(&data, &val, Some(&part_dir)).unwrap();
    assert_eq!(param_bits(&b.g_store).unwrap(), param_bits(&full.g_store).unwrap());
    assert_eq!(param_bits(&b.d_store).unwrap(), param_bits(&full.d_store).unwrap());
    assert_eq!(b.best_oracle, full.best_oracle);

    let steps_full = read_step_log(&dir.path().join("full/steps.csv")).unwrap();
    let steps_part = read_step_log(&part_dir.join("steps.csv")).unwrap();
    assert_eq!(steps_full, steps_part);
    assert!(dir.path().join("full/best.safetensors").exists());
    assert!(dir.path().join("full/epoch_003.safetensors").exists());
}

#[test]
fn corrupt_or_mismatched_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny_cfg(Precision::F32)).unwrap();
    let path = dir.path().join("c.safetensors");
    t.checkpoint().save(&path).unwrap();
    assert!(load_generator(&path, Some(ModelConfig::tiny()), DType::F32).is_ok());
    let err = load_generator(&path, Some(ModelConfig::variant(36, 4)), DType::F32).err().unwrap();
    assert!(err.is_validation(), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let mut fresh = Trainer::new(tiny_cfg(Precision::F32)).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert_eq!(fresh.step, 0);
    let other = Trainer::new(TrainConfig {
        model: ModelConfig {
            channels: 12,
            ..ModelConfig::tiny()
        },
        ..tiny_cfg(Precision::F32)
    })
    .unwrap();
    assert!(fresh.restore(&other.checkpoint()).is_err());
}

#[test]
fn ablation_grid_reports_every_cell() {
    let data = corpus(2, 8);
    let val = corpus(2, 9);
    let base = TrainConfig {
        epochs: 1,
        max_steps: Some(1),
        ..tiny_cfg(Precision::F32)
    };
    let grid = AblationGrid {
        alphas: vec![0.5, 1.0],
        lambdas: vec![0.3],
    };
    let rep = ablate_weights(&grid, &base, &data, &val).unwrap();
    assert_eq!(rep.rows.len(), 2);
    for (r, a) in rep.rows.iter().zip([0.5, 1.0]) {
        assert_eq!((r.alpha, r.lambda, r.mu, r.focal_weight), (a, 0.3, 1.0, 0.3));
        assert!([r.final_total_loss, r.si_snr_db, r.sdr_db, r.oracle].iter().all(|v| v.is_finite()));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ablation.csv");
    rep.write_csv(&p).unwrap();
    assert_eq!(AblationReport::read_csv(&p).unwrap(), rep);

    // a single cell reproduces a plain training run
    let one = ablate_weights(
        &AblationGrid {
            alphas: vec![0.5],
            lambdas: vec![0.3],
        },
        &base,
        &data,
        &val,
    )
    .unwrap();
    let mut t = Trainer::new(base.clone()).unwrap();
    t.fit(&data, &val, None).unwrap();
    let m = t.evaluate(&val).unwrap().means;
    assert_eq!((one.rows[0].si_snr_db, one.rows[0].sdr_db, one.rows[0].oracle), (m["si_snr_db"], m["sdr_db"], m["oracle"]));
}
