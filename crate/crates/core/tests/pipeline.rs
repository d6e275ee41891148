use candle_core::{DType, Device, Tensor};
use hearnet_core::metrics::si_snr;
use hearnet_core::model::{HearNet, ModelConfig, ParamStore, Scope};
use hearnet_core::synthesis::{write_corpus, CorpusManifest, MANIFEST_FILE};
use hearnet_core::toy::{audiogram_pool, noise_pool, speech_pool};
use hearnet_core::{SynthConfig, Synthesizer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn synthesized_corpus_survives_disk_and_feeds_the_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sp = speech_pool(&mut rng, 3, 1.0);
    let np = noise_pool(&mut rng, 2, 1.0);
    let ap = audiogram_pool(&mut rng, 3);
    let cfg = SynthConfig {
        duration_secs: 0.5,
        seed: 11,
        ..SynthConfig::default()
    };
    let samples = Synthesizer::new(&sp, &np, &ap, cfg).unwrap().batch(0..4, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), &samples).unwrap();
    assert_eq!(manifest.load_all().unwrap(), samples);
    let reloaded = CorpusManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(reloaded.len(), samples.len());

    let mut ps = ParamStore::new(5, DType::F32);
    let net = HearNet::new(&mut Scope::new(&mut ps, "g"), ModelConfig::variant(36, 4)).unwrap();
    for s in &samples {
        let (y, vad) = net.enhance(&s.noisy, &s.audiogram, DType::F32).unwrap();
        assert_eq!(y.len(), s.noisy.len());
        assert_eq!(vad.len(), s.vad.len());
        assert!(vad.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(si_snr(&s.target, &y).unwrap().is_finite());
    }
}

#[test]
fn inference_copy_matches_trainable_network_and_tracks_updates() {
    let cfg = ModelConfig::tiny();
    let mut ps = ParamStore::new(2, DType::F64);
    let net = HearNet::new(&mut Scope::new(&mut ps, "g"), cfg).unwrap();
    ps.randomize("_decoder.sp", 0.3, 7).unwrap();
    let infer = HearNet::inference(&ps, "g", cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ap = audiogram_pool(&mut rng, 2);
    let hl = net.dense_audiograms(&ap, DType::F64).unwrap();
    let x = Tensor::randn(0.0, 0.1, (2, 640), &Device::Cpu).unwrap();

    let a = net.forward(&x, &hl, false).unwrap();
    let b = infer.forward(&x, &hl, false).unwrap();
    assert!(max_abs_diff(&a.enhanced, &b.enhanced) < 1e-12);
    assert!(max_abs_diff(&a.vad, &b.vad) < 1e-12);

    ps.randomize("mask_decoder", 0.3, 8).unwrap();
    let a = net.forward(&x, &hl, false).unwrap();
    let c = infer.forward(&x, &hl, false).unwrap();
    assert!(max_abs_diff(&a.enhanced, &c.enhanced) < 1e-12);
    assert!(max_abs_diff(&b.enhanced, &c.enhanced) > 1e-6);
}
