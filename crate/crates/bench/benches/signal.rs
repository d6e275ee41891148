use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hearnet_core::spectral::Stft;
use hearnet_core::toy::{audiogram_pool, speech_pool};
use hearnet_core::{Compensator, StftConfig, WdrcConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = speech_pool(&mut rng, 1, 5.0);
    let x = pool.items[0].1.to_f64();
    let stft = Stft::new(StftConfig::default()).unwrap();
    let spec = stft.analyse(&x).unwrap();
    c.bench_function("stft analyse 5 s", |b| b.iter(|| stft.analyse(black_box(&x)).unwrap()));
    c.bench_function("stft synthesise 5 s", |b| b.iter(|| stft.synthesise(black_box(&spec), x.len()).unwrap()));
}

fn wdrc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = speech_pool(&mut rng, 1, 5.0);
    let audiogram = audiogram_pool(&mut rng, 1).remove(0);
    let comp = Compensator::new(StftConfig::default(), WdrcConfig::default()).unwrap();
    let x = &pool.items[0].1;
    c.bench_function("wdrc compensate 5 s", |b| b.iter(|| comp.compensate(black_box(x), &audiogram).unwrap()));
}

criterion_group!(benches, stft, wdrc);
criterion_main!(benches);
