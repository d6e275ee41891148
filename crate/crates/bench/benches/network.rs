use std::hint::black_box;
use std::time::Duration;

use candle_core::DType;
use criterion::{criterion_group, criterion_main, Criterion};
use hearnet_core::model::{HearNet, ModelConfig, ParamStore, Scope};
use hearnet_core::toy::{audiogram_pool, speech_pool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn enhance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = speech_pool(&mut rng, 1, 1.0);
    let audiogram = audiogram_pool(&mut rng, 1).remove(0);
    let x = &pool.items[0].1;
    let mut group = c.benchmark_group("enhance 1 s");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    for cfg in [ModelConfig::variant(36, 4), ModelConfig::variant(48, 4)] {
        let mut ps = ParamStore::new(0, DType::F32);
        HearNet::new(&mut Scope::new(&mut ps, "g"), cfg).unwrap();
        // Detached parameters: no autograd graph is recorded.
        let net = HearNet::inference(&ps, "g", cfg).unwrap();
        group.bench_function(cfg.name(), |b| b.iter(|| net.enhance(black_box(x), &audiogram, DType::F32).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, enhance);
criterion_main!(benches);
