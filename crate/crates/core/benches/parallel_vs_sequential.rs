use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;

use speckle_ddpm::data::{make_phantom_volume, PhantomSpec, Speckle};
use speckle_ddpm::par::{with_execution, Execution};
use speckle_ddpm::{fuse_volume, sweep_t, EpsilonPredictor, FusionConfig, Image, NetworkConfig, NoisePredictor, VarianceSchedule};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn predict(c: &mut Criterion) {
    let net = EpsilonPredictor::new(NetworkConfig::desk(), 0).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = Image::randn(64, 64, &mut rng).clamp(-1.0, 1.0);
    let mut g = c.benchmark_group("predict_64x64");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_execution(mode, || net.predict(&x, 30).unwrap()))
        });
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let net = EpsilonPredictor::new(NetworkConfig::tiny(), 0).unwrap();
    let sched = VarianceSchedule::oct();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let x = Image::randn(32, 32, &mut rng).clamp(-1.0, 1.0);
    let ts = [10, 20, 30, 40];
    let mut g = c.benchmark_group("sweep_4t_32x32");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_execution(mode, || sweep_t(&x, &ts, &net, &sched, 0).unwrap()))
        });
    }
    g.finish();
}

fn fusion(c: &mut Criterion) {
    let spec = PhantomSpec::random(64, 64, Speckle::GammaMultiplicative { shape: 10.0 }, 3);
    let vol = make_phantom_volume(&spec, 7, 2).unwrap().noisy;
    let cfg = FusionConfig::default();
    let mut g = c.benchmark_group("fuse_volume_7x64x64");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_execution(mode, || fuse_volume(&vol, &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, predict, sweep, fusion);
criterion_main!(benches);
