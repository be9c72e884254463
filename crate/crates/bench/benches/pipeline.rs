use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctforensics::detector::{Detector, DetectorConfig};
use ctforensics::glcm::{feature_vector, GlcmSpec};
use ctforensics::grid::{full_grid, GridSpec};
use ctforensics::Heatmap;

fn grid(c: &mut Criterion) {
    let mut g = c.benchmark_group("full_grid");
    for ct in [128, 256, 512] {
        let spec = GridSpec::new(ct, 32, 4);
        g.bench_with_input(BenchmarkId::from_parameter(ct), &spec, |b, spec| {
            b.iter(|| full_grid(spec).len())
        });
    }
    g.finish();
}

fn glcm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = GridSpec::new(512, 32, 4);
    let n = spec.lattice_size();
    let map = Heatmap::from_grid(&spec, (0..n * n).map(|_| rng.random::<f32>()).collect()).unwrap();
    let glcm = GlcmSpec::default();
    c.bench_function("glcm_features_121x121", |b| {
        b.iter(|| feature_vector(&map, &glcm).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("detector_predict");
    g.sample_size(10);
    for width in [8, 32] {
        let cfg = DetectorConfig {
            base_width: width,
            ..DetectorConfig::default()
        };
        let net = Detector::new(cfg, 0).unwrap();
        let patches: Vec<f64> = (0..64 * 32 * 32).map(|_| rng.random::<f64>()).collect();
        g.throughput(Throughput::Elements(64));
        g.bench_with_input(BenchmarkId::new("width", width), &patches, |b, p| {
            b.iter(|| net.predict_proba(p).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, grid, glcm, detector);
criterion_main!(benches);
