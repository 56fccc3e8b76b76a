use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use octdiff::fidelity::{nlm_fast, nlm_reference, nrft_refine, solve_fidelity_pixel, FidelityProblem, NlmConfig};
use octdiff_bench::phantom_pair;

fn nlm(c: &mut Criterion) {
    let mut g = c.benchmark_group("nlm");
    g.sample_size(10);
    for side in [64, 128, 256] {
        let (_, y) = phantom_pair(side, 3);
        let p = NlmConfig::default().resolve(&y).unwrap();
        g.bench_with_input(BenchmarkId::new("fast", side), &y, |b, y| b.iter(|| nlm_fast(y, &p).unwrap()));
        g.bench_with_input(BenchmarkId::new("reference", side), &y, |b, y| {
            b.iter(|| nlm_reference(y, &p).unwrap())
        });
    }
    g.finish();
}

fn fidelity(c: &mut Criterion) {
    c.bench_function("newton/pixel", |b| {
        b.iter(|| solve_fidelity_pixel(black_box(0.3), black_box(-0.2), black_box(10.0), 1e-10, 50).unwrap())
    });
    let mut g = c.benchmark_group("nrft_refine");
    for side in [64, 256] {
        let (guide, y) = phantom_pair(side, 5);
        let x = y.to_latent().unwrap();
        g.bench_function(BenchmarkId::from_parameter(side), |b| {
            b.iter(|| nrft_refine(&FidelityProblem::new(&guide, &x, 10.0)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, nlm, fidelity);
criterion_main!(benches);
