use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use octdiff::data::normalize;
use octdiff::metrics::{ssim, wilcoxon_signed_rank, SsimParams};
use octdiff::Domain;
use octdiff_bench::phantom_pair;

fn image_metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("ssim");
    for side in [64, 256] {
        let (a, b) = phantom_pair(side, 4);
        let (a, b) = (normalize(&a, Domain::Raw8Bit).unwrap(), normalize(&b, Domain::Raw8Bit).unwrap());
        g.bench_function(BenchmarkId::from_parameter(side), |bch| {
            bch.iter(|| ssim(&a, &b, &SsimParams::default()).unwrap())
        });
    }
    g.finish();
}

fn wilcoxon(c: &mut Criterion) {
    let mut g = c.benchmark_group("wilcoxon");
    for n in [20, 50] {
        let d: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 4.5) * (1.0 + i as f64 / 7.0)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &d, |b, d| b.iter(|| wilcoxon_signed_rank(d).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, image_metrics, wilcoxon);
criterion_main!(benches);
