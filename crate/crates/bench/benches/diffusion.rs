use criterion::{criterion_group, criterion_main, Criterion};
use octdiff::denoiser::Trainer;
use octdiff::diffusion::forward_marginal;
use octdiff::sampler::sample_standardized_noise;
use octdiff::{denoise, InferenceConfig, NlmConfig, NoiseFamily, ScheduleParams, TrainConfig, UNet, UNetConfig, Variant};
use octdiff_bench::phantom_pair;

fn noise(c: &mut Criterion) {
    let s = ScheduleParams::default().build().unwrap();
    let (x0, _) = phantom_pair(64, 1);
    c.bench_function("gamma_noise/64x64/t=1", |b| {
        b.iter(|| sample_standardized_noise(&s, 1, NoiseFamily::Gamma, (64, 64), 9).unwrap())
    });
    c.bench_function("forward_marginal/64x64/t=70", |b| b.iter(|| forward_marginal(&s, &x0, 70, 9).unwrap()));
}

fn model(c: &mut Criterion) {
    let s = ScheduleParams::default().build().unwrap();
    let data: Vec<_> = (0..8).map(|k| phantom_pair(64, k).0).collect();
    let net = UNet::new(UNetConfig::default(), 0).unwrap();
    let mut g = c.benchmark_group("unet");
    g.sample_size(10);
    let cfg = TrainConfig { iterations: 1 << 30, ..TrainConfig::default() };
    let mut trainer = Trainer::new(net.clone(), s.clone(), cfg).unwrap();
    g.bench_function("train_step/batch8/64x64", |b| b.iter(|| trainer.step(&data).unwrap()));
    let (_, y) = phantom_pair(64, 2);
    let cfg = InferenceConfig::default();
    for v in [Variant::Ddgm, Variant::Gard] {
        g.bench_function(format!("denoise/{v}/64x64"), |b| {
            b.iter(|| denoise(&y, v, &s, Some(&net), &cfg, &NlmConfig::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, noise, model);
criterion_main!(benches);
