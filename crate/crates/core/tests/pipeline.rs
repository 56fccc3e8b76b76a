use std::time::Instant;

use octdiff::data::{generate_sample, normalize, Corpus, CorpusManifest, ImageSet, PhantomParams, SpeckleParams};
use octdiff::fidelity::{nlm_fast, nlm_reference, NlmParams};
use octdiff::metrics::psnr;
use octdiff::{denoise, Domain, ImageField, InferenceConfig, NlmConfig, OracleBackend, ScheduleParams, Variant};

fn quantized(f: &ImageField) -> ImageField {
    ImageField::new(normalize(f, Domain::Raw8Bit).unwrap().values().mapv(f64::round), Domain::Raw8Bit).unwrap()
}

fn manifest(count: usize, seed: u64) -> CorpusManifest {
    CorpusManifest::new(count, seed, PhantomParams::default(), SpeckleParams::default()).unwrap()
}

/// Mean noisy-vs-clean PSNR of the default 64x64 corpus of 50, seed 0.
const NOISY_BASELINE_DB: f64 = 20.3197870441;

#[test]
fn noisy_baseline_is_pinned() {
    let m = manifest(50, 0);
    let mean = (0..50)
        .map(|i| {
            let s = generate_sample(&m, i).unwrap();
            psnr(&quantized(&s.noisy), &quantized(&s.clean)).unwrap()
        })
        .sum::<f64>()
        / 50.0;
    assert!((mean - NOISY_BASELINE_DB).abs() < 1e-9, "{mean}");
}

#[test]
fn corpus_files_match_regenerated_samples() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::create(dir.path(), manifest(4, 21), false).unwrap();
    (0..corpus.len()).for_each(|i| corpus.write_sample(i).unwrap());
    let reopened = Corpus::open(dir.path()).unwrap();
    assert_eq!(reopened.manifest(), corpus.manifest());
    for i in 0..reopened.len() {
        let s = generate_sample(reopened.manifest(), i).unwrap();
        for (set, field) in [(ImageSet::Clean, &s.clean), (ImageSet::Noisy, &s.noisy), (ImageSet::Avg, &s.less_noisy)] {
            assert_eq!(reopened.load(set, i).unwrap(), quantized(field), "{set} {i}");
        }
    }
}

#[test]
fn fast_nlm_beats_reference_by_5x() {
    let m = CorpusManifest::new(
        1,
        5,
        PhantomParams {
            width: 256,
            height: 256,
            ..Default::default()
        },
        SpeckleParams::default(),
    )
    .unwrap();
    let s = generate_sample(&m, 0).unwrap();
    let y = normalize(&quantized(&s.noisy), Domain::Normalized).unwrap();
    let p = NlmParams {
        patch_radius: 2,
        search_radius: 7,
        ..NlmConfig::default().resolve(&y).unwrap()
    };
    let time = |f: &dyn Fn() -> ImageField| {
        let start = Instant::now();
        let out = f();
        (start.elapsed().as_secs_f64(), out)
    };
    let (t_fast, fast) = time(&|| nlm_fast(&y, &p).unwrap());
    let (t_ref, reference) = time(&|| nlm_reference(&y, &p).unwrap());
    let gap = (fast.values() - reference.values()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
    assert!(gap <= 1e-6, "max difference {gap}");
    println!("nlm 256x256: fast {t_fast:.3}s, reference {t_ref:.3}s");
    assert!(t_ref >= 5.0 * t_fast, "fast {t_fast:.3}s vs reference {t_ref:.3}s");
}

#[test]
fn variants_run_end_to_end_with_an_oracle() {
    let schedule = ScheduleParams::default().build().unwrap();
    let m = manifest(3, 9);
    for i in 0..3 {
        let s = generate_sample(&m, i).unwrap();
        let (clean8, noisy8) = (quantized(&s.clean), quantized(&s.noisy));
        let clean = normalize(&clean8, Domain::Normalized).unwrap();
        let y = normalize(&noisy8, Domain::Normalized).unwrap();
        let oracle = OracleBackend::new(&schedule, clean).unwrap();
        let base = psnr(&noisy8, &clean8).unwrap();
        for v in Variant::ALL {
            let d = denoise(&y, v, &schedule, Some(&oracle), &InferenceConfig::default(), &NlmConfig::default()).unwrap();
            assert_eq!(d.output.domain(), Domain::Normalized);
            assert_eq!(d.guide.is_some(), v.uses_nlm(), "{v}");
            let gain = psnr(&quantized(&d.output), &clean8).unwrap() - base;
            assert!(gain > 3.0, "{v} on sample {i}: gain {gain:.2} dB");
        }
    }
}
