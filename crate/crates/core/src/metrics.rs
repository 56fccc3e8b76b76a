//! Image-quality metrics on the 8-bit scale and paired significance tests.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};

pub const DATA_RANGE: f64 = 255.0;

fn check_pair(a: &ImageField, b: &ImageField) -> Result<()> {
    a.expect_domain(Domain::Raw8Bit)?;
    b.expect_domain(Domain::Raw8Bit)?;
    a.expect_same_shape(b.dim())
}

/// Mean squared difference.
pub fn mse(a: &ImageField, b: &ImageField) -> Result<f64> {
    check_pair(a, b)?;
    let mut acc = 0.0;
    Zip::from(a.values()).and(b.values()).for_each(|&x, &y| acc += (x - y) * (x - y));
    Ok(acc / a.len() as f64)
}

/// `10 log10(range^2 / mse)`; `+inf` when the mse is zero.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &ImageField, b: &ImageField) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, DATA_RANGE))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: DATA_RANGE,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }
}

/// Separable weighted sum over every full window position.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| (0..k).map(|q| taps[q] * x[[i, j + q]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..k).map(|q| taps[q] * rows[[i + q, j]]).sum::<f64>())
}

/// Mean local structural similarity over all window positions that fit in
/// the image (no padding).
pub fn ssim(a: &ImageField, b: &ImageField, p: &SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dim();
    if p.window == 0 || h < p.window || w < p.window {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min_height: p.window,
            min_width: p.window,
        });
    }
    let taps = p.taps();
    let (x, y) = (a.values(), b.values());
    let mx = filter_valid(x, &taps);
    let my = filter_valid(y, &taps);
    let sxx = filter_valid(&(x * x), &taps);
    let syy = filter_valid(&(y * y), &taps);
    let sxy = filter_valid(&(x * y), &taps);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let mut total = 0.0;
    Zip::from(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|&mx, &my, &sxx, &syy, &sxy| {
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub method: PValueMethod,
    /// Set when every difference was zero.
    pub degenerate: bool,
}

/// Largest sample for which the p-value is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// Zeros are dropped, tied magnitudes share their average rank. Up to
/// [`WILCOXON_EXACT_MAX_N`] differences the null distribution of the
/// statistic is enumerated exactly (over the actual, possibly tied, ranks);
/// beyond that a normal approximation with tie-corrected variance and a
/// continuity correction is used.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("differences must be finite"));
    }
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            method: PValueMethod::Exact,
            degenerate: true,
        });
    }
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // Doubled ranks keep average ranks integral.
    let mut ranks2 = vec![0usize; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let r2 = i + j + 2;
        ranks2[i..=j].fill(r2);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w2: usize = nz.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let statistic = w2 as f64 / 2.0;
    let nf = n as f64;
    if n <= WILCOXON_EXACT_MAX_N {
        let total2: usize = ranks2.iter().sum();
        let mut counts = vec![0.0f64; total2 + 1];
        counts[0] = 1.0;
        for &r in &ranks2 {
            for s in (r..=total2).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        return Ok(WilcoxonResult {
            statistic,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            n,
            method: PValueMethod::Exact,
            degenerate: false,
        });
    }
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    Ok(WilcoxonResult {
        statistic,
        p_value: (2.0 * normal.sf(z)).min(1.0),
        n,
        method: PValueMethod::Normal,
        degenerate: false,
    })
}

/// Metrics of one restored image against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, output: &ImageField, reference: &ImageField, p: &SsimParams) -> Result<Self> {
        let mse = mse(output, reference)?;
        Ok(Self {
            id: id.into(),
            psnr: psnr_from_mse(mse, DATA_RANGE),
            ssim: ssim(output, reference, p)?,
            mse,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Mse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::Mse];

    pub fn of(self, m: &ImageMetrics) -> f64 {
        match self {
            Metric::Psnr => m.psnr,
            Metric::Ssim => m.ssim,
            Metric::Mse => m.mse,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Mse => "mse",
        }
    }
}

/// Mean and n-1 standard deviation over the finite values; infinite values
/// (identical image pairs) are counted separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub n_infinite: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut finite = Vec::new();
        let mut n_infinite = 0;
        for v in values {
            if v.is_finite() {
                finite.push(v);
            } else {
                n_infinite += 1;
            }
        }
        let n = finite.len();
        let mean = if n == 0 { f64::NAN } else { finite.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n, n_infinite }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    #[serde(skip)]
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: BTreeMap<Metric, Summary>,
    /// PSNR of the mean MSE, for comparison with the per-image PSNR mean.
    pub psnr_of_mean_mse: f64,
}

impl MethodReport {
    pub fn new(method: impl Into<String>, per_image: Vec<ImageMetrics>) -> Self {
        let aggregate = Metric::ALL
            .iter()
            .map(|&m| (m, Summary::of(per_image.iter().map(|r| m.of(r)))))
            .collect::<BTreeMap<_, _>>();
        let psnr_of_mean_mse = psnr_from_mse(aggregate[&Metric::Mse].mean, DATA_RANGE);
        Self {
            method: method.into(),
            per_image,
            aggregate,
            psnr_of_mean_mse,
        }
    }

    pub fn mean(&self, metric: Metric) -> f64 {
        self.aggregate[&metric].mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub method_a: String,
    pub method_b: String,
    pub metric: Metric,
    #[serde(flatten)]
    pub test: WilcoxonResult,
}

/// Conventions every report carries so its numbers are self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConventions {
    pub scale: String,
    pub data_range: f64,
    pub psnr_formula: String,
    pub ssim: SsimParams,
    pub ssim_window: String,
    pub aggregation: String,
    pub std_denominator: String,
    pub psnr_identical: String,
    pub significance: String,
}

impl Default for MetricConventions {
    fn default() -> Self {
        Self {
            scale: "8-bit scale [0, 255], unquantized floats".into(),
            data_range: DATA_RANGE,
            psnr_formula: format!(
                "10 * log10(255^2 / mse) per image; check: mse 222.52 -> {:.2} dB",
                psnr_from_mse(222.52, DATA_RANGE)
            ),
            ssim: SsimParams::default(),
            ssim_window: "gaussian weights, valid window positions only".into(),
            aggregation: "mean of per-image values; psnr_of_mean_mse is usually lower than the mean psnr".into(),
            std_denominator: "n - 1".into(),
            psnr_identical: "+inf per image, excluded from mean/std and counted in n_infinite".into(),
            significance: format!(
                "two-sided Wilcoxon signed-rank on paired per-image differences (a - b); exact for n <= {WILCOXON_EXACT_MAX_N}, normal approximation with tie and continuity corrections above"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub conventions: MetricConventions,
    pub methods: Vec<MethodReport>,
    pub significance: Vec<SignificanceRow>,
}

impl EvaluationReport {
    /// Builds the report and tests every ordered pair of methods `(a, b)`
    /// with `a` listed before `b`, on images present in both.
    pub fn new(methods: Vec<MethodReport>) -> Result<Self> {
        let mut significance = Vec::new();
        for (i, a) in methods.iter().enumerate() {
            for b in &methods[i + 1..] {
                let by_id: BTreeMap<&str, &ImageMetrics> = b.per_image.iter().map(|m| (m.id.as_str(), m)).collect();
                let pairs: Vec<(&ImageMetrics, &ImageMetrics)> = a
                    .per_image
                    .iter()
                    .filter_map(|m| by_id.get(m.id.as_str()).map(|o| (m, *o)))
                    .collect();
                for metric in Metric::ALL {
                    let diffs: Vec<f64> = pairs
                        .iter()
                        .map(|(x, y)| metric.of(x) - metric.of(y))
                        .filter(|d| d.is_finite())
                        .collect();
                    significance.push(SignificanceRow {
                        method_a: a.method.clone(),
                        method_b: b.method.clone(),
                        metric,
                        test: wilcoxon_signed_rank(&diffs)?,
                    });
                }
            }
        }
        Ok(Self {
            conventions: MetricConventions::default(),
            methods,
            significance,
        })
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Per-image rows: `method,id,psnr,ssim,mse`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,id,psnr,ssim,mse")?;
        for m in &self.methods {
            for r in &m.per_image {
                writeln!(out, "{},{},{},{},{}", m.method, r.id, r.psnr, r.ssim, r.mse)?;
            }
        }
        Ok(())
    }

    /// Pairwise test rows: `method_a,method_b,metric,statistic,p_value,n,method,degenerate`.
    pub fn write_significance_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method_a,method_b,metric,statistic,p_value,n,method,degenerate")?;
        for r in &self.significance {
            let t = &r.test;
            let method = match t.method {
                PValueMethod::Exact => "exact",
                PValueMethod::Normal => "normal",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.method_a,
                r.method_b,
                r.metric.name(),
                t.statistic,
                t.p_value,
                t.n,
                method,
                t.degenerate
            )?;
        }
        Ok(())
    }

    /// Summary JSON: conventions, aggregates and significance tests.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
