//! Guide images and the per-pixel fidelity refinement.
//!
//! The refinement pulls a diffusion state `x` towards a guide `g` by solving,
//! independently at every pixel,
//!
//! ```text
//! argmin_z  z + exp(g - z) + mu (z - x)^2
//! ```
//!
//! whose stationarity condition `1 - exp(g - z) + 2 mu (z - x) = 0` has a
//! strictly increasing left-hand side and hence exactly one root. With the
//! non-local-means filtered observation as guide this is the noise-reduced
//! fidelity term; with the raw observation it is the classic fidelity step.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};

/// Fully resolved non-local-means parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlmParams {
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Filtering strength, in units of the image values.
    pub h: f64,
    /// Noise standard deviation subtracted from patch distances.
    pub noise_std: f64,
}

impl NlmParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 || self.search_radius < self.patch_radius {
            return Err(Error::invalid(format!(
                "need 1 <= patch_radius <= search_radius, got {} and {}",
                self.patch_radius, self.search_radius
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "need h > 0 and noise_std >= 0, got {} and {}",
                self.h, self.noise_std
            )));
        }
        Ok(())
    }

    /// Smallest image side the filter accepts.
    pub fn min_side(&self) -> usize {
        2 * self.search_radius + 1
    }

    fn check_image(&self, y: &ImageField) -> Result<()> {
        self.validate()?;
        let (h, w) = y.dim();
        let m = self.min_side();
        if h < m || w < m {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min_height: m,
                min_width: m,
            });
        }
        Ok(())
    }

    /// Weight of a patch pair at mean squared distance `d2`.
    #[inline]
    fn weight(&self, d2: f64) -> f64 {
        let excess = d2 - 2.0 * self.noise_std * self.noise_std;
        if excess <= 0.0 {
            1.0
        } else {
            (-excess / (self.h * self.h)).exp()
        }
    }
}

/// Configurable NLM settings; unset strengths are estimated from the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlmConfig {
    pub patch_radius: usize,
    pub search_radius: usize,
    pub h: Option<f64>,
    pub noise_std: Option<f64>,
    /// `h = h_factor * noise_std` when `h` is unset.
    pub h_factor: f64,
}

impl Default for NlmConfig {
    fn default() -> Self {
        Self {
            patch_radius: 2,
            search_radius: 7,
            h: None,
            noise_std: None,
            h_factor: 0.8,
        }
    }
}

impl NlmConfig {
    /// Lower bound on an estimated `h`, so flat images keep a usable filter.
    pub const MIN_H: f64 = 1e-6;

    pub fn resolve(&self, y: &ImageField) -> Result<NlmParams> {
        if !(self.h_factor > 0.0 && self.h_factor.is_finite()) {
            return Err(Error::invalid(format!("h_factor must be positive, got {}", self.h_factor)));
        }
        let sigma = match self.noise_std {
            Some(s) => s,
            None => estimate_noise_std(y)?,
        };
        let params = NlmParams {
            patch_radius: self.patch_radius,
            search_radius: self.search_radius,
            h: self.h.unwrap_or((self.h_factor * sigma).max(Self::MIN_H)),
            noise_std: sigma,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Robust noise standard deviation: the median absolute value of the finest
/// diagonal Haar detail `(a - b - c + d) / 2` over disjoint 2x2 blocks,
/// divided by 0.6745.
pub fn estimate_noise_std(y: &ImageField) -> Result<f64> {
    let v = y.values();
    let (h, w) = (v.nrows() / 2, v.ncols() / 2);
    if h == 0 || w == 0 {
        return Err(Error::invalid("image too small for a noise estimate"));
    }
    let mut detail = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (a, b) = (v[[2 * i, 2 * j]], v[[2 * i, 2 * j + 1]]);
            let (c, d) = (v[[2 * i + 1, 2 * j]], v[[2 * i + 1, 2 * j + 1]]);
            detail.push(((a - b - c + d) / 2.0).abs());
        }
    }
    Ok(median(&mut detail) / 0.6745)
}

fn median(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    let (_, &mut hi, _) = xs.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = xs[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Reflects an index into `0..n` without repeating the edge sample.
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 { -i } else { i };
    (if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

/// Brute-force non-local means: every pixel, every offset in the search
/// window, every patch element, with mirrored boundaries.
///
/// Both implementations average differences, `y_i + sum w (y_j - y_i) / sum w`,
/// so constant regions are reproduced exactly.
pub fn nlm_reference(y: &ImageField, p: &NlmParams) -> Result<ImageField> {
    p.check_image(y)?;
    let v = y.values();
    let (h, w) = v.dim();
    let (pr, sr) = (p.patch_radius as isize, p.search_radius as isize);
    let area = ((2 * pr + 1) * (2 * pr + 1)) as f64;
    let at = |r: isize, c: isize| v[[mirror(r, h), mirror(c, w)]];
    let out = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        let centre = at(i, j);
        let (mut num, mut den) = (0.0, 0.0);
        for dy in -sr..=sr {
            for dx in -sr..=sr {
                let mut d2 = 0.0;
                for a in -pr..=pr {
                    for b in -pr..=pr {
                        let diff = at(i + a, j + b) - at(i + dy + a, j + dx + b);
                        d2 += diff * diff;
                    }
                }
                let wgt = p.weight(d2 / area);
                num += wgt * (at(i + dy, j + dx) - centre);
                den += wgt;
            }
        }
        centre + num / den
    });
    Ok(ImageField::from_parts(out, y.domain()))
}

/// Non-local means by shifted squared differences.
///
/// For each offset `o` the squared-difference image against the shifted copy
/// is box-filtered once, giving every patch distance for that offset. The
/// distance between the patches at `i` and `i + o` also serves the pair
/// `(i + o, i)` at offset `-o`, so only half the window is visited.
pub fn nlm_fast(y: &ImageField, p: &NlmParams) -> Result<ImageField> {
    p.check_image(y)?;
    let v = y.values();
    let (h, w) = v.dim();
    let (pr, sr) = (p.patch_radius as isize, p.search_radius as isize);
    let pad = pr + sr;
    let (ph, pw) = (h + 2 * pad as usize, w + 2 * pad as usize);
    let mut padded = vec![0.0; ph * pw];
    for r in 0..ph {
        for c in 0..pw {
            padded[r * pw + c] = v[[mirror(r as isize - pad, h), mirror(c as isize - pad, w)]];
        }
    }
    // Image coordinates into the padded buffer.
    let at = |r: isize, c: isize| ((r + pad) as usize) * pw + (c + pad) as usize;
    let k = 2 * pr as usize + 1;
    let inv_area = 1.0 / (k * k) as f64;

    let mut num = vec![0.0; h * w];
    let mut den = vec![1.0; h * w];
    let mut diff = Vec::new();
    let mut hsum = Vec::new();

    let (hi, wi) = (h as isize, w as isize);
    for dy in 0..=sr {
        for dx in -sr..=sr {
            if dy == 0 && dx <= 0 {
                continue;
            }
            // Patch centers whose partner at +o, or whose partner at -o, is in the image.
            let (r0, r1) = (-dy, hi);
            let (c0, c1) = ((-dx).min(0), wi + (-dx).max(0));
            let (rows, cols) = ((r1 - r0) as usize, (c1 - c0) as usize);
            let (drows, dcols) = (rows + k - 1, cols + k - 1);
            diff.clear();
            diff.reserve(drows * dcols);
            for r in r0 - pr..r1 + pr {
                let a = at(r, c0 - pr);
                let b = at(r + dy, c0 - pr + dx);
                diff.extend(
                    padded[a..a + dcols]
                        .iter()
                        .zip(&padded[b..b + dcols])
                        .map(|(x, y)| (x - y) * (x - y)),
                );
            }
            hsum.clear();
            hsum.resize(drows * cols, 0.0);
            for (src, dst) in diff.chunks_exact(dcols).zip(hsum.chunks_exact_mut(cols)) {
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = src[c..c + k].iter().sum();
                }
            }
            for r in 0..rows {
                let i = r0 + r as isize;
                let (ti, in_src) = (i + dy, i >= 0);
                let in_dst = ti < hi;
                for c in 0..cols {
                    let mut d2 = 0.0;
                    for q in 0..k {
                        d2 += hsum[(r + q) * cols + c];
                    }
                    let j = c0 + c as isize;
                    let tj = j + dx;
                    let src_ok = in_src && j >= 0 && j < wi;
                    let dst_ok = in_dst && tj >= 0 && tj < wi;
                    if !src_ok && !dst_ok {
                        continue;
                    }
                    let wgt = p.weight(d2 * inv_area);
                    let delta = wgt * (padded[at(ti, tj)] - padded[at(i, j)]);
                    if src_ok {
                        let o = i as usize * w + j as usize;
                        num[o] += delta;
                        den[o] += wgt;
                    }
                    if dst_ok {
                        let o = ti as usize * w + tj as usize;
                        num[o] -= delta;
                        den[o] += wgt;
                    }
                }
            }
        }
    }
    let out = Array2::from_shape_vec(
        (h, w),
        v.iter().zip(num.iter().zip(&den)).map(|(y, (n, d))| y + n / d).collect(),
    )
    .expect("buffer matches image shape");
    Ok(ImageField::from_parts(out, y.domain()))
}

/// Residual `f(z) = 1 - exp(g - z) + 2 mu (z - x)` of the per-pixel problem.
#[inline]
pub fn fidelity_residual(z: f64, guide: f64, anchor: f64, mu: f64) -> f64 {
    1.0 - (guide - z).exp() + 2.0 * mu * (z - anchor)
}

/// Objective `z + exp(g - z) + mu (z - x)^2`.
#[inline]
pub fn fidelity_objective(z: f64, guide: f64, anchor: f64, mu: f64) -> f64 {
    z + (guide - z).exp() + mu * (z - anchor) * (z - anchor)
}

/// Safeguarded Newton solve for the root of [`fidelity_residual`].
///
/// Starts at `z = anchor` inside the bracket `[min(g, x) - 5, max(g, x) + 5]`,
/// which always contains the root. The bracket shrinks with the sign of each
/// residual and a bisection step replaces any Newton step that leaves it.
/// Returns the root and the number of iterations used.
pub fn solve_fidelity_pixel(guide: f64, anchor: f64, mu: f64, tol: f64, max_iters: usize) -> Result<(f64, usize)> {
    let fail = || Error::NonConvergence {
        iters: max_iters,
        guide,
        anchor,
        mu,
    };
    if !(guide.is_finite() && anchor.is_finite() && mu >= 0.0 && mu.is_finite()) {
        return Err(fail());
    }
    let mut lo = guide.min(anchor) - 5.0;
    let mut hi = guide.max(anchor) + 5.0;
    let mut z = anchor;
    for iter in 0..=max_iters {
        let e = (guide - z).exp();
        let f = 1.0 - e + 2.0 * mu * (z - anchor);
        if f.abs() <= tol {
            return Ok((z, iter));
        }
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        // The bracket can no longer shrink: z is the best representable root.
        if hi - lo <= 4.0 * f64::EPSILON * z.abs().max(1.0) {
            return Ok((z, iter));
        }
        if iter == max_iters {
            break;
        }
        let step = z - f / (e + 2.0 * mu);
        z = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
    }
    Err(fail())
}

/// One refinement problem: guide, anchor and weight.
#[derive(Debug, Clone, Copy)]
pub struct FidelityProblem<'a> {
    pub guide: &'a ImageField,
    pub anchor: &'a ImageField,
    pub mu: f64,
    pub newton_tol: f64,
    pub max_iters: usize,
}

impl<'a> FidelityProblem<'a> {
    pub const DEFAULT_TOL: f64 = 1e-10;
    pub const DEFAULT_MAX_ITERS: usize = 50;

    pub fn new(guide: &'a ImageField, anchor: &'a ImageField, mu: f64) -> Self {
        Self {
            guide,
            anchor,
            mu,
            newton_tol: Self::DEFAULT_TOL,
            max_iters: Self::DEFAULT_MAX_ITERS,
        }
    }
}

/// Solves the problem at every pixel; the result is a latent field.
pub fn nrft_refine(prob: &FidelityProblem<'_>) -> Result<ImageField> {
    prob.guide.expect_model_scale()?;
    prob.anchor.expect_model_scale()?;
    prob.guide.expect_same_shape(prob.anchor.dim())?;
    if !(prob.mu >= 0.0 && prob.mu.is_finite()) {
        return Err(Error::invalid(format!("mu must be finite and >= 0, got {}", prob.mu)));
    }
    if prob.newton_tol.is_nan() || prob.newton_tol <= 0.0 || prob.max_iters == 0 {
        return Err(Error::invalid("newton_tol and max_iters must be positive"));
    }
    let mut out = Array2::zeros(prob.anchor.dim());
    let mut first_err = None;
    Zip::from(&mut out)
        .and(prob.guide.values())
        .and(prob.anchor.values())
        .for_each(|o, &g, &x| {
            if first_err.is_some() {
                return;
            }
            match solve_fidelity_pixel(g, x, prob.mu, prob.newton_tol, prob.max_iters) {
                Ok((z, _)) => *o = z,
                Err(e) => first_err = Some(e),
            }
        });
    match first_err {
        Some(e) => Err(e),
        None => Ok(ImageField::from_parts(out, Domain::Latent)),
    }
}
