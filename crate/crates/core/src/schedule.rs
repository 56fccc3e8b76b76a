//! Linear noise schedule and the Gamma parameters derived from it.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `t = 0` denotes the
//! clean image. Every array is computed in `f64`.
//!
//! For the Gamma process the per-step noise `g_t ~ Gamma(k_t, theta_t)` uses
//!
//! ```text
//! k_t     = beta_t / (alpha_bar_t * theta0^2)
//! theta_t = sqrt(alpha_bar_t) * theta0
//! k_cum_t = sum_{i <= t} k_i
//! ```
//!
//! which gives `k_cum_t * theta_t^2 = 1 - alpha_bar_t`, so the closed-form
//! marginal has the same variance as the Gaussian process.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The inputs a schedule is built from. Two schedules are interchangeable
/// iff their parameters are equal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub theta0: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            theta0: 0.1,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.steps, self.beta_start, self.beta_end, self.theta0)
    }
}

/// Precomputed per-timestep scalars. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma_shape: Vec<f64>,
    gamma_scale: Vec<f64>,
    gamma_shape_cum: Vec<f64>,
}

/// Builds a schedule with `beta` linear from `beta_start` to `beta_end`.
pub fn build_linear_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    theta0: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if !(theta0 > 0.0 && theta0.is_finite()) {
        return Err(Error::invalid(format!("theta0 must be positive, got {theta0}")));
    }

    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| beta_start + i as f64 * step).collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let theta0_sq = theta0 * theta0;
    let gamma_shape: Vec<f64> = beta
        .iter()
        .zip(&alpha_bar)
        .map(|(b, ab)| b / (ab * theta0_sq))
        .collect();
    let gamma_scale: Vec<f64> = alpha_bar.iter().map(|ab| ab.sqrt() * theta0).collect();
    let gamma_shape_cum: Vec<f64> = gamma_shape
        .iter()
        .scan(0.0, |acc, k| {
            *acc += k;
            Some(*acc)
        })
        .collect();

    Ok(NoiseSchedule {
        params: ScheduleParams {
            steps,
            beta_start,
            beta_end,
            theta0,
        },
        beta,
        alpha,
        alpha_bar,
        gamma_shape,
        gamma_scale,
        gamma_shape_cum,
    })
}

impl NoiseSchedule {
    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn theta0(&self) -> f64 {
        self.params.theta0
    }

    #[inline]
    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.params.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.params.steps,
            });
        }
        Ok(t - 1)
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        self.idx(t).map(|_| ())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    /// `alpha_bar` extended with `alpha_bar(0) = 1` for the clean image.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    /// Per-step Gamma shape `k_t`.
    pub fn gamma_shape(&self, t: usize) -> Result<f64> {
        Ok(self.gamma_shape[self.idx(t)?])
    }

    /// Gamma scale `theta_t`, shared by the per-step and cumulative noise.
    pub fn gamma_scale(&self, t: usize) -> Result<f64> {
        Ok(self.gamma_scale[self.idx(t)?])
    }

    /// Cumulative Gamma shape `k_cum_t`.
    pub fn gamma_shape_cum(&self, t: usize) -> Result<f64> {
        Ok(self.gamma_shape_cum[self.idx(t)?])
    }

    /// `sqrt(1 - alpha_bar_t)`, the standard deviation of the marginal noise.
    pub fn marginal_std(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Writes every array as CSV with header `t,beta,alpha,alpha_bar,k,theta,k_cum`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,beta,alpha,alpha_bar,k,theta,k_cum")?;
        for i in 0..self.params.steps {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                i + 1,
                self.beta[i],
                self.alpha[i],
                self.alpha_bar[i],
                self.gamma_shape[i],
                self.gamma_scale[i],
                self.gamma_shape_cum[i]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_default() -> NoiseSchedule {
        ScheduleParams::default().build().unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = paper_default();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert_relative_eq!(s.beta(1000).unwrap(), 0.02, max_relative = 1e-15);
        assert_relative_eq!(1.0 - s.alpha_bar(1).unwrap(), 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn first_step_gamma_parameters() {
        // Frozen from an independent 40-digit evaluation.
        let s = paper_default();
        assert_relative_eq!(
            s.gamma_shape(1).unwrap(),
            0.010_001_000_100_010_001,
            max_relative = 1e-13
        );
        assert_relative_eq!(
            s.gamma_scale(1).unwrap(),
            0.099_994_999_874_993_75,
            max_relative = 1e-13
        );
    }

    #[test]
    fn marginal_std_values() {
        let s = paper_default();
        assert_relative_eq!(s.marginal_std(1).unwrap(), 0.01, max_relative = 1e-10);
        assert_relative_eq!(
            s.marginal_std(2).unwrap(),
            0.014_829_292_900_469_932,
            max_relative = 1e-10
        );
        assert!(matches!(
            s.marginal_std(0),
            Err(Error::TimestepOutOfRange { t: 0, max: 1000 })
        ));
        assert!(s.marginal_std(1001).is_err());
    }

    #[test]
    fn variance_identity_and_scale_closure_hold_everywhere() {
        let s = paper_default();
        for t in 1..=s.steps() {
            let lhs = s.gamma_shape_cum(t).unwrap() * s.gamma_scale(t).unwrap().powi(2);
            let rhs = 1.0 - s.alpha_bar(t).unwrap();
            assert!(((lhs - rhs) / rhs).abs() < 1e-12, "t={t}: {lhs} vs {rhs}");
            assert_eq!(
                s.gamma_scale(t).unwrap(),
                s.alpha_bar(t).unwrap().sqrt() * s.theta0()
            );
        }
        for t in [2usize, 17, 400, 1000] {
            let theta_t = s.gamma_scale(t).unwrap();
            for i in 1..=t {
                let scaled = (s.alpha_bar(t).unwrap() / s.alpha_bar(i).unwrap()).sqrt()
                    * s.gamma_scale(i).unwrap();
                assert_relative_eq!(scaled, theta_t, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn monotone_arrays() {
        let s = paper_default();
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        for t in 2..=s.steps() {
            assert_eq!(
                s.alpha_bar(t).unwrap(),
                s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap()
            );
        }
    }

    #[test]
    fn single_step_schedule_uses_beta_start() {
        let s = build_linear_schedule(1, 0.01, 0.02, 0.1).unwrap();
        assert_eq!(s.beta(1).unwrap(), 0.01);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_linear_schedule(0, 1e-4, 0.02, 0.1).is_err());
        assert!(build_linear_schedule(10, 0.0, 0.02, 0.1).is_err());
        assert!(build_linear_schedule(10, 0.03, 0.02, 0.1).is_err());
        assert!(build_linear_schedule(10, 1e-4, 1.0, 0.1).is_err());
        assert!(build_linear_schedule(10, 1e-4, 0.02, 0.0).is_err());
    }

    #[test]
    fn rebuild_is_bit_identical() {
        assert_eq!(paper_default(), paper_default());
    }

    #[test]
    fn csv_header_and_rows() {
        let s = build_linear_schedule(3, 1e-4, 0.02, 0.1).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar,k,theta,k_cum");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
    }
}
