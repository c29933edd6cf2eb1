//! Weibull tail modelling over the largest distance samples.
//!
//! `fit_high` mirrors the libMR routine of the same name: keep the largest
//! `tail_size` samples, translate them so the smallest one sits just above
//! zero, and fit a two-parameter Weibull to the translated values by maximum
//! likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 200;
const RESIDUAL_TOLERANCE: f64 = 1e-10;
/// Offset of the location below the smallest tail sample, relative to the tail range.
const LOCATION_OFFSET: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullTailModel {
    /// Location (translation applied before the Weibull).
    pub tau: f64,
    /// Scale, > 0.
    pub lambda: f64,
    /// Shape, > 0.
    pub kappa: f64,
    pub tail_size: usize,
}

impl WeibullTailModel {
    /// Weibull CDF of `x` after translation; 0 at or below `tau`.
    pub fn w_score(&self, x: f64) -> f64 {
        w_score(self, x)
    }

    /// Two-parameter Weibull log-likelihood of already translated values.
    pub fn log_likelihood(&self, translated: &[f64]) -> f64 {
        weibull_log_likelihood(translated, self.kappa, self.lambda)
    }

    /// The translated tail this model was fitted on, recomputed from `samples`.
    pub fn translated_tail(&self, samples: &[f64]) -> Vec<f64> {
        largest(samples, self.tail_size).into_iter().map(|x| x - self.tau).collect()
    }
}

/// Default tail size: `min(20, ceil(n / 2))`.
pub fn default_tail_size(n: usize) -> usize {
    20.min(n.div_ceil(2))
}

pub fn w_score(m: &WeibullTailModel, x: f64) -> f64 {
    let shifted = x - m.tau;
    if !(shifted > 0.0) {
        return 0.0;
    }
    let z = (shifted / m.lambda).powf(m.kappa);
    -(-z).exp_m1()
}

pub fn weibull_log_likelihood(y: &[f64], kappa: f64, lambda: f64) -> f64 {
    let n = y.len() as f64;
    let mut sum_log = 0.0;
    let mut sum_pow = 0.0;
    for &v in y {
        sum_log += v.ln();
        sum_pow += (v / lambda).powf(kappa);
    }
    n * kappa.ln() - n * kappa * lambda.ln() + (kappa - 1.0) * sum_log - sum_pow
}

/// The `k` largest values, descending.
fn largest(samples: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(k);
    sorted
}

/// Fits a Weibull to the upper tail of `samples`.
pub fn fit_high(samples: &[f64], tail_size: usize) -> Result<WeibullTailModel> {
    if tail_size < 2 {
        return Err(Error::Precondition(format!("tail_size must be at least 2, got {tail_size}")));
    }
    if tail_size > samples.len() {
        return Err(Error::Precondition(format!(
            "tail_size {tail_size} exceeds sample count {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition("non-finite sample".into()));
    }
    let tail = largest(samples, tail_size);
    let hi = tail[0];
    let lo = tail[tail_size - 1];
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::ZeroVarianceTail);
    }
    let tau = lo - LOCATION_OFFSET * range;
    // Work on values scaled into (0, 1] so powers cannot overflow.
    let top = hi - tau;
    let scaled: Vec<f64> = tail.iter().map(|x| (x - tau) / top).collect();
    let (kappa, lambda_scaled) = fit_two_parameter(&scaled)?;
    Ok(WeibullTailModel {
        tau,
        lambda: lambda_scaled * top,
        kappa,
        tail_size,
    })
}

struct PowerSums {
    s0: f64,
    s1: f64,
    s2: f64,
}

fn power_sums(y: &[f64], log_y: &[f64], kappa: f64) -> PowerSums {
    let mut s = PowerSums { s0: 0.0, s1: 0.0, s2: 0.0 };
    for (v, l) in y.iter().zip(log_y) {
        let p = v.powf(kappa);
        s.s0 += p;
        s.s1 += p * l;
        s.s2 += p * l * l;
    }
    s
}

/// Profile log-likelihood in the shape alone, with the scale at its
/// conditional maximum `(S0 / n)^(1/kappa)`.
fn profile_log_likelihood(n: f64, sum_log: f64, s0: f64, kappa: f64) -> f64 {
    n * kappa.ln() - n * (s0 / n).ln() + (kappa - 1.0) * sum_log - n
}

/// Maximum-likelihood (shape, scale) for positive data via damped Newton
/// iteration on the shape profile equation.
fn fit_two_parameter(y: &[f64]) -> Result<(f64, f64)> {
    let n = y.len() as f64;
    let log_y: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let sum_log: f64 = log_y.iter().sum();
    let mean_log = sum_log / n;

    // Start from the moment estimate of the shape on log data.
    let var_log = log_y.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / n;
    let mut kappa = if var_log > 0.0 {
        (std::f64::consts::PI / (var_log * 6.0).sqrt()).clamp(1e-3, 1e3)
    } else {
        1.0
    };

    let residual = |s: &PowerSums, k: f64| 1.0 / k + mean_log - s.s1 / s.s0;
    let mut sums = power_sums(y, &log_y, kappa);
    let mut ll = profile_log_likelihood(n, sum_log, sums.s0, kappa);

    for iteration in 0..MAX_ITERATIONS {
        let g = residual(&sums, kappa);
        if g.abs() < RESIDUAL_TOLERANCE {
            let lambda = (sums.s0 / n).powf(1.0 / kappa);
            return Ok((kappa, lambda));
        }
        let dg = -1.0 / (kappa * kappa) - (sums.s2 * sums.s0 - sums.s1 * sums.s1) / (sums.s0 * sums.s0);
        let mut step = -g / dg;
        // The residual is strictly decreasing, so a non-negative slope only
        // shows up through round-off; fall back to a bisection-like move.
        if !step.is_finite() || dg >= 0.0 {
            step = if g > 0.0 { kappa } else { -0.5 * kappa };
        }
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = kappa + step;
            if candidate > 0.0 {
                let cs = power_sums(y, &log_y, candidate);
                let cll = profile_log_likelihood(n, sum_log, cs.s0, candidate);
                if cll.is_finite() && cll >= ll - 1e-12 * ll.abs().max(1.0) {
                    kappa = candidate;
                    sums = cs;
                    ll = cll;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent direction left at machine precision; accept the
            // current point if it is stationary to a looser tolerance.
            if g.abs() < 1e-6 {
                return Ok((kappa, (sums.s0 / n).powf(1.0 / kappa)));
            }
            return Err(Error::NoConvergence {
                iterations: iteration + 1,
                shape: kappa,
                scale: (sums.s0 / n).powf(1.0 / kappa),
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        shape: kappa,
        scale: (sums.s0 / n).powf(1.0 / kappa),
    })
}
