//! Confidence bounds for a binomial proportion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which lower confidence bound to use on an accuracy estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    #[default]
    Hoeffding,
    ClopperPearson,
}

impl BoundKind {
    pub fn lower(self, correct: usize, n: usize, delta: f64) -> Result<f64> {
        match self {
            BoundKind::Hoeffding => hoeffding_lcb(correct, n, delta),
            BoundKind::ClopperPearson => clopper_pearson_lcb(correct, n, delta),
        }
    }
}

fn check_counts(correct: usize, n: usize) -> Result<()> {
    if n == 0 || correct > n {
        Err(Error::InvalidCounts { correct, n })
    } else {
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDelta(delta))
    }
}

/// `max(0, correct/n - sqrt(ln(1/delta) / (2n)))`, valid with probability at
/// least `1 - delta`.
pub fn hoeffding_lcb(correct: usize, n: usize, delta: f64) -> Result<f64> {
    check_counts(correct, n)?;
    check_delta(delta)?;
    let mean = correct as f64 / n as f64;
    let radius = libm::sqrt(libm::log(1.0 / delta) / (2.0 * n as f64));
    Ok((mean - radius).max(0.0))
}

/// One-sided exact (Clopper–Pearson) lower bound at level `1 - delta`.
pub fn clopper_pearson_lcb(correct: usize, n: usize, delta: f64) -> Result<f64> {
    check_counts(correct, n)?;
    check_delta(delta)?;
    if correct == 0 {
        return Ok(0.0);
    }
    Ok(beta_quantile(delta, correct as f64, (n - correct + 1) as f64))
}

/// Two-sided exact interval with coverage `confidence`.
///
/// `n = 0` yields the vacuous interval `[0, 1]`.
pub fn clopper_pearson(successes: usize, n: usize, confidence: f64) -> Result<(f64, f64)> {
    if successes > n {
        return Err(Error::InvalidCounts { correct: successes, n });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfig("confidence must lie in (0, 1)".into()));
    }
    if n == 0 {
        return Ok((0.0, 1.0));
    }
    let tail = (1.0 - confidence) / 2.0;
    let (k, n_f) = (successes as f64, n as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        beta_quantile(tail, k, n_f - k + 1.0)
    };
    let hi = if successes == n {
        1.0
    } else {
        beta_quantile(1.0 - tail, k + 1.0, n_f - k)
    };
    Ok((lo, hi))
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    // the continued fraction converges fast for x < (a + 1) / (a + b + 2)
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Quantile of Beta(a, b) by bisection on the CDF.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if regularized_incomplete_beta(mid, a, b) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
