//! Scalar special functions used by the t density and the degrees-of-freedom
//! equation.
//!
//! Both functions shift small arguments upward with the recurrence
//! `Γ(x + 1) = x Γ(x)` until the asymptotic (Stirling) series is accurate to
//! machine precision, then sum that series.

use crate::error::{Error, Result};

/// Below this the argument is shifted up before the asymptotic series is used.
const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Natural logarithm of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_domain("log_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

/// Digamma function `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_domain("digamma", x)?;
    Ok(digamma_unchecked(x))
}

fn check_domain(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires a finite positive argument, got {x}")))
    }
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if x < ASYMPTOTIC_THRESHOLD {
        // ln Γ(x) = ln Γ(x + m) − ln(x (x+1) … (x+m−1))
        let mut shifted = x;
        let mut product = 1.0;
        while shifted < ASYMPTOTIC_THRESHOLD {
            product *= shifted;
            shifted += 1.0;
        }
        return stirling_ln_gamma(shifted) - product.ln();
    }
    stirling_ln_gamma(x)
}

/// `ln Γ(a + b) − ln Γ(a)` for `a, b > 0`, without cancellation when `a ≫ b`.
pub(crate) fn ln_gamma_ratio(a: f64, b: f64) -> f64 {
    if a < ASYMPTOTIC_THRESHOLD {
        return ln_gamma_unchecked(a + b) - ln_gamma_unchecked(a);
    }
    (a - 0.5) * (b / a).ln_1p() + b * (a + b).ln() - b + stirling_series(a + b) - stirling_series(a)
}

fn stirling_ln_gamma(x: f64) -> f64 {
    (x - 0.5) * x.ln() - x + HALF_LN_TWO_PI + stirling_series(x)
}

fn stirling_series(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number coefficients B_{2k} / (2k (2k − 1)).
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2 * (-691.0 / 360_360.0 + inv2 / 156.0))))));
    series
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut shifted = x;
    let mut acc = 0.0;
    while shifted < ASYMPTOTIC_THRESHOLD {
        acc -= 1.0 / shifted;
        shifted += 1.0;
    }
    let inv = 1.0 / shifted;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + shifted.ln() - 0.5 * inv - series
}
