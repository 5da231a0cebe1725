//! Steiger's test for two dependent correlations sharing one variable.
//!
//! Given r12 = corr(X1, X2) and r13 = corr(X1, X3) measured on the same
//! n subjects, tests H0: rho12 = rho13 with Steiger's Z2* statistic
//! (Fisher-transformed correlations, pooled correlation estimate in the
//! covariance term). Used to compare "age vs volume from images
//! harmonized one way" against "age vs volume harmonized another way".

use serde::Serialize;

use crate::error::{IguaneError, Result};
use crate::stats::{fisher_z, normal_two_tailed_p};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SteigerResult {
    pub z: f64,
    pub p: f64,
}

/// `r12`, `r13`: the two correlations sharing variable 1; `r23`: the
/// correlation between the non-shared variables; `n`: sample size.
pub fn steiger_dependent_correlations(
    r12: f64,
    r13: f64,
    r23: f64,
    n: usize,
) -> Result<SteigerResult> {
    for (name, r) in [("r12", r12), ("r13", r13), ("r23", r23)] {
        if !r.is_finite() || r.abs() > 1.0 {
            return Err(IguaneError::Validation(format!(
                "{name} = {r} is not a correlation"
            )));
        }
    }
    if n < 4 {
        return Err(IguaneError::DegenerateInput(format!(
            "steiger: need n >= 4, got {n}"
        )));
    }
    let z12 = fisher_z(r12)?;
    let z13 = fisher_z(r13)?;
    let rbar = (r12 + r13) / 2.0;
    let rbar2 = rbar * rbar;
    // Pooled covariance of the two Fisher z's (Steiger 1980, eq. 14).
    let psi = r23 * (1.0 - 2.0 * rbar2) - 0.5 * rbar2 * (1.0 - 2.0 * rbar2 - r23 * r23);
    let sbar = psi / ((1.0 - rbar2) * (1.0 - rbar2));
    let denom = 2.0 - 2.0 * sbar;
    if denom <= 0.0 {
        return Err(IguaneError::UndefinedResult(format!(
            "steiger: degenerate correlation structure (2 - 2*s = {denom})"
        )));
    }
    let z = (z12 - z13) * ((n - 3) as f64).sqrt() / denom.sqrt();
    Ok(SteigerResult {
        z,
        p: normal_two_tailed_p(z),
    })
}
