//! Welch's t-test and the paired t-test.
//!
//! Two-sided p-values come from the Student-t CDF (statrs evaluates it via
//! the regularized incomplete beta function). Degenerate zero-variance
//! inputs are pinned explicitly: equal means give t = 0, p = 1.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::math::{mean, sample_variance};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub dof: f64,
    pub p_value: f64,
}

fn two_sided_p(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, dof).expect("dof > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Unequal-variance two-sample t-test with Welch–Satterthwaite degrees of
/// freedom. Both samples need at least two observations.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "welch t-test needs at least 2 samples per group".into(),
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;

    if se2 == 0.0 {
        let t = if ma == mb {
            0.0
        } else {
            (ma - mb).signum() * f64::INFINITY
        };
        let dof = na + nb - 2.0;
        return Ok(TTestResult {
            t,
            dof,
            p_value: two_sided_p(t, dof),
        });
    }

    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    Ok(TTestResult {
        t,
        dof,
        p_value: two_sided_p(t, dof),
    })
}

/// Paired t-test over per-item differences a_i - b_i.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs equal-length samples ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&diffs);
    let sd = sample_variance(&diffs).sqrt();
    let n = diffs.len() as f64;
    let dof = n - 1.0;

    let t = if sd == 0.0 {
        if md == 0.0 {
            0.0
        } else {
            md.signum() * f64::INFINITY
        }
    } else {
        md / (sd / n.sqrt())
    };
    Ok(TTestResult {
        t,
        dof,
        p_value: two_sided_p(t, dof),
    })
}
