//! Covariance estimators for the fitted parameters and their propagation to
//! pointwise confidence bands.
//!
//! Three estimators are supported: the inverse penalized Hessian (Bayes), the
//! penalized sandwich `H_pL^-1 [sum U_i U_i'] H_pL^-1` with penalized scores
//! `U_i = v_i + kappa dJ/dxi`, and the non-penalized sandwich obtained by
//! setting `kappa = 0` in that formula (still evaluated at the penalized
//! maximum). All matrices estimate the covariance of the estimator directly:
//! the Hessian and score outer products are kept unnormalized, so no further
//! `1/n` factor applies when building intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::basis::SplineSpec;
use crate::estimate::FitResult;

#[derive(Debug, Error)]
pub enum VarianceError {
    #[error("fit did not converge; variance is undefined")]
    NotConverged,
    #[error("penalized Hessian is not positive definite (smallest eigenvalue {0:.6e})")]
    IndefiniteHessian(f64),
    #[error("bread matrix is numerically singular (condition number {0:.3e})")]
    SingularBread(f64),
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    InvalidLevel(f64),
    #[error("evaluation time {t} outside the knot range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("the model has no covariates")]
    NoCovariates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarianceMethod {
    /// Inverse of the penalized negative Hessian.
    #[serde(rename = "bayes")]
    Bayes,
    /// Sandwich with penalized scores and penalized bread.
    #[serde(rename = "sandwich")]
    SandwichPenalized,
    /// Sandwich with raw scores and unpenalized bread, at the penalized
    /// maximum.
    #[serde(rename = "np-sandwich")]
    SandwichNonPenalized,
}

impl VarianceMethod {
    pub const ALL: [VarianceMethod; 3] = [
        VarianceMethod::Bayes,
        VarianceMethod::SandwichPenalized,
        VarianceMethod::SandwichNonPenalized,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VarianceMethod::Bayes => "bayes",
            VarianceMethod::SandwichPenalized => "sandwich",
            VarianceMethod::SandwichNonPenalized => "np-sandwich",
        }
    }
}

impl std::fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VarianceMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "bayes" => Ok(VarianceMethod::Bayes),
            "sandwich" => Ok(VarianceMethod::SandwichPenalized),
            "np-sandwich" => Ok(VarianceMethod::SandwichNonPenalized),
            other => Err(format!(
                "unknown variance method `{other}` (expected bayes, sandwich, np-sandwich)"
            )),
        }
    }
}

/// A `(p+m) x (p+m)` covariance matrix tagged with its construction method.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub method: VarianceMethod,
    pub matrix: DMatrix<f64>,
    /// Condition number of the inverted Hessian.
    pub condition: f64,
}

/// A pointwise confidence band over a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveBand {
    pub times: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    /// Some bound was truncated to the curve's natural range.
    pub truncated: bool,
    /// A spline coefficient sat at the nonnegativity boundary in the fit.
    pub boundary_suspect: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaInterval {
    pub estimate: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

fn sym_condition_number(mat: &DMatrix<f64>) -> f64 {
    let eig = mat.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = eig.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn symmetrize(mut mat: DMatrix<f64>) -> DMatrix<f64> {
    let t = mat.transpose();
    mat += t;
    mat *= 0.5;
    mat
}

/// Quantile of the standard normal at `0.5 + level/2`.
pub fn z_quantile(level: f64) -> Result<f64, VarianceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(VarianceError::InvalidLevel(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Inverse penalized Hessian.
pub fn var_bayes(fit: &FitResult) -> Result<VarianceEstimate, VarianceError> {
    if !fit.converged {
        return Err(VarianceError::NotConverged);
    }
    let chol = fit.h_pl.clone().cholesky().ok_or_else(|| {
        let eig = fit.h_pl.clone().symmetric_eigen().eigenvalues;
        VarianceError::IndefiniteHessian(eig.iter().cloned().fold(f64::INFINITY, f64::min))
    })?;
    Ok(VarianceEstimate {
        method: VarianceMethod::Bayes,
        matrix: symmetrize(chol.inverse()),
        condition: sym_condition_number(&fit.h_pl),
    })
}

/// Sandwich estimator. With `penalized` the bread is the penalized Hessian
/// and the scores carry the penalty gradient; otherwise both revert to their
/// unpenalized forms, still evaluated at the penalized maximum.
pub fn var_sandwich(fit: &FitResult, penalized: bool) -> Result<VarianceEstimate, VarianceError> {
    if !fit.converged {
        return Err(VarianceError::NotConverged);
    }
    let bread = if penalized { &fit.h_pl } else { &fit.h_l };
    let mut meat = fit.scores.tr_mul(&fit.scores);
    if penalized && fit.kappa != 0.0 {
        let shift = &fit.penalty_grad * fit.kappa;
        let colsum = fit.scores.row_sum().transpose();
        meat += &colsum * shift.transpose();
        meat += &shift * colsum.transpose();
        meat += &shift * shift.transpose() * fit.n() as f64;
    }
    let inv = bread
        .clone()
        .try_inverse()
        .ok_or_else(|| VarianceError::SingularBread(sym_condition_number(bread)))?;
    let matrix = symmetrize(&inv * meat * &inv);
    Ok(VarianceEstimate {
        method: if penalized {
            VarianceMethod::SandwichPenalized
        } else {
            VarianceMethod::SandwichNonPenalized
        },
        matrix,
        condition: sym_condition_number(bread),
    })
}

pub fn variance_estimate(
    fit: &FitResult,
    method: VarianceMethod,
) -> Result<VarianceEstimate, VarianceError> {
    match method {
        VarianceMethod::Bayes => var_bayes(fit),
        VarianceMethod::SandwichPenalized => var_sandwich(fit, true),
        VarianceMethod::SandwichNonPenalized => var_sandwich(fit, false),
    }
}

fn check_range(spec: &SplineSpec, times: &[f64]) -> Result<(), VarianceError> {
    let (lo, hi) = spec.knot_range();
    for &t in times {
        if t < lo || t > hi {
            return Err(VarianceError::OutOfRange { t, lo, hi });
        }
    }
    Ok(())
}

/// Pointwise band for the fitted hazard `h(t) = sum_k theta_k M_k(t)`, using
/// the theta block of the covariance; the lower bound is truncated at zero.
pub fn hazard_band(
    fit: &FitResult,
    var: &VarianceEstimate,
    spec: &SplineSpec,
    times: &[f64],
    level: f64,
) -> Result<CurveBand, VarianceError> {
    let z = z_quantile(level)?;
    check_range(spec, times)?;
    let p = fit.p();
    let m = fit.m();
    let vblock = var.matrix.view((p, p), (m, m));
    let theta = fit.params.theta();
    let mut band = CurveBand {
        times: times.to_vec(),
        estimate: Vec::with_capacity(times.len()),
        lower: Vec::with_capacity(times.len()),
        upper: Vec::with_capacity(times.len()),
        level,
        truncated: false,
        boundary_suspect: fit.boundary,
    };
    for &t in times {
        let basis = spec.msplines_eval(t);
        let est = basis.dot(theta);
        let s2 = (&vblock * &basis).dot(&basis).max(0.0);
        let half = z * s2.sqrt();
        let mut lo = est - half;
        if lo < 0.0 {
            lo = 0.0;
            band.truncated = true;
        }
        band.estimate.push(est);
        band.lower.push(lo);
        band.upper.push(est + half);
    }
    Ok(band)
}

/// Pointwise band for the fitted survival `S(t) = exp(-sum_k theta_k I_k(t))`
/// via the delta method; bounds are clipped to `[0, 1]`.
pub fn survival_band(
    fit: &FitResult,
    var: &VarianceEstimate,
    spec: &SplineSpec,
    times: &[f64],
    level: f64,
) -> Result<CurveBand, VarianceError> {
    let z = z_quantile(level)?;
    check_range(spec, times)?;
    let p = fit.p();
    let m = fit.m();
    let vblock = var.matrix.view((p, p), (m, m));
    let theta = fit.params.theta();
    let mut band = CurveBand {
        times: times.to_vec(),
        estimate: Vec::with_capacity(times.len()),
        lower: Vec::with_capacity(times.len()),
        upper: Vec::with_capacity(times.len()),
        level,
        truncated: false,
        boundary_suspect: fit.boundary,
    };
    for &t in times {
        let basis = spec.isplines_eval(t);
        let surv = (-basis.dot(theta)).exp();
        // Gradient of S in theta is -I_k(t) S(t), so the quadratic form
        // factors as S^2 (I' V I).
        let s2 = (surv * surv * (&vblock * &basis).dot(&basis)).max(0.0);
        let half = z * s2.sqrt();
        let mut lo = surv - half;
        let mut hi = surv + half;
        if lo < 0.0 {
            lo = 0.0;
            band.truncated = true;
        }
        if hi > 1.0 {
            hi = 1.0;
            band.truncated = true;
        }
        band.estimate.push(surv);
        band.lower.push(lo);
        band.upper.push(hi);
    }
    Ok(band)
}

/// Normal confidence intervals for the regression coefficients from the beta
/// block of the covariance.
pub fn beta_intervals(
    fit: &FitResult,
    var: &VarianceEstimate,
    level: f64,
) -> Result<Vec<BetaInterval>, VarianceError> {
    let z = z_quantile(level)?;
    let p = fit.p();
    if p == 0 {
        return Err(VarianceError::NoCovariates);
    }
    Ok((0..p)
        .map(|j| {
            let estimate = fit.params.beta()[j];
            let sd = var.matrix[(j, j)].max(0.0).sqrt();
            BetaInterval {
                estimate,
                sd,
                lower: estimate - z * sd,
                upper: estimate + z * sd,
            }
        })
        .collect())
}
