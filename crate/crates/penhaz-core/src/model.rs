//! Proportional-hazards model with a spline baseline hazard: dataset
//! container, full log-likelihood, roughness penalty, and analytic first and
//! second derivatives including per-subject scores.
//!
//! With basis functions `psi_k` (M-splines) and integrals `Psi_k` (I-splines),
//! the baseline hazard is `h0(t) = sum_k theta_k psi_k(t)` and the full
//! log-likelihood of right-censored data is
//!
//! `L(beta, theta) = -sum_i exp(x_i beta) H0(T_i) + sum_{events} (log h0(T_i) + x_i beta)`
//!
//! penalized by `kappa * theta' Omega theta`. Nonnegativity of the hazard is
//! carried by the internal reparameterization `theta_k = zeta_k^2`; all public
//! derivative routines work in the natural `(beta, theta)` coordinates.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::SplineSpec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset must contain at least one subject")]
    EmptyDataset,
    #[error("time {value} at row {index} is not a positive finite number")]
    InvalidTime { index: usize, value: f64 },
    #[error("length mismatch: {times} times vs {events} event flags")]
    LengthMismatch { times: usize, events: usize },
    #[error("covariate matrix has {rows} rows but the dataset has {n} subjects")]
    CovariateRowMismatch { rows: usize, n: usize },
    #[error("covariate value at row {row}, column {col} is not finite")]
    NonFiniteCovariate { row: usize, col: usize },
    #[error("spline coefficient {index} is negative ({value})")]
    NegativeTheta { index: usize, value: f64 },
    #[error("smoothing parameter must be nonnegative, got {0}")]
    NegativeKappa(f64),
    #[error("parameter dimension mismatch: expected beta {expected_p} / theta {expected_m}")]
    ParamDimension { expected_p: usize, expected_m: usize },
}

/// Right-censored survival data with an optional covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    times: Vec<f64>,
    events: Vec<bool>,
    covariates: DMatrix<f64>,
}

impl SurvivalDataset {
    pub fn new(
        times: Vec<f64>,
        events: Vec<bool>,
        covariates: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        if times.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if times.len() != events.len() {
            return Err(ModelError::LengthMismatch {
                times: times.len(),
                events: events.len(),
            });
        }
        if covariates.nrows() != times.len() {
            return Err(ModelError::CovariateRowMismatch {
                rows: covariates.nrows(),
                n: times.len(),
            });
        }
        for (i, &t) in times.iter().enumerate() {
            if !(t > 0.0) || !t.is_finite() {
                return Err(ModelError::InvalidTime { index: i, value: t });
            }
        }
        for row in 0..covariates.nrows() {
            for col in 0..covariates.ncols() {
                if !covariates[(row, col)].is_finite() {
                    return Err(ModelError::NonFiniteCovariate { row, col });
                }
            }
        }
        Ok(Self {
            times,
            events,
            covariates,
        })
    }

    pub fn without_covariates(times: Vec<f64>, events: Vec<bool>) -> Result<Self, ModelError> {
        let n = times.len();
        Self::new(times, events, DMatrix::zeros(n, 0))
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    /// Observed times of subjects whose event was observed.
    pub fn event_times(&self) -> Vec<f64> {
        self.times
            .iter()
            .zip(&self.events)
            .filter_map(|(&t, &e)| e.then_some(t))
            .collect()
    }

    /// Dataset restricted to the given subject rows (kept in the given order).
    pub fn subset(&self, keep: &[usize]) -> SurvivalDataset {
        let times = keep.iter().map(|&i| self.times[i]).collect();
        let events = keep.iter().map(|&i| self.events[i]).collect();
        let covs = DMatrix::from_fn(keep.len(), self.p(), |r, c| self.covariates[(keep[r], c)]);
        SurvivalDataset {
            times,
            events,
            covariates: covs,
        }
    }

    /// Dataset with subject `drop` removed (leave-one-out refits).
    pub fn excluding(&self, drop: usize) -> SurvivalDataset {
        let keep: Vec<usize> = (0..self.n()).filter(|&i| i != drop).collect();
        self.subset(&keep)
    }
}

/// Regression coefficients plus spline coefficients, with the squared
/// reparameterization `theta_k = zeta_k^2` kept exactly in sync.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    beta: DVector<f64>,
    zeta: DVector<f64>,
    theta: DVector<f64>,
}

impl ModelParams {
    pub fn from_zeta(beta: DVector<f64>, zeta: DVector<f64>) -> Self {
        let theta = zeta.map(|z| z * z);
        Self { beta, zeta, theta }
    }

    pub fn from_theta(beta: DVector<f64>, theta: DVector<f64>) -> Result<Self, ModelError> {
        for (k, &v) in theta.iter().enumerate() {
            if v < 0.0 {
                return Err(ModelError::NegativeTheta { index: k, value: v });
            }
        }
        let zeta = theta.map(f64::sqrt);
        // Re-square so the invariant theta = zeta^2 holds bitwise.
        let theta = zeta.map(|z| z * z);
        Ok(Self { beta, zeta, theta })
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn zeta(&self) -> &DVector<f64> {
        &self.zeta
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn m(&self) -> usize {
        self.theta.len()
    }

    pub fn dim(&self) -> usize {
        self.p() + self.m()
    }
}

/// Likelihood evaluator with the spline basis pre-evaluated at every observed
/// time. All methods are pure; the struct is safe to share across threads.
pub struct PenalizedLikelihood<'a> {
    data: &'a SurvivalDataset,
    spec: &'a SplineSpec,
    /// I-spline values per subject, row-major n x m.
    psi: Vec<f64>,
    /// M-spline values per subject, row-major n x m.
    mspl: Vec<f64>,
    m: usize,
}

impl<'a> PenalizedLikelihood<'a> {
    pub fn new(data: &'a SurvivalDataset, spec: &'a SplineSpec) -> Self {
        let n = data.n();
        let m = spec.basis_dim();
        let mut psi = vec![0.0; n * m];
        let mut mspl = vec![0.0; n * m];
        for (i, &t) in data.times().iter().enumerate() {
            let iv = spec.isplines_eval(t);
            let mv = spec.msplines_eval(t);
            psi[i * m..(i + 1) * m].copy_from_slice(iv.as_slice());
            mspl[i * m..(i + 1) * m].copy_from_slice(mv.as_slice());
        }
        Self {
            data,
            spec,
            psi,
            mspl,
            m,
        }
    }

    pub fn data(&self) -> &SurvivalDataset {
        self.data
    }

    pub fn spec(&self) -> &SplineSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.data.p() + self.m
    }

    fn linear_predictor(&self, i: usize, beta: &DVector<f64>) -> f64 {
        let p = self.data.p();
        let x = self.data.covariates();
        let mut eta = 0.0;
        for j in 0..p {
            eta += x[(i, j)] * beta[j];
        }
        eta
    }

    /// Log-likelihood. Returns `-inf` when the hazard vanishes at an event
    /// time; the optimizer's line search rejects such points.
    pub fn loglik(&self, params: &ModelParams) -> f64 {
        let theta = params.theta();
        let mut total = 0.0;
        for i in 0..self.data.n() {
            let eta = self.linear_predictor(i, params.beta());
            let w = eta.exp();
            let hc = dot(&self.psi[i * self.m..(i + 1) * self.m], theta);
            total -= w * hc;
            if self.data.events()[i] {
                let hz = dot(&self.mspl[i * self.m..(i + 1) * self.m], theta);
                if hz <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                total += hz.ln() + eta;
            }
        }
        total
    }

    /// Roughness penalty `theta' Omega theta`.
    pub fn penalty(&self, params: &ModelParams) -> f64 {
        let theta = params.theta();
        (self.spec.omega() * theta).dot(theta)
    }

    /// `d J / d xi` at the given parameters: zero on the beta block, `2 Omega
    /// theta` on the theta block.
    pub fn penalty_gradient(&self, params: &ModelParams) -> DVector<f64> {
        let p = self.data.p();
        let mut out = DVector::zeros(p + self.m);
        let gr = self.spec.omega() * params.theta() * 2.0;
        out.rows_mut(p, self.m).copy_from(&gr);
        out
    }

    pub fn penalized(&self, params: &ModelParams, kappa: f64) -> f64 {
        self.loglik(params) - kappa * self.penalty(params)
    }

    /// Per-subject score `d L_i / d (beta, theta)`.
    pub fn score_individual(&self, i: usize, params: &ModelParams) -> DVector<f64> {
        let p = self.data.p();
        let theta = params.theta();
        let mut v = DVector::zeros(p + self.m);
        let eta = self.linear_predictor(i, params.beta());
        let w = eta.exp();
        let psi = &self.psi[i * self.m..(i + 1) * self.m];
        let hc = dot(psi, theta);
        let event = self.data.events()[i];
        let x = self.data.covariates();
        let delta = if event { 1.0 } else { 0.0 };
        for j in 0..p {
            v[j] = x[(i, j)] * (delta - w * hc);
        }
        if event {
            let ms = &self.mspl[i * self.m..(i + 1) * self.m];
            let hz = dot(ms, theta);
            for k in 0..self.m {
                v[p + k] = -w * psi[k] + ms[k] / hz;
            }
        } else {
            for k in 0..self.m {
                v[p + k] = -w * psi[k];
            }
        }
        v
    }

    /// Rows are the per-subject scores at `params` (n x (p+m)).
    pub fn scores_matrix(&self, params: &ModelParams) -> DMatrix<f64> {
        let n = self.data.n();
        let d = self.dim();
        let mut s = DMatrix::zeros(n, d);
        for i in 0..n {
            let v = self.score_individual(i, params);
            for j in 0..d {
                s[(i, j)] = v[j];
            }
        }
        s
    }

    /// Penalized log-likelihood value, its gradient, and the matrix
    /// `H_pL = -d2L + kappa * blockdiag(0, 2 Omega)` (positive definite at an
    /// interior maximum), all in `(beta, theta)` coordinates. When the value
    /// is `-inf` the derivative outputs are not meaningful.
    pub fn value_grad_hess(
        &self,
        params: &ModelParams,
        kappa: f64,
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.data.p();
        let m = self.m;
        let d = p + m;
        let theta = params.theta();
        let x = self.data.covariates();

        let mut val = 0.0;
        let mut g = DVector::zeros(d);
        // h accumulates -d2L, so it enters H_pL with a plus sign.
        let mut h = DMatrix::zeros(d, d);

        for i in 0..self.data.n() {
            let eta = self.linear_predictor(i, params.beta());
            let w = eta.exp();
            let psi = &self.psi[i * m..(i + 1) * m];
            let hc = dot(psi, theta);
            let event = self.data.events()[i];
            val -= w * hc;

            let delta = if event { 1.0 } else { 0.0 };
            for j in 0..p {
                g[j] += x[(i, j)] * (delta - w * hc);
            }
            // -d2L/dbeta2 += w * Hc * x x'
            for j in 0..p {
                let xj = x[(i, j)] * w;
                for l in 0..p {
                    h[(j, l)] += xj * hc * x[(i, l)];
                }
                // -d2L/dbeta dtheta += w * x * psi'
                for k in 0..m {
                    h[(j, p + k)] += xj * psi[k];
                }
            }
            for k in 0..m {
                g[p + k] -= w * psi[k];
            }
            if event {
                let ms = &self.mspl[i * m..(i + 1) * m];
                let hz = dot(ms, theta);
                if hz <= 0.0 {
                    return (f64::NEG_INFINITY, g, h);
                }
                val += hz.ln() + eta;
                let inv = 1.0 / hz;
                let inv2 = inv * inv;
                for k in 0..m {
                    g[p + k] += ms[k] * inv;
                    let row = ms[k] * inv2;
                    for r in 0..m {
                        h[(p + k, p + r)] += row * ms[r];
                    }
                }
            }
        }
        // Mirror the beta-theta block.
        for j in 0..p {
            for k in 0..m {
                h[(p + k, j)] = h[(j, p + k)];
            }
        }
        // Penalty contributions.
        let omega = self.spec.omega();
        if kappa != 0.0 {
            let j_val = (omega * theta).dot(theta);
            val -= kappa * j_val;
            let jg = omega * theta * 2.0;
            for k in 0..m {
                g[p + k] -= kappa * jg[k];
                for r in 0..m {
                    h[(p + k, p + r)] += kappa * 2.0 * omega[(k, r)];
                }
            }
        }
        (val, g, h)
    }

    /// `(H_pL, H_L)` at `params`: the penalized and unpenalized negative
    /// Hessians of the log-likelihood in `(beta, theta)` coordinates.
    pub fn neg_hessians(&self, params: &ModelParams, kappa: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, _, h_pl) = self.value_grad_hess(params, kappa);
        let mut h_l = h_pl.clone();
        if kappa != 0.0 {
            let p = self.data.p();
            let omega = self.spec.omega();
            for k in 0..self.m {
                for r in 0..self.m {
                    h_l[(p + k, p + r)] -= kappa * 2.0 * omega[(k, r)];
                }
            }
        }
        (h_pl, h_l)
    }
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Full log-likelihood `L(beta, theta)`.
pub fn log_likelihood(data: &SurvivalDataset, params: &ModelParams, spec: &SplineSpec) -> f64 {
    PenalizedLikelihood::new(data, spec).loglik(params)
}

/// Roughness penalty `J(theta) = theta' Omega theta`.
pub fn penalty_value(params: &ModelParams, spec: &SplineSpec) -> f64 {
    (spec.omega() * params.theta()).dot(params.theta())
}

/// `L - kappa J`; rejects negative smoothing weights.
pub fn penalized_loglik(
    data: &SurvivalDataset,
    params: &ModelParams,
    spec: &SplineSpec,
    kappa: f64,
) -> Result<f64, ModelError> {
    if kappa < 0.0 {
        return Err(ModelError::NegativeKappa(kappa));
    }
    Ok(PenalizedLikelihood::new(data, spec).penalized(params, kappa))
}

/// Score contribution of one subject, `d L_i / d (beta, theta)`.
pub fn score_individual(
    data: &SurvivalDataset,
    i: usize,
    params: &ModelParams,
    spec: &SplineSpec,
) -> DVector<f64> {
    PenalizedLikelihood::new(data, spec).score_individual(i, params)
}

/// Gradient of the penalized log-likelihood in `(beta, theta)` coordinates.
pub fn pl_gradient(
    data: &SurvivalDataset,
    params: &ModelParams,
    spec: &SplineSpec,
    kappa: f64,
) -> DVector<f64> {
    let (_, g, _) = PenalizedLikelihood::new(data, spec).value_grad_hess(params, kappa);
    g
}

/// `H_pL = -d2L/dxi2 + kappa blockdiag(0, 2 Omega)` in `(beta, theta)`
/// coordinates.
pub fn pl_hessian(
    data: &SurvivalDataset,
    params: &ModelParams,
    spec: &SplineSpec,
    kappa: f64,
) -> DMatrix<f64> {
    let (_, _, h) = PenalizedLikelihood::new(data, spec).value_grad_hess(params, kappa);
    h
}
