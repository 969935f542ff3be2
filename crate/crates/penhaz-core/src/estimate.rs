//! Maximization of the penalized log-likelihood at fixed smoothing weight and
//! data-driven selection of that weight by approximate likelihood
//! cross-validation.
//!
//! The optimizer is a damped Newton method run in the unconstrained
//! `zeta` coordinates (`theta_k = zeta_k^2`), with Marquardt-style diagonal
//! inflation whenever the negative Hessian fails to be positive definite, and
//! a backtracking line search on the penalized log-likelihood. All reported
//! matrices are evaluated in the natural `(beta, theta)` coordinates at the
//! solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::SplineSpec;
use crate::model::{ModelError, ModelParams, PenalizedLikelihood, SurvivalDataset};

const MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-6;
const PL_TOL: f64 = 1e-9;
const PARAM_TOL: f64 = 1e-8;
/// Coefficients at or below this are flagged as boundary solutions.
const BOUNDARY_EPS: f64 = 1e-10;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("smoothing parameter must be nonnegative, got {0}")]
    NegativeKappa(f64),
    #[error("covariate matrix is rank deficient (singular-value ratio {0:.3e})")]
    SingularDesign(f64),
    #[error("penalized log-likelihood is not finite at the starting point")]
    NonFiniteStart,
    #[error("penalized Hessian is numerically singular (condition number {condition:.3e})")]
    SingularHessian { condition: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("kappa search bounds must satisfy 0 < lo < hi, got [{lo}, {hi}]")]
    BadSearchRange { lo: f64, hi: f64 },
    #[error("kappa search needs at least 2 grid points, got {0}")]
    BadSearchGrid(usize),
    #[error("every kappa in the search failed; first failures: {summary}")]
    SelectionFailed { summary: String },
    #[error("fit did not converge")]
    NotConverged,
}

/// A maximized penalized likelihood at one smoothing weight, with everything
/// the variance estimators and the cross-validation criterion need.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    pub kappa: f64,
    /// Unpenalized log-likelihood at the solution.
    pub loglik: f64,
    pub pen_loglik: f64,
    /// `-d2L + kappa blockdiag(0, 2 Omega)` at the solution.
    pub h_pl: DMatrix<f64>,
    /// `-d2L` at the solution.
    pub h_l: DMatrix<f64>,
    /// Per-subject scores, one row per subject.
    pub scores: DMatrix<f64>,
    /// `dJ/dxi` at the solution (zero beta block, `2 Omega theta`).
    pub penalty_grad: DVector<f64>,
    /// Approximate cross-validation criterion; NaN when `h_pl` is singular.
    pub lcv_a: f64,
    /// Equivalent number of parameters, `n * trace(H_pL^-1 K)`.
    pub edf: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Some spline coefficient sits at the nonnegativity boundary.
    pub boundary: bool,
    /// Sup-norm of the penalized gradient in `zeta` coordinates at exit.
    pub grad_inf_norm: f64,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn p(&self) -> usize {
        self.params.p()
    }

    pub fn m(&self) -> usize {
        self.params.m()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }
}

/// Search settings for the smoothing weight: a logarithmic grid followed by
/// golden-section refinement around the grid minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaSearch {
    pub lo: f64,
    pub hi: f64,
    pub grid_points: usize,
    /// Refinement stops once the bracket's relative width drops below this.
    pub refine_rel_width: f64,
}

impl Default for KappaSearch {
    fn default() -> Self {
        Self {
            lo: 1e-2,
            hi: 1e8,
            grid_points: 30,
            refine_rel_width: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KappaSearchResult {
    pub kappa_hat: f64,
    /// Every evaluated `(kappa, LCV_a)` pair, sorted by kappa.
    pub lcv_curve: Vec<(f64, f64)>,
    pub fit: FitResult,
    /// The grid minimum landed on an endpoint of the search range.
    pub boundary_warning: bool,
}

fn check_design_rank(data: &SurvivalDataset) -> Result<(), FitError> {
    let p = data.p();
    if p == 0 {
        return Ok(());
    }
    if data.n() < p {
        return Err(FitError::SingularDesign(0.0));
    }
    let sv = data.covariates().clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min / max < RANK_TOL {
        return Err(FitError::SingularDesign(if max > 0.0 { min / max } else { 0.0 }));
    }
    Ok(())
}

/// Starting point: zero regression coefficients and a flat spline vector
/// scaled so the fitted cumulative hazard at the largest observed time equals
/// the crude estimate (events / n).
fn default_init(data: &SurvivalDataset, spec: &SplineSpec) -> ModelParams {
    let crude = (data.n_events() as f64 / data.n() as f64).max(1e-4);
    let tmax = data.times().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = spec.isplines_eval(tmax).iter().sum();
    let c = if s > 0.0 { crude / s } else { 1e-3 };
    ModelParams::from_zeta(
        DVector::zeros(data.p()),
        DVector::from_element(spec.basis_dim(), c.sqrt()),
    )
}

/// Penalized gradient and negative Hessian mapped to `zeta` coordinates.
fn to_zeta(
    g_th: &DVector<f64>,
    h_th: &DMatrix<f64>,
    params: &ModelParams,
    p: usize,
    m: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = p + m;
    let zeta = params.zeta();
    let mut g = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for j in 0..p {
        g[j] = g_th[j];
        for l in 0..p {
            h[(j, l)] = h_th[(j, l)];
        }
        for k in 0..m {
            let v = 2.0 * zeta[k] * h_th[(j, p + k)];
            h[(j, p + k)] = v;
            h[(p + k, j)] = v;
        }
    }
    for k in 0..m {
        g[p + k] = 2.0 * zeta[k] * g_th[p + k];
        for r in 0..m {
            h[(p + k, p + r)] = 4.0 * zeta[k] * zeta[r] * h_th[(p + k, p + r)];
        }
        // -d2pL/dzeta_k^2 picks up the extra -2 dpL/dtheta_k term.
        h[(p + k, p + k)] -= 2.0 * g_th[p + k];
    }
    (g, h)
}

fn advance(params: &ModelParams, delta: &DVector<f64>, t: f64, p: usize, m: usize) -> ModelParams {
    let mut beta = params.beta().clone();
    let mut zeta = params.zeta().clone();
    for j in 0..p {
        beta[j] += t * delta[j];
    }
    for k in 0..m {
        zeta[k] += t * delta[p + k];
    }
    ModelParams::from_zeta(beta, zeta)
}

fn rel_param_change(old: &ModelParams, new: &ModelParams) -> f64 {
    let mut rel: f64 = 0.0;
    for (a, b) in old
        .beta()
        .iter()
        .chain(old.zeta().iter())
        .zip(new.beta().iter().chain(new.zeta().iter()))
    {
        rel = rel.max((a - b).abs() / (1.0 + b.abs()));
    }
    rel
}

fn condition_number(mat: &DMatrix<f64>) -> f64 {
    let eig = mat.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = eig.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// LCV_a and the equivalent number of parameters from the stored fit pieces.
fn lcv_parts(
    n: usize,
    loglik: f64,
    h_pl: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    kappa: f64,
    penalty_grad: &DVector<f64>,
) -> Result<(f64, f64), FitError> {
    if n < 2 {
        return Err(FitError::SingularHessian { condition: f64::INFINITY });
    }
    let nf = n as f64;
    // K = (S'S + (sum_i v_i)(kappa J')') / (n (n-1))
    let mut k_mat = scores.tr_mul(scores);
    if kappa != 0.0 {
        let colsum = scores.row_sum().transpose();
        let pen = penalty_grad * kappa;
        k_mat += colsum * pen.transpose();
    }
    k_mat /= nf * (nf - 1.0);
    let chol = h_pl
        .clone()
        .cholesky()
        .ok_or_else(|| FitError::SingularHessian {
            condition: condition_number(h_pl),
        })?;
    let solved = chol.solve(&k_mat);
    let trace = solved.trace();
    Ok((-loglik / nf + trace, nf * trace))
}

/// Maximizes `pL(.; kappa)` by damped Newton from `init` (or the default
/// start). Non-convergence is reported through the `converged` flag, not an
/// error.
pub fn fit_fixed_kappa(
    data: &SurvivalDataset,
    spec: &SplineSpec,
    kappa: f64,
    init: Option<&ModelParams>,
) -> Result<FitResult, FitError> {
    if kappa < 0.0 {
        return Err(FitError::NegativeKappa(kappa));
    }
    check_design_rank(data)?;
    let lik = PenalizedLikelihood::new(data, spec);
    let p = data.p();
    let m = spec.basis_dim();
    let d = p + m;

    let mut params = match init {
        Some(start) if lik.penalized(start, kappa).is_finite() => start.clone(),
        _ => default_init(data, spec),
    };
    let mut pl = lik.penalized(&params, kappa);
    if !pl.is_finite() {
        return Err(FitError::NonFiniteStart);
    }

    let mut mu = 0.0_f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_rel_pl = f64::INFINITY;
    let mut last_rel_dx = f64::INFINITY;
    let mut grad_norm = f64::INFINITY;

    while iterations < MAX_ITER {
        iterations += 1;
        let (val, g_th, h_th) = lik.value_grad_hess(&params, kappa);
        let (g, h) = to_zeta(&g_th, &h_th, &params, p, m);
        grad_norm = g.amax();
        if grad_norm <= GRAD_TOL * (1.0 + val.abs())
            && last_rel_pl <= PL_TOL
            && last_rel_dx <= PARAM_TOL
        {
            converged = true;
            break;
        }

        // Marquardt inflation until the damped negative Hessian factors.
        let scale = (0..d)
            .map(|j| h[(j, j)].abs())
            .fold(0.0_f64, f64::max)
            .max(1e-12);
        let mut chol = None;
        let mut local_mu = mu;
        for _ in 0..60 {
            let mut damped = h.clone();
            for j in 0..d {
                damped[(j, j)] += local_mu * scale;
            }
            if let Some(c) = damped.cholesky() {
                chol = Some(c);
                break;
            }
            local_mu = if local_mu == 0.0 { 1e-8 } else { local_mu * 10.0 };
        }
        let Some(chol) = chol else {
            break;
        };
        mu = local_mu;
        let delta = chol.solve(&g);
        let slope = g.dot(&delta).max(0.0);

        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..50 {
            let cand = advance(&params, &delta, t, p, m);
            let cv = lik.penalized(&cand, kappa);
            if cv.is_finite() && cv >= pl + 1e-4 * t * slope - 1e-14 * (1.0 + pl.abs()) {
                last_rel_pl = (cv - pl).abs() / (1.0 + cv.abs());
                last_rel_dx = rel_param_change(&params, &cand);
                params = cand;
                pl = cv;
                accepted = true;
                mu *= 0.25;
                if mu < 1e-12 {
                    mu = 0.0;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            last_rel_pl = f64::INFINITY;
            last_rel_dx = f64::INFINITY;
            mu = if mu == 0.0 { 1e-4 } else { mu * 100.0 };
            if mu > 1e16 {
                break;
            }
        }
    }

    let (h_pl, h_l) = lik.neg_hessians(&params, kappa);
    let scores = lik.scores_matrix(&params);
    let penalty_grad = lik.penalty_gradient(&params);
    let loglik = lik.loglik(&params);
    let boundary = params.theta().iter().any(|&t| t <= BOUNDARY_EPS);
    let (lcv, edf) = lcv_parts(data.n(), loglik, &h_pl, &scores, kappa, &penalty_grad)
        .unwrap_or((f64::NAN, f64::NAN));

    Ok(FitResult {
        params,
        kappa,
        loglik,
        pen_loglik: pl,
        h_pl,
        h_l,
        scores,
        penalty_grad,
        lcv_a: lcv,
        edf,
        converged,
        iterations,
        boundary,
        grad_inf_norm: grad_norm,
    })
}

/// The approximate cross-validation criterion
/// `-n^-1 L + trace(H_pL^-1 K)` with `K = n^-1 sum_i v_i d_i'` and
/// `d_i = (v_i + kappa dJ/dxi) / (n-1)`, evaluated from a converged fit.
pub fn lcv_a(fit: &FitResult) -> Result<f64, FitError> {
    if !fit.converged {
        return Err(FitError::NotConverged);
    }
    lcv_parts(
        fit.n(),
        fit.loglik,
        &fit.h_pl,
        &fit.scores,
        fit.kappa,
        &fit.penalty_grad,
    )
    .map(|(l, _)| l)
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (la, lb) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| {
            if i == points - 1 {
                hi
            } else {
                (la + (lb - la) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

/// Minimizes LCV_a over a logarithmic grid, then refines around the grid
/// minimum by golden section. Each fit warm-starts from the previous
/// solution; ties break toward the smaller kappa.
pub fn select_kappa(
    data: &SurvivalDataset,
    spec: &SplineSpec,
    search: KappaSearch,
) -> Result<KappaSearchResult, FitError> {
    if !(search.lo > 0.0) || !(search.hi > search.lo) {
        return Err(FitError::BadSearchRange {
            lo: search.lo,
            hi: search.hi,
        });
    }
    if search.grid_points < 2 {
        return Err(FitError::BadSearchGrid(search.grid_points));
    }

    let mut curve: Vec<(f64, f64)> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    let mut warm: Option<ModelParams> = None;
    let mut best: Option<(f64, f64, FitResult)> = None;

    let mut consider = |best: &mut Option<(f64, f64, FitResult)>, kappa: f64, fit: FitResult| {
        let lcv = fit.lcv_a;
        match best {
            Some((bk, bl, _)) if lcv > *bl || (lcv == *bl && kappa >= *bk) => {}
            _ => *best = Some((kappa, lcv, fit)),
        }
    };

    let mut evaluate = |kappa: f64,
                        warm: &mut Option<ModelParams>,
                        curve: &mut Vec<(f64, f64)>,
                        failures: &mut Vec<String>,
                        best: &mut Option<(f64, f64, FitResult)>|
     -> f64 {
        match fit_fixed_kappa(data, spec, kappa, warm.as_ref()) {
            Ok(fit) => {
                *warm = Some(fit.params.clone());
                if fit.converged && fit.lcv_a.is_finite() {
                    curve.push((kappa, fit.lcv_a));
                    let lcv = fit.lcv_a;
                    consider(best, kappa, fit);
                    lcv
                } else {
                    failures.push(format!(
                        "kappa={kappa:.6e}: converged={}, lcv={}",
                        fit.converged, fit.lcv_a
                    ));
                    f64::INFINITY
                }
            }
            Err(err) => {
                failures.push(format!("kappa={kappa:.6e}: {err}"));
                f64::INFINITY
            }
        }
    };

    let grid = log_grid(search.lo, search.hi, search.grid_points);
    let mut grid_lcv = vec![f64::INFINITY; grid.len()];
    for (i, &kappa) in grid.iter().enumerate() {
        grid_lcv[i] = evaluate(kappa, &mut warm, &mut curve, &mut failures, &mut best);
    }

    if best.is_none() {
        let summary = failures
            .iter()
            .take(4)
            .cloned()
            .collect::<Vec<_>>()
            .join("; ");
        return Err(FitError::SelectionFailed { summary });
    }

    let best_idx = grid_lcv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let boundary_warning = best_idx == 0 || best_idx == grid.len() - 1;

    // Golden-section refinement in log-kappa between the grid neighbors.
    let a0 = grid[best_idx.saturating_sub(1)].ln();
    let b0 = grid[(best_idx + 1).min(grid.len() - 1)].ln();
    let tol = (1.0 + search.refine_rel_width).ln();
    if b0 - a0 > tol {
        const INVPHI: f64 = 0.618_033_988_749_894_9;
        let (mut a, mut b) = (a0, b0);
        let mut c = b - INVPHI * (b - a);
        let mut d = a + INVPHI * (b - a);
        let mut fc = evaluate(c.exp(), &mut warm, &mut curve, &mut failures, &mut best);
        let mut fd = evaluate(d.exp(), &mut warm, &mut curve, &mut failures, &mut best);
        let mut guard = 0;
        while b - a > tol && guard < 200 {
            guard += 1;
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INVPHI * (b - a);
                fc = evaluate(c.exp(), &mut warm, &mut curve, &mut failures, &mut best);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INVPHI * (b - a);
                fd = evaluate(d.exp(), &mut warm, &mut curve, &mut failures, &mut best);
            }
        }
    }

    let (kappa_hat, _, fit) = best.unwrap();
    curve.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    Ok(KappaSearchResult {
        kappa_hat,
        lcv_curve: curve,
        fit,
        boundary_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineSpec;
    use crate::model::{log_likelihood, penalty_value};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn weibull_sample(rng: &mut ChaCha12Rng, n: usize, shape: f64, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(1e-12..1.0);
                scale * (-u.ln()).powf(1.0 / shape)
            })
            .collect()
    }

    fn weibull_dataset(seed: u64, n: usize) -> (SurvivalDataset, SplineSpec) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let times = weibull_sample(&mut rng, n, 13.0, 100.0);
        let events: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() > 0.2).collect();
        let spec = SplineSpec::make_knots(&times, 7).unwrap();
        (
            SurvivalDataset::without_covariates(times, events).unwrap(),
            spec,
        )
    }

    /// Nelder-Mead in the zeta coordinates; derivative-free oracle.
    fn nelder_mead(
        f: &dyn Fn(&DVector<f64>) -> f64,
        start: &DVector<f64>,
        scale: f64,
        max_eval: usize,
    ) -> (DVector<f64>, f64) {
        let d = start.len();
        let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(d + 1);
        simplex.push((start.clone(), f(start)));
        for j in 0..d {
            let mut v = start.clone();
            v[j] += scale;
            let fv = f(&v);
            simplex.push((v, fv));
        }
        let mut evals = d + 1;
        while evals < max_eval {
            simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap()); // descending: best first
            let best = simplex[0].1;
            let worst = simplex[d].1;
            if (best - worst).abs() <= 1e-12 * (1.0 + best.abs()) {
                break;
            }
            let centroid: DVector<f64> = {
                let mut c = DVector::zeros(d);
                for item in simplex.iter().take(d) {
                    c += &item.0;
                }
                c / d as f64
            };
            let reflect = &centroid * 2.0 - &simplex[d].0;
            let fr = f(&reflect);
            evals += 1;
            if fr > simplex[0].1 {
                let expand = &centroid * 3.0 - &simplex[d].0 * 2.0;
                let fe = f(&expand);
                evals += 1;
                simplex[d] = if fe > fr { (expand, fe) } else { (reflect, fr) };
            } else if fr > simplex[d - 1].1 {
                simplex[d] = (reflect, fr);
            } else {
                let contract = (&centroid + &simplex[d].0) * 0.5;
                let fc = f(&contract);
                evals += 1;
                if fc > simplex[d].1 {
                    simplex[d] = (contract, fc);
                } else {
                    let best_point = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        item.0 = (&item.0 + &best_point) * 0.5;
                        item.1 = f(&item.0);
                        evals += 1;
                    }
                }
            }
        }
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        simplex[0].clone()
    }

    #[test]
    fn fit_reaches_local_maximum() {
        let (data, spec) = weibull_dataset(101, 500);
        let fit = fit_fixed_kappa(&data, &spec, 0.0, None).unwrap();
        assert!(fit.converged, "iterations={}", fit.iterations);
        let base = fit.pen_loglik;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let mut zeta = fit.params.zeta().clone();
            for z in zeta.iter_mut() {
                *z += (rng.gen::<f64>() - 0.5) * 2e-3;
            }
            let perturbed = ModelParams::from_zeta(DVector::zeros(0), zeta);
            let v = log_likelihood(&data, &perturbed, &spec);
            assert!(v <= base + 1e-9 * (1.0 + base.abs()));
        }
    }

    #[test]
    fn fit_matches_derivative_free_oracle() {
        let (data, spec) = {
            let mut rng = ChaCha12Rng::seed_from_u64(103);
            let times = weibull_sample(&mut rng, 150, 13.0, 100.0);
            let events: Vec<bool> = (0..150).map(|_| rng.gen::<f64>() > 0.2).collect();
            let spec = SplineSpec::make_knots(&times, 3).unwrap();
            (
                SurvivalDataset::without_covariates(times, events).unwrap(),
                spec,
            )
        };
        let fit = fit_fixed_kappa(&data, &spec, 0.0, None).unwrap();
        assert!(fit.converged);

        let lik = PenalizedLikelihood::new(&data, &spec);
        let value = |zeta: &DVector<f64>| {
            lik.penalized(&ModelParams::from_zeta(DVector::zeros(0), zeta.clone()), 0.0)
        };
        let start = default_init(&data, &spec);
        let mut best = (start.zeta().clone(), value(start.zeta()));
        // Restarted Nelder-Mead until progress stalls.
        for round in 0..8 {
            let scale = 0.2 / (1 << round.min(4)) as f64;
            let next = nelder_mead(&value, &best.0, scale, 40_000);
            if next.1 <= best.1 + 1e-9 {
                best = next;
                break;
            }
            best = next;
        }
        assert!(
            (fit.pen_loglik - best.1).abs() <= 1e-4,
            "newton={} nelder-mead={}",
            fit.pen_loglik,
            best.1
        );
    }

    #[test]
    fn huge_kappa_forces_penalty_to_zero() {
        let (data, spec) = weibull_dataset(107, 300);
        let flat = fit_fixed_kappa(&data, &spec, 1e12, None).unwrap();
        let free = fit_fixed_kappa(&data, &spec, 0.0, None).unwrap();
        let j_flat = penalty_value(&flat.params, &spec);
        let j_free = penalty_value(&free.params, &spec);
        assert!(j_flat <= 1e-6 * j_free, "J(flat)={j_flat} J(free)={j_free}");
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let (data, spec) = weibull_dataset(109, 200);
        let cold = fit_fixed_kappa(&data, &spec, 5.0, None).unwrap();
        let other = fit_fixed_kappa(&data, &spec, 2.0, None).unwrap();
        let warm = fit_fixed_kappa(&data, &spec, 5.0, Some(&other.params)).unwrap();
        assert!(cold.converged && warm.converged);
        assert_relative_eq!(cold.pen_loglik, warm.pen_loglik, max_relative = 1e-7);
    }

    #[test]
    fn fit_is_deterministic() {
        let (data, spec) = weibull_dataset(113, 150);
        let a = fit_fixed_kappa(&data, &spec, 3.0, None).unwrap();
        let b = fit_fixed_kappa(&data, &spec, 3.0, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.pen_loglik, b.pen_loglik);
        assert_eq!(a.h_pl, b.h_pl);
        assert_eq!(a.lcv_a, b.lcv_a);
    }

    #[test]
    fn gradient_small_at_reported_maximum() {
        let (data, spec) = weibull_dataset(127, 250);
        let fit = fit_fixed_kappa(&data, &spec, 10.0, None).unwrap();
        assert!(fit.converged);
        assert!(fit.grad_inf_norm <= GRAD_TOL * (1.0 + fit.pen_loglik.abs()));
        // Score rows plus the penalty gradient balance at the solution:
        // sum_i v_i = kappa dJ/dxi at an interior maximum (theta block).
        let sum = fit.scores.row_sum().transpose();
        let resid = &sum - &fit.penalty_grad * fit.kappa;
        // Compare in zeta coordinates, where the optimizer converged.
        for k in 0..fit.m() {
            let z = 2.0 * fit.params.zeta()[k] * resid[fit.p() + k];
            assert!(z.abs() <= 1e-5 * (1.0 + fit.pen_loglik.abs()));
        }
    }

    #[test]
    fn lcv_reduces_to_score_form_at_zero_kappa() {
        let (data, spec) = weibull_dataset(131, 120);
        let fit = fit_fixed_kappa(&data, &spec, 0.0, None).unwrap();
        assert!(fit.converged);
        let n = fit.n() as f64;
        let meat = fit.scores.tr_mul(&fit.scores);
        let chol = fit.h_l.clone().cholesky().unwrap();
        let trace = chol.solve(&meat).trace() / (n * (n - 1.0));
        let expected = -fit.loglik / n + trace;
        assert_relative_eq!(lcv_a(&fit).unwrap(), expected, max_relative = 1e-12);
        assert_relative_eq!(fit.lcv_a, expected, max_relative = 1e-12);
    }

    #[test]
    fn lcv_matches_exact_leave_one_out() {
        let mut rng = ChaCha12Rng::seed_from_u64(137);
        let n = 30;
        let times = weibull_sample(&mut rng, n, 13.0, 100.0);
        let events = vec![true; n];
        let data = SurvivalDataset::without_covariates(times, events).unwrap();
        let spec = SplineSpec::make_knots(data.times(), 4).unwrap();
        let kappa = 100.0;
        let fit = fit_fixed_kappa(&data, &spec, kappa, None).unwrap();
        assert!(fit.converged);

        let mut loo = 0.0;
        for i in 0..n {
            let reduced = data.excluding(i);
            let refit = fit_fixed_kappa(&reduced, &spec, kappa, Some(&fit.params)).unwrap();
            assert!(refit.converged);
            let li = log_likelihood(&data.subset(&[i]), &refit.params, &spec);
            assert!(li.is_finite());
            loo += li;
        }
        let exact = -loo / n as f64;
        let approx = fit.lcv_a;
        assert!(
            (approx - exact).abs() <= 0.05 * exact.abs(),
            "lcv_a={approx} exact={exact}"
        );
    }

    #[test]
    fn lcv_trace_term_positive_on_fits() {
        for seed in [139, 149] {
            let (data, spec) = weibull_dataset(seed, 150);
            for kappa in [0.0, 1.0, 1e3] {
                let fit = fit_fixed_kappa(&data, &spec, kappa, None).unwrap();
                if !fit.converged || !fit.lcv_a.is_finite() {
                    continue;
                }
                let trace = fit.lcv_a + fit.loglik / fit.n() as f64;
                assert!(trace > 0.0, "kappa={kappa} trace={trace}");
            }
        }
    }

    #[test]
    fn select_kappa_reports_minimum_of_curve() {
        let (data, spec) = weibull_dataset(151, 120);
        let search = KappaSearch {
            lo: 1.0,
            hi: 1e6,
            grid_points: 10,
            refine_rel_width: 1e-2,
        };
        let result = select_kappa(&data, &spec, search).unwrap();
        let min = result
            .lcv_curve
            .iter()
            .cloned()
            .fold(f64::INFINITY, |acc, (_, l)| acc.min(l));
        let at_hat = result
            .lcv_curve
            .iter()
            .find(|(k, _)| *k == result.kappa_hat)
            .unwrap()
            .1;
        assert_eq!(min, at_hat);
        assert_eq!(result.fit.kappa, result.kappa_hat);
        // Ties and better values both land at kappa_hat.
        for &(k, l) in &result.lcv_curve {
            assert!(l > at_hat || (l == at_hat && k >= result.kappa_hat));
        }
    }

    #[test]
    fn select_kappa_stable_under_grid_refinement() {
        let (data, spec) = weibull_dataset(157, 150);
        let coarse = select_kappa(
            &data,
            &spec,
            KappaSearch {
                lo: 1.0,
                hi: 1e6,
                grid_points: 10,
                refine_rel_width: 1e-2,
            },
        )
        .unwrap();
        let fine = select_kappa(
            &data,
            &spec,
            KappaSearch {
                lo: 1.0,
                hi: 1e6,
                grid_points: 20,
                refine_rel_width: 1e-2,
            },
        )
        .unwrap();
        let rel = (coarse.kappa_hat - fine.kappa_hat).abs() / fine.kappa_hat;
        assert!(rel <= 0.05, "coarse={} fine={}", coarse.kappa_hat, fine.kappa_hat);
        assert!((coarse.fit.lcv_a - fine.fit.lcv_a).abs() <= 1e-4);
    }

    #[test]
    fn select_kappa_validates_range() {
        let (data, spec) = weibull_dataset(163, 60);
        assert!(matches!(
            select_kappa(
                &data,
                &spec,
                KappaSearch {
                    lo: 0.0,
                    hi: 1.0,
                    ..KappaSearch::default()
                }
            ),
            Err(FitError::BadSearchRange { .. })
        ));
    }

    #[test]
    fn loglik_invariant_under_time_rescaling() {
        let (data, spec) = weibull_dataset(167, 100);
        let fit = fit_fixed_kappa(&data, &spec, 0.0, None).unwrap();
        assert!(fit.converged);
        let c = 0.01;
        let scaled_times: Vec<f64> = data.times().iter().map(|t| t * c).collect();
        let scaled =
            SurvivalDataset::without_covariates(scaled_times, data.events().to_vec()).unwrap();
        let scaled_spec = SplineSpec::make_knots(scaled.times(), 7).unwrap();
        let refit = fit_fixed_kappa(&scaled, &scaled_spec, 0.0, None).unwrap();
        assert!(refit.converged);
        // Densities pick up a 1/c Jacobian per observed event.
        let d = data.n_events() as f64;
        let adjusted = refit.pen_loglik + d * c.ln();
        assert!(
            (adjusted - fit.pen_loglik).abs() <= 1e-6 * (1.0 + fit.pen_loglik.abs()),
            "original={} rescaled-adjusted={}",
            fit.pen_loglik,
            adjusted
        );
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(173);
        let n = 40;
        let times = weibull_sample(&mut rng, n, 13.0, 100.0);
        let events = vec![true; n];
        let mut covs = DMatrix::zeros(n, 2);
        for i in 0..n {
            let x = rng.gen::<f64>();
            covs[(i, 0)] = x;
            covs[(i, 1)] = 2.0 * x; // collinear
        }
        let data = SurvivalDataset::new(times, events, covs).unwrap();
        let spec = SplineSpec::make_knots(data.times(), 5).unwrap();
        assert!(matches!(
            fit_fixed_kappa(&data, &spec, 0.0, None),
            Err(FitError::SingularDesign(_))
        ));
    }
}
