//! M-spline and I-spline bases on a clamped knot vector, plus the
//! integrated-squared-second-derivative penalty matrix.
//!
//! M-splines are B-splines rescaled so that each basis function integrates to
//! one over its support; I-splines are their running integrals. A basis of
//! order 4 (cubic pieces) over `q` distinct knots has `m = q - 2 + 4`
//! functions. The penalty matrix entries `omega[k][r] = ∫ ψ_k''(t) ψ_r''(t) dt`
//! are assembled per knot interval with a 3-point Gauss rule, which is exact
//! because the integrand is piecewise quadratic for order 4.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for the positive-semidefiniteness check on the penalty.
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("need at least 2 distinct finite time values to place knots")]
    DegenerateDomain,
    #[error("need at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("knots must be finite and strictly increasing")]
    InvalidKnots,
    #[error("spline order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("second-derivative penalty requires order >= 3, got {0}")]
    UnsupportedPenaltyOrder(usize),
    #[error("penalty matrix has eigenvalue {0} below the PSD tolerance")]
    IndefinitePenalty(f64),
    #[error("evaluation time {0} outside the knot range [{1}, {2}]")]
    OutOfRange(f64, f64, f64),
}

/// How the distinct knots are placed over the observed time range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    /// Equally spaced between the smallest and largest observed time.
    #[default]
    EqualSpacing,
    /// Empirical quantiles of the observed times (boundaries included).
    Quantile,
}

/// A fixed spline basis: distinct knots, clamped knot vector, basis dimension
/// and the precomputed penalty matrix. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSpec {
    distinct: Vec<f64>,
    knots: Vec<f64>,
    order: usize,
    m: usize,
    omega: DMatrix<f64>,
    /// Row j holds the integrals of every M-spline from the first knot up to
    /// distinct knot j (row-major, q rows of m entries).
    cum_int: Vec<f64>,
}

impl SplineSpec {
    /// Builds an order-4 basis with `n_knots` distinct knots equally spaced
    /// over the range of `times`.
    pub fn make_knots(times: &[f64], n_knots: usize) -> Result<Self, SplineError> {
        Self::make_knots_with(times, n_knots, KnotPlacement::EqualSpacing)
    }

    /// Builds an order-4 basis with the given knot placement rule.
    pub fn make_knots_with(
        times: &[f64],
        n_knots: usize,
        placement: KnotPlacement,
    ) -> Result<Self, SplineError> {
        if n_knots < 2 {
            return Err(SplineError::TooFewKnots(n_knots));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &t in times {
            if !t.is_finite() {
                return Err(SplineError::DegenerateDomain);
            }
            lo = lo.min(t);
            hi = hi.max(t);
        }
        if times.is_empty() || !(hi > lo) {
            return Err(SplineError::DegenerateDomain);
        }
        let distinct = match placement {
            KnotPlacement::EqualSpacing => linspace(lo, hi, n_knots),
            KnotPlacement::Quantile => quantile_knots(times, n_knots)?,
        };
        Self::from_distinct_knots(&distinct, 4)
    }

    /// Builds a basis of arbitrary order from explicit distinct knots. The
    /// penalty matrix is only defined for order >= 3 and is stored as zero
    /// otherwise; `penalty_matrix` reports the unsupported order.
    pub fn from_distinct_knots(distinct: &[f64], order: usize) -> Result<Self, SplineError> {
        if order < 1 {
            return Err(SplineError::InvalidOrder(order));
        }
        if distinct.len() < 2 {
            return Err(SplineError::TooFewKnots(distinct.len()));
        }
        if distinct.iter().any(|t| !t.is_finite())
            || distinct.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(SplineError::InvalidKnots);
        }
        let q = distinct.len();
        let m = q - 2 + order;
        let mut knots = Vec::with_capacity(m + order);
        knots.extend(std::iter::repeat(distinct[0]).take(order));
        knots.extend_from_slice(&distinct[1..q - 1]);
        knots.extend(std::iter::repeat(distinct[q - 1]).take(order));
        debug_assert_eq!(knots.len(), m + order);

        let omega = if order >= 3 {
            let omega = penalty_from_knots(&knots, order, m, distinct);
            check_psd(&omega)?;
            omega
        } else {
            DMatrix::zeros(m, m)
        };

        let cum_int = cumulative_integrals(&knots, order, m, distinct);
        Ok(Self {
            distinct: distinct.to_vec(),
            knots,
            order,
            m,
            omega,
            cum_int,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of basis functions.
    pub fn basis_dim(&self) -> usize {
        self.m
    }

    pub fn distinct_knots(&self) -> &[f64] {
        &self.distinct
    }

    pub fn knot_range(&self) -> (f64, f64) {
        (self.distinct[0], *self.distinct.last().unwrap())
    }

    /// The penalty matrix `omega`, zero for orders below 3.
    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    /// The penalty matrix, or an error when the order makes the second
    /// derivative non-square-integrable.
    pub fn penalty_matrix(&self) -> Result<&DMatrix<f64>, SplineError> {
        if self.order < 3 {
            return Err(SplineError::UnsupportedPenaltyOrder(self.order));
        }
        Ok(&self.omega)
    }

    /// Evaluates all M-splines at `t`. Zero outside the knot range.
    pub fn msplines_eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        let b = bspline_values_all(&self.knots, self.order, t);
        for k in 0..self.m {
            let w = self.knots[k + self.order] - self.knots[k];
            if w > 0.0 {
                out[k] = self.order as f64 * b[k] / w;
            }
        }
        out
    }

    /// Evaluates all I-splines (running integrals of the M-splines) at `t`.
    /// Clamped to 0 below the first knot and 1 above the last.
    pub fn isplines_eval(&self, t: f64) -> DVector<f64> {
        let (lo, hi) = self.knot_range();
        if t <= lo {
            return DVector::zeros(self.m);
        }
        if t >= hi {
            return DVector::from_element(self.m, 1.0);
        }
        // Last interval index j with distinct[j] <= t.
        let j = self.distinct.partition_point(|&s| s <= t) - 1;
        let mut out = DVector::zeros(self.m);
        let row = &self.cum_int[j * self.m..(j + 1) * self.m];
        let partial = gauss2_msplines(&self.knots, self.order, self.m, self.distinct[j], t);
        for k in 0..self.m {
            out[k] = (row[k] + partial[k]).clamp(0.0, 1.0);
        }
        out
    }

    /// Second derivatives of all M-splines at `t` (order >= 3 only).
    pub fn msplines_second_deriv(&self, t: f64) -> Result<DVector<f64>, SplineError> {
        if self.order < 3 {
            return Err(SplineError::UnsupportedPenaltyOrder(self.order));
        }
        let d2 = bspline_d2_all(&self.knots, self.order, t);
        let mut out = DVector::zeros(self.m);
        for k in 0..self.m {
            let w = self.knots[k + self.order] - self.knots[k];
            if w > 0.0 {
                out[k] = self.order as f64 * d2[k] / w;
            }
        }
        Ok(out)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    v[n - 1] = hi;
    v
}

fn quantile_knots(times: &[f64], n_knots: usize) -> Result<Vec<f64>, SplineError> {
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let last = (sorted.len() - 1) as f64;
    let knots: Vec<f64> = (0..n_knots)
        .map(|j| {
            let pos = last * j as f64 / (n_knots - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 < sorted.len() {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            } else {
                sorted[i]
            }
        })
        .collect();
    if knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SplineError::InvalidKnots);
    }
    Ok(knots)
}

/// Locates the knot interval containing `t`: the index `j` with
/// `knots[j] <= t < knots[j+1]`, treating the final nonempty interval as
/// closed on the right. `None` outside the knot range.
fn find_span(knots: &[f64], t: f64) -> Option<usize> {
    let lo = knots[0];
    let hi = *knots.last().unwrap();
    if !(t >= lo) || !(t <= hi) {
        return None;
    }
    if t == hi {
        // Left end of the last nonempty interval.
        return (0..knots.len() - 1).rev().find(|&j| knots[j] < knots[j + 1]);
    }
    Some(knots.partition_point(|&k| k <= t) - 1)
}

/// Values of every order-`k` B-spline over `knots` at `t` (Cox–de Boor
/// triangular recurrence over the `k` splines alive on the containing span).
fn bspline_values_all(knots: &[f64], k: usize, t: f64) -> DVector<f64> {
    let nb = knots.len() - k;
    let mut out = DVector::zeros(nb);
    let Some(span) = find_span(knots, t) else {
        return out;
    };
    let mut vals = vec![0.0; k];
    let mut left = vec![0.0; k];
    let mut right = vec![0.0; k];
    vals[0] = 1.0;
    for j in 1..k {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let term = if denom != 0.0 { vals[r] / denom } else { 0.0 };
            vals[r] = saved + right[r + 1] * term;
            saved = left[j - r] * term;
        }
        vals[j] = saved;
    }
    for (r, &v) in vals.iter().enumerate() {
        let i = span + 1 + r - k;
        if i < nb {
            out[i] = v;
        }
    }
    out
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den != 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Second derivatives of every order-`k` B-spline at `t` (k >= 3), obtained by
/// applying the derivative recurrence twice to order-(k-2) values.
fn bspline_d2_all(knots: &[f64], k: usize, t: f64) -> DVector<f64> {
    let nb = knots.len() - k;
    let b = bspline_values_all(knots, k - 2, t);
    let mut d1 = vec![0.0; nb + 1];
    for (i, d) in d1.iter_mut().enumerate() {
        let a = safe_div(b[i], knots[i + k - 2] - knots[i]);
        let c = safe_div(b[i + 1], knots[i + k - 1] - knots[i + 1]);
        *d = (k as f64 - 2.0) * (a - c);
    }
    let mut d2 = DVector::zeros(nb);
    for i in 0..nb {
        let a = safe_div(d1[i], knots[i + k - 1] - knots[i]);
        let c = safe_div(d1[i + 1], knots[i + k] - knots[i + 1]);
        d2[i] = (k as f64 - 1.0) * (a - c);
    }
    d2
}

/// 2-point Gauss integral of every M-spline over `[a, b]`; exact for cubics.
fn gauss2_msplines(knots: &[f64], order: usize, m: usize, a: f64, b: f64) -> Vec<f64> {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let offset = half / 3.0_f64.sqrt();
    let mut acc = vec![0.0; m];
    for node in [mid - offset, mid + offset] {
        let bv = bspline_values_all(knots, order, node);
        for (k, a_k) in acc.iter_mut().enumerate() {
            let w = knots[k + order] - knots[k];
            if w > 0.0 {
                *a_k += half * order as f64 * bv[k] / w;
            }
        }
    }
    acc
}

fn cumulative_integrals(knots: &[f64], order: usize, m: usize, distinct: &[f64]) -> Vec<f64> {
    let q = distinct.len();
    let mut cum = vec![0.0; q * m];
    for j in 0..q - 1 {
        let seg = gauss2_msplines(knots, order, m, distinct[j], distinct[j + 1]);
        for k in 0..m {
            cum[(j + 1) * m + k] = cum[j * m + k] + seg[k];
        }
    }
    cum
}

/// Assembles `omega` by 3-point Gauss per knot interval, exact for the
/// piecewise-quadratic product of second derivatives at order 4.
fn penalty_from_knots(knots: &[f64], order: usize, m: usize, distinct: &[f64]) -> DMatrix<f64> {
    const NODES: [f64; 3] = [-0.7745966692414834, 0.0, 0.7745966692414834];
    const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let mut omega = DMatrix::zeros(m, m);
    let scale = order as f64;
    for w in distinct.windows(2) {
        let half = 0.5 * (w[1] - w[0]);
        let mid = 0.5 * (w[0] + w[1]);
        for (node, weight) in NODES.iter().zip(WEIGHTS) {
            let t = mid + half * node;
            let bd2 = bspline_d2_all(knots, order, t);
            let mut d2 = vec![0.0; m];
            for (k, d) in d2.iter_mut().enumerate() {
                let width = knots[k + order] - knots[k];
                if width > 0.0 {
                    *d = scale * bd2[k] / width;
                }
            }
            let c = weight * half;
            for k in 0..m {
                if d2[k] == 0.0 {
                    continue;
                }
                for r in 0..m {
                    omega[(k, r)] += c * d2[k] * d2[r];
                }
            }
        }
    }
    omega
}

fn check_psd(omega: &DMatrix<f64>) -> Result<(), SplineError> {
    let eig = omega.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL * max.max(1.0) {
        return Err(SplineError::IndefinitePenalty(min));
    }
    Ok(())
}
