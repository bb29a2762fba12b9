//! Damped Newton root finder for score equations, plus the weighted and
//! pilot fits built on it.
//!
//! The solver works on closures so callers can stream data instead of
//! materializing it: each score/Jacobian evaluation may traverse a stream.
//! Steps are safeguarded by halving until the sup-norm of the score
//! decreases, and ill-conditioned (or flat, for losses with linear pieces)
//! Jacobians are handled by an escalating ridge before giving up.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::data::{DataError, LabeledPoint};
use crate::loss::LossSpec;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("empty sample")]
    EmptySample,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("weights must be finite, nonnegative, and not all zero")]
    BadWeights,
    #[error("score produced a non-finite value at the starting point")]
    NonFinite,
    #[error("jacobian is singular even after ridge regularization")]
    SingularSystem,
    #[error("pilot needs at least {need} points in dimension {d}, got {got}")]
    PilotTooSmall { need: usize, got: usize, d: usize },
    #[error("pilot fit did not converge ({0}); a larger pilot sample usually fixes this")]
    PilotFit(String),
    #[error(transparent)]
    Stream(#[from] DataError),
}

/// Newton iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Convergence threshold on the sup-norm of the score.
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings attempted before escalating the ridge.
    pub max_halvings: usize,
    /// Iterates beyond this norm are flagged as diverging (no finite root,
    /// e.g. separable data under the logistic loss).
    pub divergence_norm: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
            divergence_norm: 1e6,
        }
    }
}

/// Outcome of a Newton run. `score_norms` records the sup-norm at the
/// starting point and after each accepted step (non-increasing by
/// construction).
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub final_score_norm: f64,
    pub converged: bool,
    pub diverging: bool,
    pub score_norms: Vec<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solve `m x = rhs`, preferring Cholesky and falling back to LU for
/// indefinite systems; `None` when the factorization fails or the solution
/// is not finite.
fn try_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let x = m.clone().lu().solve(rhs)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Find a root of `score_fn` by damped Newton iteration from `init`.
///
/// `jacobian_fn` must return the derivative of `score_fn`. Non-convergence
/// (iteration budget, stalled line search, diverging iterates) is reported,
/// not raised; errors are reserved for structural failures.
pub fn solve_score<S, J>(
    mut score_fn: S,
    mut jacobian_fn: J,
    init: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<SolveReport, SolveError>
where
    S: FnMut(&DVector<f64>) -> Result<DVector<f64>, SolveError>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>, SolveError>,
{
    let d = init.len();
    let mut theta = init.clone();
    let mut score = score_fn(&theta)?;
    if score.len() != d {
        return Err(SolveError::DimMismatch(score.len(), d));
    }
    let mut norm = inf_norm(&score);
    if !norm.is_finite() {
        return Err(SolveError::NonFinite);
    }
    let mut norms = vec![norm];
    let mut iterations = 0;

    let report = |theta: DVector<f64>, iterations, norm: f64, norms: Vec<f64>, converged| {
        let diverging = theta.norm() > opts.divergence_norm;
        Ok(SolveReport {
            theta,
            iterations,
            final_score_norm: norm,
            converged: converged && !diverging,
            diverging,
            score_norms: norms,
        })
    };

    loop {
        if norm <= opts.tol {
            return report(theta, iterations, norm, norms, true);
        }
        if theta.norm() > opts.divergence_norm {
            return report(theta, iterations, norm, norms, false);
        }
        if iterations >= opts.max_iter {
            return report(theta, iterations, norm, norms, false);
        }
        iterations += 1;

        let jac = jacobian_fn(&theta)?;
        if jac.nrows() != d || jac.ncols() != d {
            return Err(SolveError::DimMismatch(jac.nrows(), d));
        }
        // The score Jacobians here are symmetric in exact arithmetic;
        // symmetrize to keep the Cholesky path honest.
        let jac = (&jac + jac.transpose()) * 0.5;

        let eig = jac.symmetric_eigenvalues();
        let max_abs = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let min_eig = eig.iter().fold(f64::INFINITY, |m, &e| m.min(e));
        let well_conditioned = min_eig > 0.0 && max_abs <= 1e12 * min_eig;
        // Ridge scale: trace-based when there is curvature, score-based as a
        // floor so flat regions (e.g. the linear branch of the DWD loss)
        // still produce a usable gradient-like direction.
        let scale = (jac.trace().abs() / d as f64).max(norm).max(1e-12);

        let mut accepted = false;
        'ridge: for k in 0..=8 {
            let lambda = if k == 0 {
                if well_conditioned {
                    0.0
                } else {
                    1e-8 * scale
                }
            } else {
                1e-8 * scale * 100f64.powi(k)
            };
            let m = if lambda > 0.0 {
                let mut m = jac.clone();
                for i in 0..d {
                    m[(i, i)] += lambda;
                }
                m
            } else {
                jac.clone()
            };
            let Some(delta) = try_solve(&m, &score) else {
                continue;
            };
            let mut step = 1.0;
            for _ in 0..=opts.max_halvings {
                let trial = &theta - &delta * step;
                let trial_score = score_fn(&trial)?;
                let trial_norm = inf_norm(&trial_score);
                if trial_norm.is_finite() && trial_norm < norm {
                    theta = trial;
                    score = trial_score;
                    norm = trial_norm;
                    norms.push(norm);
                    accepted = true;
                    break 'ridge;
                }
                step *= 0.5;
            }
        }
        if !accepted {
            // No direction reduced the score: stalled (or truly singular).
            if norm.is_finite() {
                return report(theta, iterations, norm, norms, false);
            }
            return Err(SolveError::SingularSystem);
        }
    }
}

/// Weighted Z-estimator on a materialized sample: root of
/// `sum_i w_i phi'(y_i x_i' theta) y_i x_i / sum_i w_i`.
///
/// Scaling all weights by a positive constant leaves the root unchanged.
pub fn fit_weighted(
    loss: LossSpec,
    points: &[LabeledPoint],
    weights: &[f64],
    init: Option<&DVector<f64>>,
    opts: &SolveOptions,
) -> Result<SolveReport, SolveError> {
    let first = points.first().ok_or(SolveError::EmptySample)?;
    let d = first.dim();
    if points.iter().any(|p| p.dim() != d) {
        return Err(SolveError::DimMismatch(d, d));
    }
    if weights.len() != points.len() {
        return Err(SolveError::DimMismatch(weights.len(), points.len()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(SolveError::BadWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(SolveError::BadWeights);
    }

    let run = |l: LossSpec, start: &DVector<f64>, o: &SolveOptions| {
        let score = |theta: &DVector<f64>| {
            let mut s = DVector::zeros(d);
            for (p, &w) in points.iter().zip(weights) {
                if w == 0.0 {
                    continue;
                }
                let z = p.y * p.x.dot(theta);
                s.axpy(w * l.dloss(z) * p.y, &p.x, 1.0);
            }
            Ok(s / total)
        };
        let jacobian = |theta: &DVector<f64>| {
            let mut j = DMatrix::zeros(d, d);
            for (p, &w) in points.iter().zip(weights) {
                if w == 0.0 {
                    continue;
                }
                let z = p.y * p.x.dot(theta);
                j.ger(w * l.ddloss(z), &p.x, &p.x, 1.0);
            }
            Ok(j / total)
        };
        solve_score(score, jacobian, start, o)
    };

    match init {
        Some(t) => {
            if t.len() != d {
                return Err(SolveError::DimMismatch(t.len(), d));
            }
            run(loss, t, opts)
        }
        None if matches!(loss, LossSpec::Dwd { .. }) => {
            // The DWD loss is linear at the origin, so a cold Newton start
            // has no curvature to work with; begin from the logistic
            // solution instead.
            let warm_opts = SolveOptions {
                tol: opts.tol.max(1e-6),
                ..*opts
            };
            let warm = run(LossSpec::Logistic, &DVector::zeros(d), &warm_opts)?;
            run(loss, &warm.theta, opts)
        }
        None => run(loss, &DVector::zeros(d), opts),
    }
}

/// Pilot estimate plus the curvature information reused downstream:
/// the pilot Hessian (ridged to positive definite if necessary), its
/// inverse when available, and the retained pilot sample.
#[derive(Debug, Clone)]
pub struct PilotFit {
    pub theta_pilot: DVector<f64>,
    pub hessian_pilot: DMatrix<f64>,
    pub hessian_inv: Option<DMatrix<f64>>,
    pub pilot_points: Vec<LabeledPoint>,
}

impl PilotFit {
    pub fn r0(&self) -> usize {
        self.pilot_points.len()
    }

    pub fn dim(&self) -> usize {
        self.theta_pilot.len()
    }

    /// Assemble a pilot from existing pieces (no refit, no ridge). The
    /// inverse is computed when the given Hessian admits a Cholesky
    /// factorization. An empty point list is allowed; downstream code
    /// treats such a pilot as contributing nothing.
    pub fn from_parts(
        theta_pilot: DVector<f64>,
        hessian_pilot: DMatrix<f64>,
        pilot_points: Vec<LabeledPoint>,
    ) -> Result<Self, SolveError> {
        let d = theta_pilot.len();
        if hessian_pilot.nrows() != d || hessian_pilot.ncols() != d {
            return Err(SolveError::DimMismatch(hessian_pilot.nrows(), d));
        }
        if let Some(p) = pilot_points.iter().find(|p| p.dim() != d) {
            return Err(SolveError::DimMismatch(p.dim(), d));
        }
        let hessian_inv = Cholesky::new(hessian_pilot.clone()).map(|c| c.inverse());
        Ok(PilotFit {
            theta_pilot,
            hessian_pilot,
            hessian_inv,
            pilot_points,
        })
    }
}

/// Ridge a symmetric matrix until it is safely positive definite; returns
/// the adjusted matrix and its inverse.
fn ridge_to_spd(mut m: DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), SolveError> {
    let d = m.nrows();
    let eig = m.symmetric_eigenvalues();
    let max_eig = eig.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let min_eig = eig.iter().fold(f64::INFINITY, |a, &e| a.min(e));
    if min_eig <= 0.0 || max_eig > 1e12 * min_eig {
        let base = (1e-8 * m.trace().abs() / d as f64).max(1e-12 * max_eig.max(1.0));
        let shift = base + (-min_eig).max(0.0);
        for i in 0..d {
            m[(i, i)] += shift;
        }
    }
    let mut lambda = 0.0;
    for _ in 0..8 {
        let mut trial = m.clone();
        for i in 0..d {
            trial[(i, i)] += lambda;
        }
        if let Some(chol) = Cholesky::new(trial.clone()) {
            return Ok((trial, chol.inverse()));
        }
        lambda = if lambda == 0.0 {
            1e-10 * m.trace().abs().max(1.0)
        } else {
            lambda * 100.0
        };
    }
    Err(SolveError::SingularSystem)
}

/// Unweighted fit on the pilot sample, retaining the sample and the
/// observed-curvature matrix `(1/r0) sum_i phi''(y_i x_i' theta) x_i x_i'`
/// evaluated at the pilot estimate.
///
/// Requires at least `10 * d` points so the downstream sampling weights are
/// built on a usable estimate.
pub fn fit_pilot(
    loss: LossSpec,
    pilot_points: Vec<LabeledPoint>,
    opts: &SolveOptions,
) -> Result<PilotFit, SolveError> {
    let first = pilot_points.first().ok_or(SolveError::EmptySample)?;
    let d = first.dim();
    let r0 = pilot_points.len();
    if r0 < 10 * d {
        return Err(SolveError::PilotTooSmall {
            need: 10 * d,
            got: r0,
            d,
        });
    }
    let weights = vec![1.0; r0];
    let report = fit_weighted(loss, &pilot_points, &weights, None, opts)?;
    if !report.converged {
        return Err(SolveError::PilotFit(format!(
            "final score norm {:.3e} after {} iterations{}",
            report.final_score_norm,
            report.iterations,
            if report.diverging { ", iterates diverging" } else { "" }
        )));
    }
    let theta = report.theta;
    let mut h = DMatrix::zeros(d, d);
    for p in &pilot_points {
        let z = p.y * p.x.dot(&theta);
        h.ger(loss.ddloss(z), &p.x, &p.x, 1.0);
    }
    h /= r0 as f64;
    let (hessian_pilot, hessian_inv) = ridge_to_spd(h)?;
    Ok(PilotFit {
        theta_pilot: theta,
        hessian_pilot,
        hessian_inv: Some(hessian_inv),
        pilot_points,
    })
}

// ======================================================================
// tests
// ======================================================================
