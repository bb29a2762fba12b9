//! Combined estimator: pools the pilot score, the variance-reduced
//! weighted subsample score, and the compressed-region centroid score into
//! one estimating equation, then attaches a plug-in covariance.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::LabeledPoint;
use crate::loss::LossSpec;
use crate::sampler::ScanSummary;
use crate::solver::{solve_score, PilotFit, SolveError, SolveOptions, SolveReport};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("subsample is empty; increase the budget or the threshold")]
    EmptySubsample,
    #[error("combined hessian is singular at the estimate")]
    SingularHessian,
    #[error("confidence level must be in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("covariance has negative variance {value} at coordinate {index}")]
    NegativeVariance { index: usize, value: f64 },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

// ======================================================================
// projection basis
// ======================================================================

/// Which auxiliary summary vector g(x, y) the subsample-score correction
/// projects on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// g = (1, y, phi'(y x'theta_pilot) y x')', length d + 2.
    PilotScore,
    /// g = 1; the correction degenerates to a ratio adjustment.
    ConstantOnly,
}

/// Auxiliary-summary map, frozen at the pilot estimate so every evaluation
/// during a scan agrees with the ones used downstream.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    pub kind: BasisKind,
    pub theta_pilot: DVector<f64>,
    pub loss: LossSpec,
}

impl ProjectionBasis {
    pub fn new(kind: BasisKind, theta_pilot: DVector<f64>, loss: LossSpec) -> Self {
        ProjectionBasis {
            kind,
            theta_pilot,
            loss,
        }
    }

    /// Length of g.
    pub fn dim(&self) -> usize {
        match self.kind {
            BasisKind::PilotScore => self.theta_pilot.len() + 2,
            BasisKind::ConstantOnly => 1,
        }
    }

    /// The `phi'(y x'theta_pilot)` factor the basis evaluations compute
    /// internally; zero for the constant basis.
    pub fn pilot_dloss(&self, p: &LabeledPoint) -> f64 {
        match self.kind {
            BasisKind::ConstantOnly => 0.0,
            BasisKind::PilotScore => self.loss.dloss(p.y * p.x.dot(&self.theta_pilot)),
        }
    }

    /// Write g(x, y) into `out` without allocating.
    ///
    /// Panics if `out` has the wrong length or the point dimension does not
    /// match the pilot estimate; callers validate dimensions up front.
    pub fn fill(&self, out: &mut DVector<f64>, p: &LabeledPoint) {
        self.fill_from_dloss(out, p, self.pilot_dloss(p));
    }

    /// [`fill`](Self::fill) with `phi'(y x'theta_pilot)` precomputed; lets
    /// the scan reuse its per-point margin evaluation.
    pub fn fill_from_dloss(&self, out: &mut DVector<f64>, p: &LabeledPoint, dl: f64) {
        match self.kind {
            BasisKind::ConstantOnly => out[0] = 1.0,
            BasisKind::PilotScore => {
                let scale = dl * p.y;
                out[0] = 1.0;
                out[1] = p.y;
                for (o, &x) in out.as_mut_slice()[2..].iter_mut().zip(p.x.as_slice()) {
                    *o = scale * x;
                }
            }
        }
    }

    /// Add g(x, y) into `acc` without materializing it; same element order
    /// and arithmetic as [`fill_from_dloss`](Self::fill_from_dloss)
    /// followed by a vector add.
    pub fn accumulate_from_dloss(&self, acc: &mut DVector<f64>, p: &LabeledPoint, dl: f64) {
        match self.kind {
            BasisKind::ConstantOnly => acc[0] += 1.0,
            BasisKind::PilotScore => {
                let scale = dl * p.y;
                acc[0] += 1.0;
                acc[1] += p.y;
                for (a, &x) in acc.as_mut_slice()[2..].iter_mut().zip(p.x.as_slice()) {
                    *a += scale * x;
                }
            }
        }
    }

    /// Allocating variant of [`fill`](Self::fill).
    pub fn g_features(&self, p: &LabeledPoint) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.fill(&mut out, p);
        out
    }
}

// ======================================================================
// corrected subsample score
// ======================================================================

/// Relative ridge added to the subsample Gram matrix of g before
/// inversion; guards against near-collinear basis coordinates at small
/// subsample sizes.
const GRAM_RIDGE: f64 = 1e-10;

/// Per-point correction factors for the weighted subsample score.
///
/// The factors depend only on the scan (through g), not on theta, so one
/// context serves every Newton iteration of a solve.
#[derive(Debug, Clone)]
pub struct RbContext {
    /// One factor per subsample entry, in subsample order.
    pub brackets: Vec<f64>,
    /// True when the Gram matrix could not be inverted and the correction
    /// fell back to plain inverse-probability weighting (all factors 1).
    pub fallback: bool,
}

impl RbContext {
    pub fn new(summary: &ScanSummary, basis: &ProjectionBasis) -> RbContext {
        if summary.subsample.is_empty() {
            return RbContext {
                brackets: Vec::new(),
                fallback: false,
            };
        }
        let d_g = basis.dim();
        let n = summary.n_total as f64;
        let mut g_buf = DVector::zeros(d_g);
        let mut weighted_sum = DVector::zeros(d_g);
        let mut gram = DMatrix::zeros(d_g, d_g);
        let mut pilot_dls = Vec::with_capacity(summary.subsample.len());
        for (p, pi) in &summary.subsample {
            let dl = basis.pilot_dloss(p);
            basis.fill_from_dloss(&mut g_buf, p, dl);
            pilot_dls.push(dl);
            let w = 1.0 / pi;
            weighted_sum.axpy(w, &g_buf, 1.0);
            gram.ger(w, &g_buf, &g_buf, 1.0);
        }
        weighted_sum /= n;
        gram /= n;
        // Difference between the weighted subsample g-total and the exact
        // scanned g-total; zero (to rounding) when every pi is 1.
        let target = weighted_sum - (summary.n_s as f64 / n) * &summary.gbar;
        let ridge = GRAM_RIDGE * gram.trace() / d_g as f64;
        for i in 0..d_g {
            gram[(i, i)] += ridge;
        }
        let coeffs = Cholesky::new(gram.clone())
            .map(|c| c.solve(&target))
            .or_else(|| gram.lu().solve(&target))
            .filter(|a| a.iter().all(|v| v.is_finite()));
        let Some(coeffs) = coeffs else {
            return RbContext {
                brackets: vec![1.0; summary.subsample.len()],
                fallback: true,
            };
        };
        let brackets = summary
            .subsample
            .iter()
            .zip(&pilot_dls)
            .map(|((p, _), &dl)| {
                basis.fill_from_dloss(&mut g_buf, p, dl);
                1.0 - coeffs.dot(&g_buf)
            })
            .collect();
        RbContext {
            brackets,
            fallback: false,
        }
    }

    /// Corrected weighted subsample score:
    /// `sum_i brackets_i / (n pi_i) * phi'(y_i x_i' theta) y_i x_i`.
    pub fn score(&self, theta: &DVector<f64>, summary: &ScanSummary, loss: LossSpec) -> DVector<f64> {
        let n = summary.n_total as f64;
        let mut s = DVector::zeros(theta.len());
        for ((p, pi), b) in summary.subsample.iter().zip(&self.brackets) {
            let z = p.y * p.x.dot(theta);
            s.axpy(b / (n * pi) * loss.dloss(z) * p.y, &p.x, 1.0);
        }
        s
    }

    /// Derivative of [`score`](Self::score) in theta.
    pub fn jacobian(
        &self,
        theta: &DVector<f64>,
        summary: &ScanSummary,
        loss: LossSpec,
    ) -> DMatrix<f64> {
        let n = summary.n_total as f64;
        let d = theta.len();
        let mut j = DMatrix::zeros(d, d);
        for ((p, pi), b) in summary.subsample.iter().zip(&self.brackets) {
            let z = p.y * p.x.dot(theta);
            j.ger(b / (n * pi) * loss.ddloss(z), &p.x, &p.x, 1.0);
        }
        j
    }
}

/// One-shot variant of [`RbContext::score`], rebuilding the correction
/// factors from the summary.
pub fn rb_region_score(
    theta: &DVector<f64>,
    summary: &ScanSummary,
    basis: &ProjectionBasis,
) -> DVector<f64> {
    RbContext::new(summary, basis).score(theta, summary, basis.loss)
}

// ======================================================================
// centroid score
// ======================================================================

/// Score contribution of the two compressed regions, each represented by
/// its centroid: `(n_plus/n) phi'(xbar_plus' theta) xbar_plus -
/// (n_minus/n) phi'(-xbar_minus' theta) xbar_minus`.
pub fn centroid_score(theta: &DVector<f64>, summary: &ScanSummary, loss: LossSpec) -> DVector<f64> {
    let n = summary.n_total as f64;
    let mut s = DVector::zeros(theta.len());
    if summary.n_plus > 0 {
        let z = summary.xbar_plus.dot(theta);
        s.axpy(summary.n_plus as f64 / n * loss.dloss(z), &summary.xbar_plus, 1.0);
    }
    if summary.n_minus > 0 {
        let z = -summary.xbar_minus.dot(theta);
        s.axpy(
            -(summary.n_minus as f64) / n * loss.dloss(z),
            &summary.xbar_minus,
            1.0,
        );
    }
    s
}

/// Derivative of [`centroid_score`] in theta.
pub fn centroid_jacobian(
    theta: &DVector<f64>,
    summary: &ScanSummary,
    loss: LossSpec,
) -> DMatrix<f64> {
    let n = summary.n_total as f64;
    let d = theta.len();
    let mut j = DMatrix::zeros(d, d);
    if summary.n_plus > 0 {
        let z = summary.xbar_plus.dot(theta);
        j.ger(
            summary.n_plus as f64 / n * loss.ddloss(z),
            &summary.xbar_plus,
            &summary.xbar_plus,
            1.0,
        );
    }
    if summary.n_minus > 0 {
        let z = -summary.xbar_minus.dot(theta);
        j.ger(
            summary.n_minus as f64 / n * loss.ddloss(z),
            &summary.xbar_minus,
            &summary.xbar_minus,
            1.0,
        );
    }
    j
}

// ======================================================================
// combined estimating equation
// ======================================================================

fn pilot_score(theta: &DVector<f64>, pilot: &PilotFit, loss: LossSpec) -> DVector<f64> {
    let mut s = DVector::zeros(theta.len());
    for p in &pilot.pilot_points {
        let z = p.y * p.x.dot(theta);
        s.axpy(loss.dloss(z) * p.y, &p.x, 1.0);
    }
    s
}

fn pilot_jacobian(theta: &DVector<f64>, pilot: &PilotFit, loss: LossSpec) -> DMatrix<f64> {
    let d = theta.len();
    let mut j = DMatrix::zeros(d, d);
    for p in &pilot.pilot_points {
        let z = p.y * p.x.dot(theta);
        j.ger(loss.ddloss(z), &p.x, &p.x, 1.0);
    }
    j
}

/// Pooled estimating function: pilot points at weight 1/(n + r0), scan
/// contributions (corrected subsample score plus centroid score, both
/// averages over n) at weight n/(n + r0).
pub fn combined_score(
    theta: &DVector<f64>,
    pilot: &PilotFit,
    summary: &ScanSummary,
    basis: &ProjectionBasis,
) -> DVector<f64> {
    let ctx = RbContext::new(summary, basis);
    combined_score_with(&ctx, theta, pilot, summary, basis.loss)
}

fn combined_score_with(
    ctx: &RbContext,
    theta: &DVector<f64>,
    pilot: &PilotFit,
    summary: &ScanSummary,
    loss: LossSpec,
) -> DVector<f64> {
    let n = summary.n_total as f64;
    let pooled = n + pilot.r0() as f64;
    let scan_part = ctx.score(theta, summary, loss) + centroid_score(theta, summary, loss);
    pilot_score(theta, pilot, loss) / pooled + scan_part * (n / pooled)
}

fn combined_jacobian_with(
    ctx: &RbContext,
    theta: &DVector<f64>,
    pilot: &PilotFit,
    summary: &ScanSummary,
    loss: LossSpec,
) -> DMatrix<f64> {
    let n = summary.n_total as f64;
    let pooled = n + pilot.r0() as f64;
    let scan_part = ctx.jacobian(theta, summary, loss) + centroid_jacobian(theta, summary, loss);
    pilot_jacobian(theta, pilot, loss) / pooled + scan_part * (n / pooled)
}

// ======================================================================
// estimate, covariance, intervals
// ======================================================================

/// Scan bookkeeping carried on the final estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub n_plus: u64,
    pub n_minus: u64,
    pub n_s: u64,
    pub realized_r: u64,
    pub pi_sum: f64,
    /// True when the score correction fell back to plain weighting.
    pub rb_fallback: bool,
}

/// Final estimate with its plug-in covariance and per-coordinate
/// confidence intervals.
#[derive(Debug, Clone)]
pub struct MrossEstimate {
    pub theta: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub level: f64,
    pub report: SolveReport,
    pub diagnostics: Diagnostics,
}

/// Solve the combined estimating equation by Newton iteration from the
/// pilot estimate, then attach the plug-in covariance and `level`
/// confidence intervals.
///
/// A non-converged Newton run is reported through `report.converged`
/// rather than an error so callers can count failures.
pub fn solve_mross(
    pilot: &PilotFit,
    summary: &ScanSummary,
    basis: &ProjectionBasis,
    level: f64,
    opts: &SolveOptions,
) -> Result<MrossEstimate, EstimatorError> {
    if summary.subsample.is_empty() {
        return Err(EstimatorError::EmptySubsample);
    }
    let loss = basis.loss;
    let ctx = RbContext::new(summary, basis);
    let report = solve_score(
        |theta| Ok(combined_score_with(&ctx, theta, pilot, summary, loss)),
        |theta| Ok(combined_jacobian_with(&ctx, theta, pilot, summary, loss)),
        &pilot.theta_pilot,
        opts,
    )?;
    let covariance = plugin_variance(&report.theta, pilot, summary, basis)?;
    let intervals = confidence_intervals(&report.theta, &covariance, level)?;
    Ok(MrossEstimate {
        theta: report.theta.clone(),
        covariance,
        intervals,
        level,
        report,
        diagnostics: Diagnostics {
            n_plus: summary.n_plus,
            n_minus: summary.n_minus,
            n_s: summary.n_s,
            realized_r: summary.realized_r,
            pi_sum: summary.pi_sum,
            rb_fallback: ctx.fallback,
        },
    })
}

/// Plug-in covariance of the combined estimate: sandwich with the
/// pooled-hessian bread and a two-layer meat.
///
/// The sampling layer sums `(1 - pi_i) aleph_i aleph_i' / (n pi_i)^2` over
/// the subsample, where `aleph_i = Psi_i(theta) - B' g_i` removes the part
/// of the score explained by the auxiliary summaries (their totals are
/// observed exactly during the scan, so only the residual is subject to
/// sampling noise, and certainty draws contribute none at all).
///
/// The data layer adds `M / (n + r0)` where `M` estimates the score second
/// moment `E[Psi Psi']` from the inverse-probability-weighted subsample
/// plus the two compressed regions collapsed to their centroids.  It
/// accounts for the estimate targeting a finite batch of points rather
/// than the population; without it the intervals undercover once the
/// budget is no longer vanishingly small relative to the stream.
///
/// With flat probabilities and a constant-only basis the two layers
/// recombine into the classic Horvitz-Thompson sandwich meat
/// `sum Psi_i Psi_i' / (n pi_i)^2` exactly.
pub fn plugin_variance(
    theta: &DVector<f64>,
    pilot: &PilotFit,
    summary: &ScanSummary,
    basis: &ProjectionBasis,
) -> Result<DMatrix<f64>, EstimatorError> {
    if summary.subsample.is_empty() {
        return Err(EstimatorError::EmptySubsample);
    }
    let loss = basis.loss;
    let d = theta.len();
    let d_g = basis.dim();
    let n = summary.n_total as f64;
    let pooled = n + pilot.r0() as f64;

    // First pass: pooled curvature plus the projection Gram and
    // cross-moment, all at the final estimate, one margin evaluation per
    // point; the per-point factors are kept for the second pass.
    let m = summary.subsample.len();
    let mut hessian = pilot_jacobian(theta, pilot, loss);
    let mut g_buf = DVector::zeros(d_g);
    let mut gram = DMatrix::zeros(d_g, d_g);
    let mut cross = DMatrix::zeros(d_g, d);
    let mut score_scales = Vec::with_capacity(m);
    let mut pilot_dls = Vec::with_capacity(m);
    for (p, pi) in &summary.subsample {
        let z = p.y * p.x.dot(theta);
        hessian.ger(loss.ddloss(z) / pi, &p.x, &p.x, 1.0);
        let score_scale = loss.dloss(z) * p.y;
        let dl = basis.pilot_dloss(p);
        basis.fill_from_dloss(&mut g_buf, p, dl);
        let w = 1.0 / (n * pi);
        gram.ger(w, &g_buf, &g_buf, 1.0);
        cross.ger(w * score_scale, &g_buf, &p.x, 1.0);
        score_scales.push(score_scale);
        pilot_dls.push(dl);
    }
    hessian += centroid_jacobian(theta, summary, loss) * n;
    hessian /= pooled;
    let hessian_inv = Cholesky::new(hessian)
        .ok_or(EstimatorError::SingularHessian)?
        .inverse();

    let ridge = GRAM_RIDGE * gram.trace() / d_g as f64;
    for i in 0..d_g {
        gram[(i, i)] += ridge;
    }
    let proj = Cholesky::new(gram.clone())
        .map(|c| c.solve(&cross))
        .or_else(|| gram.lu().solve(&cross))
        .ok_or(EstimatorError::SingularHessian)?;

    // Second pass: sampling layer sums squared projection residuals at
    // inverse-probability weight with the finite-population factor; data
    // layer sums the weighted score second moment.
    let mut meat = DMatrix::zeros(d, d);
    let mut second = DMatrix::zeros(d, d);
    let mut residual = DVector::zeros(d);
    for (i, (p, pi)) in summary.subsample.iter().enumerate() {
        basis.fill_from_dloss(&mut g_buf, p, pilot_dls[i]);
        let score_scale = score_scales[i];
        second.ger(score_scale * score_scale / (n * pi), &p.x, &p.x, 1.0);
        residual.copy_from(&p.x);
        residual *= score_scale;
        residual.gemv_tr(-1.0, &proj, &g_buf, 1.0);
        let w = 1.0 / (n * pi);
        meat.ger(w * w * (1.0 - pi), &residual, &residual, 1.0);
    }
    meat *= (n / pooled).powi(2);

    // Compressed regions enter the second moment through their centroids;
    // their per-point scores are near zero by construction, so the proxy
    // error is immaterial.
    if summary.n_plus > 0 {
        let z = summary.xbar_plus.dot(theta);
        let f = summary.n_plus as f64 / n * loss.dloss(z).powi(2);
        second.ger(f, &summary.xbar_plus, &summary.xbar_plus, 1.0);
    }
    if summary.n_minus > 0 {
        let z = -summary.xbar_minus.dot(theta);
        let f = summary.n_minus as f64 / n * loss.dloss(z).powi(2);
        second.ger(f, &summary.xbar_minus, &summary.xbar_minus, 1.0);
    }
    meat += second / pooled;

    let v = &hessian_inv * meat * &hessian_inv;
    Ok((&v + v.transpose()) * 0.5)
}

/// Per-coordinate normal-approximation intervals
/// `theta_j +/- z_{(1+level)/2} sqrt(V_jj)`.
pub fn confidence_intervals(
    theta: &DVector<f64>,
    covariance: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<(f64, f64)>, EstimatorError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimatorError::BadLevel(level));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let v = covariance[(i, i)];
            if v < 0.0 {
                return Err(EstimatorError::NegativeVariance { index: i, value: v });
            }
            let half = z * v.sqrt();
            Ok((t - half, t + half))
        })
        .collect()
}

// ======================================================================
// tests
// ======================================================================
