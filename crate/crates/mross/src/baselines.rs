//! Reference competitors for the benchmarks: uniform Poisson subsampling
//! and plain optimally-weighted subsampling, both sharing the scan and
//! solver plumbing so comparisons are apples to apples.

use nalgebra::DVector;
use rand::Rng;
use thiserror::Error;

use crate::data::{DataError, LabeledPoint};
use crate::estimator::{BasisKind, ProjectionBasis};
use crate::loss::LossSpec;
use crate::sampler::{estimate_normalizer, scan, InclusionRule, RuleKind, SamplerError, ScanSummary};
use crate::solver::{fit_weighted, PilotFit, SolveError, SolveOptions, SolveReport};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("budget {budget} exceeds the data size {n}")]
    BudgetTooLarge { budget: usize, n: u64 },
    #[error("subsample came back empty; increase the budget")]
    EmptySubsample,
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Stream(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Unif,
    Osmac,
}

#[derive(Debug, Clone)]
pub struct BaselineEstimate {
    pub method: BaselineMethod,
    pub theta: DVector<f64>,
    pub report: SolveReport,
    pub realized_r: u64,
}

/// Uniform Poisson subsample of expected size `budget` from `n` points,
/// followed by an unweighted fit (constant weights cancel in the root).
/// Returns the scan summary too, for variance plug-ins.
pub fn unif_fit_detailed<I, R>(
    points: I,
    dim: usize,
    n: u64,
    budget: usize,
    loss: LossSpec,
    rng: &mut R,
) -> Result<(BaselineEstimate, ScanSummary), BaselineError>
where
    I: IntoIterator<Item = Result<LabeledPoint, DataError>>,
    R: Rng + ?Sized,
{
    if budget as u64 > n {
        return Err(BaselineError::BudgetTooLarge { budget, n });
    }
    let placeholder = PilotFit::from_parts(
        DVector::zeros(dim),
        nalgebra::DMatrix::zeros(dim, dim),
        vec![],
    )
    .expect("dimensions are consistent by construction");
    let rule = InclusionRule::new(RuleKind::Uniform, budget, f64::INFINITY)?;
    let basis = ProjectionBasis::new(BasisKind::ConstantOnly, DVector::zeros(dim), loss);
    // Every weight is 1, so the exact weight total is n and pi = budget/n.
    let summary = scan(points, &placeholder, &rule, loss, &basis, n as f64, rng)?;
    if summary.subsample.is_empty() {
        return Err(BaselineError::EmptySubsample);
    }
    let sub: Vec<LabeledPoint> = summary.subsample.iter().map(|(p, _)| p.clone()).collect();
    let weights = vec![1.0; sub.len()];
    let report = fit_weighted(loss, &sub, &weights, None, &SolveOptions::default())?;
    Ok((
        BaselineEstimate {
            method: BaselineMethod::Unif,
            theta: report.theta.clone(),
            report,
            realized_r: summary.realized_r,
        },
        summary,
    ))
}

pub fn unif_fit<I, R>(
    points: I,
    dim: usize,
    n: u64,
    budget: usize,
    loss: LossSpec,
    rng: &mut R,
) -> Result<BaselineEstimate, BaselineError>
where
    I: IntoIterator<Item = Result<LabeledPoint, DataError>>,
    R: Rng + ?Sized,
{
    unif_fit_detailed(points, dim, n, budget, loss, rng).map(|(est, _)| est)
}

/// Optimally-weighted Poisson subsample over the whole stream (no region
/// compression) with pilot-based probabilities, followed by an
/// inverse-probability-weighted fit. Returns the scan summary too, for
/// variance plug-ins.
pub fn osmac_fit_detailed<I, R>(
    points: I,
    pilot: &PilotFit,
    n_scan: u64,
    budget_r: usize,
    loss: LossSpec,
    rng: &mut R,
) -> Result<(BaselineEstimate, ScanSummary), BaselineError>
where
    I: IntoIterator<Item = Result<LabeledPoint, DataError>>,
    R: Rng + ?Sized,
{
    let rule = InclusionRule::new(RuleKind::LOpt, budget_r, f64::INFINITY)?;
    let basis = ProjectionBasis::new(
        BasisKind::ConstantOnly,
        pilot.theta_pilot.clone(),
        loss,
    );
    let normalizer = estimate_normalizer(pilot, &rule, loss, n_scan)?;
    let summary = scan(points, pilot, &rule, loss, &basis, normalizer, rng)?;
    if summary.subsample.is_empty() {
        return Err(BaselineError::EmptySubsample);
    }
    let n = summary.n_total as f64;
    let sub: Vec<LabeledPoint> = summary.subsample.iter().map(|(p, _)| p.clone()).collect();
    let weights: Vec<f64> = summary.subsample.iter().map(|(_, pi)| 1.0 / (n * pi)).collect();
    let report = fit_weighted(
        loss,
        &sub,
        &weights,
        Some(&pilot.theta_pilot),
        &SolveOptions::default(),
    )?;
    Ok((
        BaselineEstimate {
            method: BaselineMethod::Osmac,
            theta: report.theta.clone(),
            report,
            realized_r: summary.realized_r,
        },
        summary,
    ))
}

pub fn osmac_fit<I, R>(
    points: I,
    pilot: &PilotFit,
    n_scan: u64,
    budget_r: usize,
    loss: LossSpec,
    rng: &mut R,
) -> Result<BaselineEstimate, BaselineError>
where
    I: IntoIterator<Item = Result<LabeledPoint, DataError>>,
    R: Rng + ?Sized,
{
    osmac_fit_detailed(points, pilot, n_scan, budget_r, loss, rng).map(|(est, _)| est)
}

// ======================================================================
// tests
// ======================================================================
