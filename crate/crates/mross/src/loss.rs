//! Margin losses for binary linear classification.
//!
//! Every loss here is convex, non-increasing, and classification-calibrated.
//! The squared hinge and DWD losses have one kink each; the one-sided
//! derivative choices at the kink are fixed below so all callers agree:
//! squared hinge uses the right-continuous second derivative at z = 1, DWD
//! uses the left branch of the first derivative (the two branches coincide
//! there) and the right branch of the second derivative at z = gamma.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::LabeledPoint;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss argument must be finite, got {0}")]
    NonFiniteInput(f64),
    #[error("dwd scale parameter must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("dimension mismatch: theta has {theta} entries, point has {point}")]
    DimensionMismatch { theta: usize, point: usize },
}

/// A margin loss `phi` applied to `z = y * x' theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// `phi(z) = ln(1 + exp(-z))`
    Logistic,
    /// `phi(z) = max(1 - z, 0)^2`
    SquaredHinge,
    /// `phi(z) = 1/z` for `z >= gamma`, linear continuation below.
    Dwd { gamma: f64 },
}

impl LossSpec {
    /// DWD loss with validated scale parameter.
    pub fn dwd(gamma: f64) -> Result<Self, LossError> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(LossError::BadGamma(gamma));
        }
        Ok(LossSpec::Dwd { gamma })
    }

    fn validate(&self) -> Result<(), LossError> {
        if let LossSpec::Dwd { gamma } = *self {
            if !(gamma.is_finite() && gamma > 0.0) {
                return Err(LossError::BadGamma(gamma));
            }
        }
        Ok(())
    }

    /// `phi(z)`. Assumes finite input; validated entry points are
    /// [`eval_loss`] and friends.
    #[inline]
    pub fn loss(&self, z: f64) -> f64 {
        match *self {
            LossSpec::Logistic => {
                // ln(1 + e^-z), stable on both tails.
                if z >= 0.0 {
                    (-z).exp().ln_1p()
                } else {
                    -z + z.exp().ln_1p()
                }
            }
            LossSpec::SquaredHinge => {
                let u = 1.0 - z;
                if u > 0.0 {
                    u * u
                } else {
                    0.0
                }
            }
            LossSpec::Dwd { gamma } => {
                if z >= gamma {
                    1.0 / z
                } else {
                    2.0 / gamma - z / (gamma * gamma)
                }
            }
        }
    }

    /// `phi'(z)`.
    #[inline]
    pub fn dloss(&self, z: f64) -> f64 {
        match *self {
            LossSpec::Logistic => {
                // -1 / (1 + e^z), stable on both tails.
                if z >= 0.0 {
                    let e = (-z).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + z.exp())
                }
            }
            LossSpec::SquaredHinge => {
                if z < 1.0 {
                    -2.0 * (1.0 - z)
                } else {
                    0.0
                }
            }
            LossSpec::Dwd { gamma } => {
                if z > gamma {
                    -1.0 / (z * z)
                } else {
                    -1.0 / (gamma * gamma)
                }
            }
        }
    }

    /// `phi''(z)` (defined everywhere via the kink conventions above).
    #[inline]
    pub fn ddloss(&self, z: f64) -> f64 {
        match *self {
            LossSpec::Logistic => {
                // sigmoid(z) * sigmoid(-z)
                let e = (-z.abs()).exp();
                let s = 1.0 + e;
                e / (s * s)
            }
            LossSpec::SquaredHinge => {
                if z < 1.0 {
                    2.0
                } else {
                    0.0
                }
            }
            LossSpec::Dwd { gamma } => {
                if z >= gamma {
                    2.0 / (z * z * z)
                } else {
                    0.0
                }
            }
        }
    }
}

fn checked(spec: LossSpec, z: f64) -> Result<(), LossError> {
    spec.validate()?;
    if !z.is_finite() {
        return Err(LossError::NonFiniteInput(z));
    }
    Ok(())
}

/// Validated `phi(z)`.
pub fn eval_loss(spec: LossSpec, z: f64) -> Result<f64, LossError> {
    checked(spec, z)?;
    Ok(spec.loss(z))
}

/// Validated `phi'(z)`.
pub fn eval_dloss(spec: LossSpec, z: f64) -> Result<f64, LossError> {
    checked(spec, z)?;
    Ok(spec.dloss(z))
}

/// Validated `phi''(z)`.
pub fn eval_ddloss(spec: LossSpec, z: f64) -> Result<f64, LossError> {
    checked(spec, z)?;
    Ok(spec.ddloss(z))
}

/// Per-point score contribution `phi'(y x' theta) * y * x`.
///
/// The gradient of `theta -> phi(y x' theta)`; the full-data estimating
/// equation sets the average of these to zero.
pub fn point_score(
    spec: LossSpec,
    theta: &DVector<f64>,
    p: &LabeledPoint,
) -> Result<DVector<f64>, LossError> {
    spec.validate()?;
    if theta.len() != p.x.len() {
        return Err(LossError::DimensionMismatch {
            theta: theta.len(),
            point: p.x.len(),
        });
    }
    let z = p.y * p.x.dot(theta);
    if !z.is_finite() {
        return Err(LossError::NonFiniteInput(z));
    }
    Ok(&p.x * (spec.dloss(z) * p.y))
}

/// Per-point Hessian contribution `phi''(y x' theta) * x x'`.
pub fn point_hessian(
    spec: LossSpec,
    theta: &DVector<f64>,
    p: &LabeledPoint,
) -> Result<DMatrix<f64>, LossError> {
    spec.validate()?;
    if theta.len() != p.x.len() {
        return Err(LossError::DimensionMismatch {
            theta: theta.len(),
            point: p.x.len(),
        });
    }
    let z = p.y * p.x.dot(theta);
    if !z.is_finite() {
        return Err(LossError::NonFiniteInput(z));
    }
    let c = spec.ddloss(z);
    let d = p.x.len();
    let mut h = DMatrix::zeros(d, d);
    h.ger(c, &p.x, &p.x, 0.0);
    Ok(h)
}

// ======================================================================
// tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn all_specs() -> Vec<LossSpec> {
        vec![
            LossSpec::Logistic,
            LossSpec::SquaredHinge,
            LossSpec::dwd(0.5).unwrap(),
            LossSpec::dwd(2.0).unwrap(),
        ]
    }

    /// Interior kink locations to avoid in finite-difference sweeps.
    fn kinks(spec: LossSpec) -> Vec<f64> {
        match spec {
            LossSpec::Logistic => vec![],
            LossSpec::SquaredHinge => vec![1.0],
            LossSpec::Dwd { gamma } => vec![gamma],
        }
    }

    #[test]
    fn pinned_values() {
        let lg = LossSpec::Logistic;
        assert_relative_eq!(eval_loss(lg, 0.0).unwrap(), 2f64.ln(), max_relative = 1e-15);
        assert_eq!(eval_dloss(lg, 0.0).unwrap(), -0.5);
        assert_eq!(eval_ddloss(lg, 0.0).unwrap(), 0.25);

        let sh = LossSpec::SquaredHinge;
        assert_eq!(eval_loss(sh, 0.5).unwrap(), 0.25);
        assert_eq!(eval_loss(sh, 2.0).unwrap(), 0.0);
        assert_eq!(eval_dloss(sh, 0.5).unwrap(), -1.0);
        assert_eq!(eval_dloss(sh, 1.0).unwrap(), 0.0);
        assert_eq!(eval_dloss(sh, 2.0).unwrap(), 0.0);
        assert_eq!(eval_ddloss(sh, 0.5).unwrap(), 2.0);
        assert_eq!(eval_ddloss(sh, 1.0).unwrap(), 0.0, "right-continuous at the kink");

        let dwd = LossSpec::dwd(0.5).unwrap();
        assert_eq!(eval_loss(dwd, 1.0).unwrap(), 1.0);
        assert_eq!(eval_loss(dwd, 0.5).unwrap(), 2.0);
        assert_eq!(eval_loss(dwd, 0.0).unwrap(), 4.0);
        assert_eq!(eval_dloss(dwd, 0.0).unwrap(), -4.0);
        assert_eq!(eval_dloss(dwd, 0.5).unwrap(), -4.0, "branches agree at the kink");
        assert_eq!(eval_ddloss(dwd, 1.0).unwrap(), 2.0);
        assert_eq!(eval_ddloss(dwd, 0.5).unwrap(), 16.0, "right branch at the kink");
        assert_eq!(eval_ddloss(dwd, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            eval_loss(LossSpec::Logistic, f64::NAN),
            Err(LossError::NonFiniteInput(_))
        ));
        assert!(matches!(
            eval_loss(LossSpec::Logistic, f64::INFINITY),
            Err(LossError::NonFiniteInput(_))
        ));
        assert!(matches!(LossSpec::dwd(0.0), Err(LossError::BadGamma(_))));
        assert!(matches!(LossSpec::dwd(-1.0), Err(LossError::BadGamma(_))));
        assert!(matches!(
            eval_dloss(LossSpec::Dwd { gamma: -1.0 }, 0.3),
            Err(LossError::BadGamma(_))
        ));
    }

    /// Central finite differences of phi match dloss, and of dloss match
    /// ddloss, on a 1000-point grid clear of the kinks.
    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for spec in all_specs() {
            let kk = kinks(spec);
            for i in 0..1000 {
                let z = -10.0 + 20.0 * (i as f64 + 0.5) / 1000.0;
                if kk.iter().any(|k| (z - k).abs() < 10.0 * h) {
                    continue;
                }
                let fd1 = (spec.loss(z + h) - spec.loss(z - h)) / (2.0 * h);
                let d1 = spec.dloss(z);
                assert!(
                    (fd1 - d1).abs() <= 1e-6 * d1.abs().max(1.0),
                    "{spec:?} dloss at z={z}: fd={fd1} exact={d1}"
                );
                let fd2 = (spec.dloss(z + h) - spec.dloss(z - h)) / (2.0 * h);
                let d2 = spec.ddloss(z);
                assert!(
                    (fd2 - d2).abs() <= 1e-6 * d2.abs().max(1.0),
                    "{spec:?} ddloss at z={z}: fd={fd2} exact={d2}"
                );
            }
        }
    }

    #[test]
    fn logistic_derivative_bounds() {
        // Strict bounds hold for |z| <= 30; past ~36 the sigmoid saturates
        // to the closed endpoints in f64.
        for i in 0..2000 {
            let z = -30.0 + 60.0 * (i as f64 + 0.5) / 2000.0;
            let d = LossSpec::Logistic.dloss(z);
            let dd = LossSpec::Logistic.ddloss(z);
            assert!(d > -1.0 && d < 0.0, "dloss({z}) = {d} out of (-1, 0)");
            assert!(dd > 0.0 && dd <= 0.25, "ddloss({z}) = {dd} out of (0, 1/4]");
        }
        for z in [-700.0, -50.0, 50.0, 700.0] {
            let d = LossSpec::Logistic.dloss(z);
            let dd = LossSpec::Logistic.ddloss(z);
            assert!((-1.0..=0.0).contains(&d), "dloss({z}) = {d}");
            assert!((0.0..=0.25).contains(&dd), "ddloss({z}) = {dd}");
        }
    }

    proptest! {
        /// phi is non-increasing and phi' is non-decreasing (convexity).
        #[test]
        fn monotone_and_convex(a in -300.0f64..300.0, b in -300.0f64..300.0) {
            let (z1, z2) = if a <= b { (a, b) } else { (b, a) };
            for spec in all_specs() {
                prop_assert!(spec.loss(z1) >= spec.loss(z2) - 1e-12);
                prop_assert!(spec.dloss(z1) <= spec.dloss(z2) + 1e-12);
                prop_assert!(spec.ddloss(z1) >= 0.0);
            }
        }
    }

    #[test]
    fn point_score_examples() {
        let theta = DVector::from_vec(vec![0.0, 0.0]);
        let p = LabeledPoint::new(DVector::from_vec(vec![1.0, 2.0]), 1.0).unwrap();
        let s = point_score(LossSpec::Logistic, &theta, &p).unwrap();
        assert_relative_eq!(s[0], -0.5, max_relative = 1e-15);
        assert_relative_eq!(s[1], -1.0, max_relative = 1e-15);

        let theta = DVector::from_vec(vec![2.0, 0.0]);
        let p = LabeledPoint::new(DVector::from_vec(vec![1.0, 0.0]), 1.0).unwrap();
        let s = point_score(LossSpec::dwd(0.5).unwrap(), &theta, &p).unwrap();
        assert_relative_eq!(s[0], -0.25, max_relative = 1e-15);
        assert_eq!(s[1], 0.0);

        let bad = point_score(LossSpec::Logistic, &DVector::zeros(3), &p);
        assert!(matches!(bad, Err(LossError::DimensionMismatch { theta: 3, point: 2 })));
    }

    #[test]
    fn point_hessian_example_and_psd() {
        let theta = DVector::from_vec(vec![0.0, 0.0]);
        let p = LabeledPoint::new(DVector::from_vec(vec![1.0, 1.0]), -1.0).unwrap();
        let h = point_hessian(LossSpec::SquaredHinge, &theta, &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(h[(i, j)], 2.0);
            }
        }

        // PSD across random points for every loss.
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for spec in all_specs() {
            for _ in 0..50 {
                let d = 3;
                let theta = DVector::from_fn(d, |_, _| next());
                let x = DVector::from_fn(d, |_, _| next());
                let y = if next() > 0.0 { 1.0 } else { -1.0 };
                let p = LabeledPoint::new(x, y).unwrap();
                let h = point_hessian(spec, &theta, &p).unwrap();
                let eig = h.symmetric_eigenvalues();
                for e in eig.iter() {
                    assert!(*e >= -1e-12, "{spec:?}: negative eigenvalue {e}");
                }
            }
        }
    }

    /// point_score is the finite-difference gradient of eval_loss in theta.
    #[test]
    fn point_score_matches_gradient() {
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let h = 1e-6;
        for spec in all_specs() {
            for _ in 0..100 {
                let d = 4;
                let theta = DVector::from_fn(d, |_, _| next());
                let x = DVector::from_fn(d, |_, _| 0.5 + next().abs());
                let y = if next() > 0.0 { 1.0 } else { -1.0 };
                let p = LabeledPoint::new(x, y).unwrap();
                let z = p.y * p.x.dot(&theta);
                if kinks(spec).iter().any(|k| (z - k).abs() < 1e-3) {
                    continue;
                }
                let grad = point_score(spec, &theta, &p).unwrap();
                for j in 0..d {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[j] += h;
                    tm[j] -= h;
                    let fd = (spec.loss(p.y * p.x.dot(&tp)) - spec.loss(p.y * p.x.dot(&tm)))
                        / (2.0 * h);
                    assert!(
                        (fd - grad[j]).abs() <= 1e-6 * grad[j].abs().max(1.0),
                        "{spec:?} coord {j}: fd={fd} exact={}",
                        grad[j]
                    );
                }
            }
        }
    }
}
