//! End-to-end acceptance gate: one test per shipped claim, each printing an
//! `ACCEPTANCE <k> PASS` line with the measured quantities (run with
//! `cargo test --test acceptance -- --nocapture` to see them).
//!
//! The tests are CPU-bound Monte Carlo runs with fixed seeds, so results
//! are deterministic per platform; a process-wide lock keeps them serial so
//! the wall-clock assertions stay honest on multicore machines.

use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use mross::bench::{
    run_coverage, run_mse, run_timing, ExperimentConfig, Method, ThresholdPolicy,
};
use mross::data::{CaseSpec, DatasetStream, LabeledPoint};
use mross::estimator::{
    centroid_jacobian, combined_score, rb_region_score, solve_mross, BasisKind, ProjectionBasis,
    RbContext,
};
use mross::loss::{point_hessian, point_score, LossSpec};
use mross::rng::substream;
use mross::sampler::{
    classify_region, estimate_normalizer, inclusion_probability, sampling_weight, scan,
    InclusionRule, Region, RuleKind, ScanSummary,
};
use mross::solver::{fit_pilot, fit_weighted, PilotFit, SolveOptions};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn case_points(case: u8, n: usize, d: usize, seed: u64) -> Vec<LabeledPoint> {
    DatasetStream::from_case(CaseSpec::new(case, n, d, seed).unwrap())
        .unwrap()
        .materialize()
        .unwrap()
}

/// Desk-scale benchmark cell shared by the ordering, coverage, and timing
/// checks; every statistically relevant knob is pinned here.
fn desk_cell(case: u8) -> ExperimentConfig {
    ExperimentConfig {
        case_id: case,
        n: 50_000,
        d: 21,
        r0: 500,
        r_list: vec![2000, 5000],
        s_reps: 200,
        loss: LossSpec::Logistic,
        threshold: ThresholdPolicy::Fixed(6.9),
        methods: vec![Method::Unif, Method::Osmac, Method::Mross],
        seed: 42,
        out: None,
        workers: ExperimentConfig::desk().workers,
    }
}

// ======================================================================
// 1: degenerate equivalence
// ======================================================================

/// With every inclusion probability at 1, no region compression, and the
/// pilot pooled back in, the combined estimate is the full-data fit.
#[test]
fn degenerate_settings_match_the_full_data_fit() {
    let _guard = serial();
    let start = Instant::now();
    // Tight tolerance so the two Newton paths land on the same root well
    // inside the 1e-6 comparison.
    let opts = SolveOptions {
        tol: 1e-10,
        ..SolveOptions::default()
    };
    let losses = [
        LossSpec::Logistic,
        LossSpec::SquaredHinge,
        LossSpec::Dwd { gamma: 1.0 },
    ];
    let cases = [1u8, 2, 4];
    let mut worst = 0.0f64;
    for k in 0..20usize {
        let d = 3 + k % 3;
        let n = 200 + 15 * k;
        let loss = losses[k % 3];
        let case = cases[(k / 3) % 3];
        let points = case_points(case, n, d, 100 + k as u64);
        let r0 = 10 * d + 20;
        let pilot = fit_pilot(loss, points[..r0].to_vec(), &opts).unwrap();
        let scan_points = &points[r0..];
        let rule =
            InclusionRule::new(RuleKind::Uniform, scan_points.len(), f64::INFINITY).unwrap();
        let normalizer =
            estimate_normalizer(&pilot, &rule, loss, scan_points.len() as u64).unwrap();
        let basis = ProjectionBasis::new(BasisKind::PilotScore, pilot.theta_pilot.clone(), loss);
        let mut rng = substream(700, "degenerate", k as u64);
        let summary = scan(
            scan_points.iter().cloned().map(Ok),
            &pilot,
            &rule,
            loss,
            &basis,
            normalizer,
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            summary.realized_r as usize,
            scan_points.len(),
            "dataset {k}: a unit-probability scan must keep every point"
        );
        let est = solve_mross(&pilot, &summary, &basis, 0.95, &opts).unwrap();
        let full = fit_weighted(loss, &points, &vec![1.0; n], None, &opts).unwrap();
        assert!(est.report.converged && full.converged, "dataset {k} did not converge");
        let gap = (&est.theta - &full.theta).amax();
        assert!(
            gap <= 1e-6,
            "dataset {k} (case {case}, d {d}, {loss:?}): sup-norm gap {gap:.3e}"
        );
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE 1 PASS: 20 degenerate runs match the full-data fit, \
         worst sup-norm gap {worst:.2e} ({elapsed:.2?})"
    );
}

// ======================================================================
// 2: IPW unbiasedness
// ======================================================================

/// Fixed 200-point dataset reused by the score-level checks.
fn fixed_dataset() -> (Vec<LabeledPoint>, PilotFit, InclusionRule, f64, ProjectionBasis) {
    let loss = LossSpec::Logistic;
    let opts = SolveOptions::default();
    let points = case_points(1, 200, 4, 501);
    let pilot = fit_pilot(loss, points.clone(), &opts).unwrap();
    let rule = InclusionRule::new(RuleKind::LOpt, 80, 0.8).unwrap();
    // Exact normalizer: the weight total of the dataset being rescanned.
    let normalizer: f64 = points
        .iter()
        .filter(|p| classify_region(&pilot, rule.threshold_c, p) == Region::Sample)
        .map(|p| sampling_weight(&rule, loss, &pilot, p).unwrap())
        .sum();
    let basis = ProjectionBasis::new(BasisKind::PilotScore, pilot.theta_pilot.clone(), loss);
    (points, pilot, rule, normalizer, basis)
}

fn rescan(
    points: &[LabeledPoint],
    pilot: &PilotFit,
    rule: &InclusionRule,
    basis: &ProjectionBasis,
    normalizer: f64,
    role: &str,
    k: u64,
) -> ScanSummary {
    let mut rng = substream(502, role, k);
    scan(
        points.iter().cloned().map(Ok),
        pilot,
        rule,
        LossSpec::Logistic,
        basis,
        normalizer,
        &mut rng,
    )
    .unwrap()
}

/// The inverse-probability-weighted subsample score is conditionally
/// unbiased for the full-data sampling-region score.
#[test]
fn subsample_scores_center_on_the_full_region_score() {
    let _guard = serial();
    let start = Instant::now();
    let loss = LossSpec::Logistic;
    let (points, pilot, rule, normalizer, basis) = fixed_dataset();
    let n = points.len() as f64;
    let d = pilot.dim();
    let theta = &pilot.theta_pilot;

    let mut target = DVector::zeros(d);
    for p in &points {
        if classify_region(&pilot, rule.threshold_c, p) == Region::Sample {
            target += point_score(loss, theta, p).unwrap() / n;
        }
    }

    let reps = 10_000usize;
    let mut mean = DVector::zeros(d);
    for k in 0..reps {
        let summary = rescan(&points, &pilot, &rule, &basis, normalizer, "ipw-scan", k as u64);
        for (p, pi) in &summary.subsample {
            mean += point_score(loss, theta, p).unwrap() / (n * pi);
        }
    }
    mean /= reps as f64;

    let rel = (&mean - &target).norm() / target.norm();
    assert!(rel <= 0.02, "relative error {rel:.4} over {reps} scans");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE 2 PASS: subsample score centers on the region score, \
         relative error {rel:.4} over {reps} scans ({elapsed:.2?})"
    );
}

// ======================================================================
// 3: correction variance reduction
// ======================================================================

/// On fixed data and probabilities, the summary-corrected subsample score
/// has at least 10% less Monte Carlo trace-covariance than plain
/// inverse-probability weighting.
#[test]
fn corrected_scores_have_smaller_variance() {
    let _guard = serial();
    let start = Instant::now();
    let loss = LossSpec::Logistic;
    let (points, pilot, rule, normalizer, basis) = fixed_dataset();
    let n = points.len() as f64;
    let d = pilot.dim();
    let theta = pilot.theta_pilot.clone();

    let reps = 2000usize;
    let mut sums = [DVector::zeros(d), DVector::zeros(d)];
    let mut sq = [DVector::zeros(d), DVector::zeros(d)];
    for k in 0..reps {
        let summary = rescan(&points, &pilot, &rule, &basis, normalizer, "rb-scan", k as u64);
        let corrected = rb_region_score(&theta, &summary, &basis);
        let mut plain = DVector::zeros(d);
        for (p, pi) in &summary.subsample {
            plain += point_score(loss, &theta, p).unwrap() / (n * pi);
        }
        for (slot, score) in [corrected, plain].into_iter().enumerate() {
            sums[slot] += &score;
            sq[slot] += score.component_mul(&score);
        }
    }
    let trace_cov = |slot: usize| -> f64 {
        (0..d)
            .map(|j| sq[slot][j] / reps as f64 - (sums[slot][j] / reps as f64).powi(2))
            .sum()
    };
    let (corrected_var, plain_var) = (trace_cov(0), trace_cov(1));
    assert!(
        corrected_var <= 0.9 * plain_var,
        "trace-covariance {corrected_var:.3e} vs plain {plain_var:.3e}"
    );
    let reduction = 100.0 * (1.0 - corrected_var / plain_var);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE 3 PASS: corrected score trace-covariance {corrected_var:.2e} vs plain \
         {plain_var:.2e} ({reduction:.1}% reduction) over {reps} scans ({elapsed:.2?})"
    );
}

// ======================================================================
// 4: MSE ordering
// ======================================================================

/// At benchmark scale the subsampling methods order as claimed, with the
/// combined estimator well ahead of plain optimal weighting.
#[test]
fn mse_orders_methods_at_benchmark_scale() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst_ratio = 0.0f64;
    for case in [1u8, 4] {
        let cfg = desk_cell(case);
        let rows = run_mse(&cfg).unwrap();
        for &r in &cfg.r_list {
            let get = |m: Method| rows.iter().find(|row| row.method == m && row.r == r).unwrap();
            let (u, o, c) = (get(Method::Unif), get(Method::Osmac), get(Method::Mross));
            assert_eq!(
                u.failures + o.failures + c.failures,
                0,
                "case {case} r {r}: non-converged replications"
            );
            assert!(
                c.mse < o.mse && o.mse < u.mse,
                "case {case} r {r}: mse {} (combined) vs {} (weighted) vs {} (uniform)",
                c.mse,
                o.mse,
                u.mse
            );
            let ratio = c.mse / o.mse;
            assert!(ratio <= 0.6, "case {case} r {r}: mse ratio {ratio:.3} > 0.6");
            worst_ratio = worst_ratio.max(ratio);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30 * 60), "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE 4 PASS: mse(mross) < mse(osmac) < mse(unif) on cases 1 and 4 \
         at r in {{2000, 5000}}, worst mross/osmac ratio {worst_ratio:.2} ({elapsed:.2?})"
    );
}

// ======================================================================
// 5: coverage
// ======================================================================

/// 95% intervals cover the reference parameter at the nominal rate for all
/// three methods, and the interval lengths order the methods.
#[test]
fn intervals_cover_at_the_nominal_rate() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        r_list: vec![2000],
        s_reps: 500,
        ..desk_cell(1)
    };
    let rows = run_coverage(&cfg, 0.95, &[0, 1]).unwrap();
    let mut cp_lo = 1.0f64;
    let mut cp_hi = 0.0f64;
    for row in &rows {
        assert_eq!(row.failures, 0, "{} coord {}: non-converged replications", row.method, row.coord);
        assert!(
            row.cp >= 0.92 && row.cp <= 0.98,
            "{} coord {}: coverage {:.3} outside [0.92, 0.98]",
            row.method,
            row.coord,
            row.cp
        );
        cp_lo = cp_lo.min(row.cp);
        cp_hi = cp_hi.max(row.cp);
    }
    let length = |m: Method, coord: usize| {
        rows.iter()
            .find(|row| row.method == m && row.coord == coord)
            .unwrap()
            .mean_length
    };
    for coord in [0usize, 1] {
        let (c, o, u) = (
            length(Method::Mross, coord),
            length(Method::Osmac, coord),
            length(Method::Unif, coord),
        );
        assert!(
            c < o && o < u,
            "coord {coord}: lengths {c:.3} (combined) vs {o:.3} (weighted) vs {u:.3} (uniform)"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(45 * 60), "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE 5 PASS: coverage in [{cp_lo:.3}, {cp_hi:.3}] across methods and coords, \
         lengths {:.3} < {:.3} < {:.3} at r = 2000 ({elapsed:.2?})",
        length(Method::Mross, 0),
        length(Method::Osmac, 0),
        length(Method::Unif, 0)
    );
}

// ======================================================================
// 6: interval length rate
// ======================================================================

/// Interval lengths decay like r^{-1/2} across the budget range when the
/// budget stays small relative to the stream (the regime the sampling
/// variance dominates).
#[test]
fn interval_lengths_shrink_at_the_root_r_rate() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        case_id: 1,
        n: 2_000_000,
        d: 21,
        r0: 1000,
        r_list: vec![2000, 3000, 4000, 5000],
        s_reps: 50,
        loss: LossSpec::Logistic,
        threshold: ThresholdPolicy::Fixed(6.9),
        methods: vec![Method::Mross],
        seed: 42,
        out: None,
        // One dataset in memory at a time; the replicates are cheap
        // relative to the data passes anyway.
        workers: 1,
    };
    let coords: Vec<usize> = (0..cfg.d).collect();
    let rows = run_coverage(&cfg, 0.95, &coords).unwrap();

    // One length scale per budget: the mean interval length across all
    // coordinates.
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &r in &cfg.r_list {
        let cell: Vec<f64> = rows
            .iter()
            .filter(|row| row.r == r)
            .map(|row| {
                assert_eq!(row.failures, 0, "r {r}: non-converged replications");
                row.mean_length
            })
            .collect();
        assert_eq!(cell.len(), cfg.d);
        let mean = cell.iter().sum::<f64>() / cell.len() as f64;
        xs.push((r as f64).ln());
        ys.push(mean.ln());
    }
    let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
    let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let slope = sxy / sxx;
    assert!(
        (-0.6..=-0.4).contains(&slope),
        "log-log slope {slope:.3} outside -0.5 +/- 0.1"
    );
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE 6 PASS: interval lengths decay with log-log slope {slope:.3} \
         across r in {{2000..5000}} ({elapsed:.2?})"
    );
}

// ======================================================================
// 7: overhead
// ======================================================================

/// The combined pipeline costs at most 15% more wall time per fit than
/// plain optimal weighting at matched budgets.  Timed at full stream size,
/// where the shared one-pass scan is the dominant cost for both methods
/// (at toy sizes the per-fit fixed costs would swamp the comparison), on
/// the shifted-mean stream whose compression economics are what the
/// combined method is built for: the extra per-point summary work in the
/// sampling region is paid back by the points it retires into centroids.
#[test]
fn scan_overhead_stays_within_budget() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        n: 2_000_000,
        s_reps: 100,
        methods: vec![Method::Osmac, Method::Mross],
        // Sequential replicates so the timings do not contend.
        workers: 1,
        ..desk_cell(2)
    };
    let rows = run_timing(&cfg).unwrap();
    let mut ratios = Vec::new();
    for &r in &cfg.r_list {
        let get = |m: Method| rows.iter().find(|row| row.method == m && row.r == r).unwrap();
        let (o, c) = (get(Method::Osmac), get(Method::Mross));
        assert_eq!(o.failures + c.failures, 0, "r {r}: non-converged replications");
        let ratio = c.mean_s / o.mean_s;
        assert!(
            ratio <= 1.15,
            "r {r}: combined {:.4}s vs weighted {:.4}s per fit (ratio {ratio:.3})",
            c.mean_s,
            o.mean_s
        );
        ratios.push(ratio);
    }
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE 7 PASS: end-to-end time ratios {:.2} (r = 2000) and {:.2} (r = 5000) \
         stay within 1.15x of plain weighting over 100 timed fits ({elapsed:.2?})",
        ratios[0], ratios[1]
    );
}

// ======================================================================
// 8: numerical hygiene
// ======================================================================

/// Derivative, convexity, streaming-equality, partition, and
/// scale-invariance properties, exercised through the public interfaces.
#[test]
fn numerical_hygiene_holds() {
    let _guard = serial();
    let start = Instant::now();
    let opts = SolveOptions::default();

    // --- loss derivatives, convexity, monotonicity ------------------
    let losses = [
        LossSpec::Logistic,
        LossSpec::SquaredHinge,
        LossSpec::Dwd { gamma: 1.0 },
    ];
    let h = 1e-5;
    // Grid offset so the squared-hinge/DWD kink at z = 1 is never hit.
    let mut z = -3.05;
    while z <= 3.05 {
        for loss in losses {
            let (l, dl, ddl) = (loss.loss(z), loss.dloss(z), loss.ddloss(z));
            assert!(l >= 0.0, "{loss:?} at {z}: negative loss {l}");
            assert!(dl <= 0.0, "{loss:?} at {z}: non-decreasing ({dl})");
            assert!(ddl >= 0.0, "{loss:?} at {z}: non-convex ({ddl})");
            let fd1 = (loss.loss(z + h) - loss.loss(z - h)) / (2.0 * h);
            assert!(
                (fd1 - dl).abs() <= 1e-6 * (1.0 + dl.abs()),
                "{loss:?} at {z}: dloss {dl} vs finite difference {fd1}"
            );
            let fd2 = (loss.dloss(z + h) - loss.dloss(z - h)) / (2.0 * h);
            assert!(
                (fd2 - ddl).abs() <= 1e-6 * (1.0 + ddl.abs()),
                "{loss:?} at {z}: ddloss {ddl} vs finite difference {fd2}"
            );
        }
        z += 0.4;
    }

    // --- combined-equation Jacobian vs finite differences ------------
    // Assembled from the public pieces: pilot curvature, centroid
    // Jacobian, bracket-weighted subsample curvature.
    for (which, loss) in [LossSpec::Logistic, LossSpec::Dwd { gamma: 1.0 }]
        .into_iter()
        .enumerate()
    {
        let d = 5;
        let points = case_points(1, 4000, d, 811);
        let pilot = fit_pilot(loss, points[..60].to_vec(), &opts).unwrap();
        let basis = ProjectionBasis::new(BasisKind::PilotScore, pilot.theta_pilot.clone(), loss);
        let rule = InclusionRule::new(RuleKind::LOpt, 300, 1.2).unwrap();
        let scan_points = &points[60..];
        let normalizer =
            estimate_normalizer(&pilot, &rule, loss, scan_points.len() as u64).unwrap();
        let mut rng = substream(812, "hygiene-scan", which as u64);
        let summary = scan(
            scan_points.iter().cloned().map(Ok),
            &pilot,
            &rule,
            loss,
            &basis,
            normalizer,
            &mut rng,
        )
        .unwrap();
        let ctx = RbContext::new(&summary, &basis);
        let theta = &pilot.theta_pilot
            + DVector::from_fn(d, |i, _| 0.05 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 });

        let n = summary.n_total as f64;
        let pooled = n + pilot.r0() as f64;
        let mut jac = DMatrix::zeros(d, d);
        for p in &pilot.pilot_points {
            jac += point_hessian(loss, &theta, p).unwrap();
        }
        jac /= pooled;
        jac += centroid_jacobian(&theta, &summary, loss) * (n / pooled);
        for ((p, pi), b) in summary.subsample.iter().zip(&ctx.brackets) {
            let zz = p.y * p.x.dot(&theta);
            jac.ger(b * loss.ddloss(zz) / (n * pi) * (n / pooled), &p.x, &p.x, 1.0);
        }

        let mut fd = DMatrix::zeros(d, d);
        for j in 0..d {
            let step = 1e-6 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            tp[j] += step;
            let mut tm = theta.clone();
            tm[j] -= step;
            let diff = (combined_score(&tp, &pilot, &summary, &basis)
                - combined_score(&tm, &pilot, &summary, &basis))
                / (2.0 * step);
            fd.set_column(j, &diff);
        }
        let rel = (&jac - &fd).norm() / jac.norm();
        assert!(rel <= 1e-5, "{loss:?}: Jacobian mismatch {rel:.2e}");
    }

    // --- streaming summaries equal batch recomputation, partition ----
    let loss = LossSpec::Logistic;
    let d = 5;
    let points = case_points(1, 5000, d, 821);
    let pilot = fit_pilot(loss, points[..60].to_vec(), &opts).unwrap();
    let basis = ProjectionBasis::new(BasisKind::PilotScore, pilot.theta_pilot.clone(), loss);
    let rule = InclusionRule::new(RuleKind::LOpt, 200, 1.2).unwrap();
    let scan_points = &points[60..];
    let normalizer = estimate_normalizer(&pilot, &rule, loss, scan_points.len() as u64).unwrap();
    let mut rng = substream(822, "hygiene-stream", 0);
    let summary = scan(
        scan_points.iter().cloned().map(Ok),
        &pilot,
        &rule,
        loss,
        &basis,
        normalizer,
        &mut rng,
    )
    .unwrap();

    let (mut n_plus, mut n_minus, mut n_s) = (0u64, 0u64, 0u64);
    let mut sum_plus = DVector::zeros(d);
    let mut sum_minus = DVector::zeros(d);
    let mut g_sum = DVector::zeros(basis.dim());
    for p in scan_points {
        match classify_region(&pilot, rule.threshold_c, p) {
            Region::Plus => {
                n_plus += 1;
                sum_plus += &p.x;
            }
            Region::Minus => {
                n_minus += 1;
                sum_minus += &p.x;
            }
            Region::Sample => {
                n_s += 1;
                g_sum += basis.g_features(p);
            }
        }
    }
    assert_eq!(
        summary.n_plus + summary.n_minus + summary.n_s,
        summary.n_total,
        "region counts must partition the scan"
    );
    assert_eq!(summary.n_total as usize, scan_points.len());
    assert_eq!((summary.n_plus, summary.n_minus, summary.n_s), (n_plus, n_minus, n_s));
    assert!(
        n_plus > 50 && n_minus > 50,
        "partition check is vacuous without compressed points ({n_plus}, {n_minus})"
    );
    let rel_gap = |streamed: &DVector<f64>, batch: &DVector<f64>| {
        (streamed - batch).norm() / batch.norm()
    };
    assert!(rel_gap(&summary.xbar_plus, &(&sum_plus / n_plus as f64)) <= 1e-12);
    assert!(rel_gap(&summary.xbar_minus, &(&sum_minus / n_minus as f64)) <= 1e-12);
    assert!(rel_gap(&summary.gbar, &(&g_sum / n_s as f64)) <= 1e-12);

    // --- scale invariance of inclusion probabilities ------------------
    let rule_s = InclusionRule::new(RuleKind::LOpt, 100, 1.2).unwrap();
    for (w, norm) in [(0.3, 40.0), (1.7, 40.0), (4.0, 13.0), (1e-3, 2.5)] {
        for c in [1e-3, 1.0, 137.0] {
            let a = inclusion_probability(&rule_s, w, norm);
            let b = inclusion_probability(&rule_s, c * w, c * norm);
            assert!(
                (a - b).abs() <= 1e-12 * a.max(b),
                "pi({w}, {norm}) = {a} changed to {b} under joint scale {c}"
            );
        }
    }

    // --- affine weight invariance of the weighted fit ----------------
    let pts = case_points(2, 300, 4, 831);
    let w: Vec<f64> = (0..pts.len()).map(|i| 0.2 + ((i * 37) % 11) as f64).collect();
    let w_scaled: Vec<f64> = w.iter().map(|v| v * 17.5).collect();
    let base = fit_weighted(loss, &pts, &w, None, &opts).unwrap();
    let scaled = fit_weighted(loss, &pts, &w_scaled, None, &opts).unwrap();
    let gap = (&base.theta - &scaled.theta).amax();
    assert!(gap <= 1e-10, "weight scaling moved the root by {gap:.2e}");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5 * 60), "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE 8 PASS: derivative, convexity, streaming-equality, partition, \
         and scale-invariance checks hold ({elapsed:.2?})"
    );
}
