//! Simulation harness: mean-squared-error curves, coverage tables, and
//! timing tables over the synthetic cases, with deterministic seeding and
//! CSV output. The command-line binary is a thin wrapper over this module.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rayon::ThreadPoolBuilder;
use thiserror::Error;

use crate::baselines::{osmac_fit_detailed, unif_fit_detailed, BaselineError};
use crate::data::{reference_theta, CaseSpec, DataError, DatasetStream};
use crate::estimator::{
    confidence_intervals, plugin_variance, solve_mross, BasisKind, EstimatorError, MrossEstimate,
    ProjectionBasis,
};
use crate::loss::LossSpec;
use crate::rng::{derive_seed, substream};
use crate::sampler::{
    estimate_normalizer, scan, truncation_from_pilot, InclusionRule, RuleKind, SamplerError,
};
use crate::solver::{fit_pilot, PilotFit, SolveError, SolveOptions};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for config key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ======================================================================
// threshold policies
// ======================================================================

/// Rule for picking the margin threshold that separates summarized
/// points from sampled ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// Use the given constant.
    Fixed(f64),
    /// Pick the margin at which the pilot model's class probability
    /// reaches the given level (e.g. 0.99), mapped through the loss's
    /// link; points beyond it are summarized.
    EtaLevel(f64),
    /// Conservative slow-growth rule `kappa * (ln r0 - ln ln r0)` with
    /// `kappa` in (0, 1/2].
    LogOrder { kappa: f64 },
    /// Conservative polynomial rule `kappa * r0^(1/4 - exponent)` with
    /// `kappa > 0` and `exponent` in (0, 1/4).
    PowerOrder { kappa: f64, exponent: f64 },
    /// No summarization: every point is eligible for sampling.
    Infinite,
}

impl ThresholdPolicy {
    /// Resolve the policy into a concrete threshold for a pilot of size
    /// `r0` under the given loss.
    pub fn threshold(&self, loss: LossSpec, r0: usize) -> Result<f64, BenchError> {
        let bad = |msg: String| BenchError::BadValue {
            key: "threshold".into(),
            msg,
        };
        match *self {
            ThresholdPolicy::Fixed(c) => {
                if c > 0.0 {
                    Ok(c)
                } else {
                    Err(bad(format!("fixed threshold must be positive, got {c}")))
                }
            }
            ThresholdPolicy::EtaLevel(level) => {
                if !(level > 0.5 && level < 1.0) {
                    return Err(bad(format!(
                        "eta level must lie in (0.5, 1), got {level}"
                    )));
                }
                let odds = level / (1.0 - level);
                let c = match loss {
                    LossSpec::Logistic => odds.ln(),
                    LossSpec::SquaredHinge => 2.0 * level - 1.0,
                    LossSpec::Dwd { gamma } => gamma * odds.sqrt(),
                };
                Ok(c)
            }
            ThresholdPolicy::LogOrder { kappa } => {
                if !(kappa > 0.0 && kappa <= 0.5) {
                    return Err(bad(format!("log-order kappa must lie in (0, 1/2], got {kappa}")));
                }
                let r0 = r0 as f64;
                let c = kappa * (r0.ln() - r0.ln().ln());
                if c.is_finite() && c > 0.0 {
                    Ok(c)
                } else {
                    Err(bad(format!("log-order rule needs a larger pilot, got r0 = {r0}")))
                }
            }
            ThresholdPolicy::PowerOrder { kappa, exponent } => {
                if !(kappa > 0.0 && kappa.is_finite()) {
                    return Err(bad(format!("power-order kappa must be positive, got {kappa}")));
                }
                if !(exponent > 0.0 && exponent < 0.25) {
                    return Err(bad(format!(
                        "power-order exponent must lie in (0, 1/4), got {exponent}"
                    )));
                }
                Ok(kappa * (r0 as f64).powf(0.25 - exponent))
            }
            ThresholdPolicy::Infinite => Ok(f64::INFINITY),
        }
    }
}

// ======================================================================
// configuration
// ======================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Unif,
    Osmac,
    Mross,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Unif => "unif",
            Method::Osmac => "osmac",
            Method::Mross => "mross",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub case_id: u8,
    pub n: usize,
    pub d: usize,
    pub r0: usize,
    pub r_list: Vec<usize>,
    /// Replications per (method, r) cell.
    pub s_reps: usize,
    pub loss: LossSpec,
    pub threshold: ThresholdPolicy,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: usize,
}

impl ExperimentConfig {
    /// CI-friendly scale: small enough to rerun casually, large enough
    /// for the method ordering to be visible.  Keeps the full-size run's
    /// fixed threshold so the two profiles differ only in size.
    pub fn desk() -> Self {
        ExperimentConfig {
            case_id: 1,
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
            workers: default_workers(),
        }
    }

    /// Full-size protocol; slow, for offline reproduction runs.
    pub fn paper() -> Self {
        ExperimentConfig {
            n: 500_000,
            r0: 1000,
            r_list: vec![2000, 3000, 4000, 5000],
            s_reps: 500,
            threshold: ThresholdPolicy::Fixed(6.9),
            ..ExperimentConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        // Case/dimension/size constraints are owned by the generator.
        CaseSpec::new(self.case_id, self.n, self.d, self.seed)?;
        if self.r_list.is_empty() {
            return Err(BenchError::Config("r_list must be nonempty".into()));
        }
        if self.r_list.iter().any(|&r| r == 0) {
            return Err(BenchError::Config("every r must be at least 1".into()));
        }
        if self.r0 == 0 {
            return Err(BenchError::Config("r0 must be at least 1".into()));
        }
        let max_r = *self.r_list.iter().max().expect("nonempty");
        if self.r0 + max_r >= self.n {
            return Err(BenchError::Config(format!(
                "r0 + max(r_list) = {} must be smaller than n = {}",
                self.r0 + max_r,
                self.n
            )));
        }
        if self.methods.is_empty() {
            return Err(BenchError::Config("methods must be nonempty".into()));
        }
        if self.workers == 0 {
            return Err(BenchError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |p| p.get())
}

/// Parse a flat `key = value` config text over the given base profile.
/// Unknown keys are errors so typos cannot silently fall back to
/// defaults. `#` starts a comment; later keys override earlier ones.
pub fn parse_config(text: &str, base: ExperimentConfig) -> Result<ExperimentConfig, BenchError> {
    let mut cfg = base;
    let mut loss_kind: Option<String> = None;
    let mut gamma: Option<f64> = None;
    let mut thr_kind: Option<String> = None;
    let mut thr_c: Option<f64> = None;
    let mut thr_level: Option<f64> = None;
    let mut thr_kappa: Option<f64> = None;
    let mut thr_exponent: Option<f64> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            BenchError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "case" => cfg.case_id = parse_num(key, value)?,
            "n" => cfg.n = parse_num(key, value)?,
            "d" => cfg.d = parse_num(key, value)?,
            "r0" => cfg.r0 = parse_num(key, value)?,
            "s" => cfg.s_reps = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "workers" => cfg.workers = parse_num(key, value)?,
            "r_list" => {
                cfg.r_list = value
                    .split(',')
                    .map(|v| parse_num::<usize>(key, v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "methods" => {
                cfg.methods = value
                    .split(',')
                    .map(|v| match v.trim() {
                        "unif" => Ok(Method::Unif),
                        "osmac" => Ok(Method::Osmac),
                        "mross" => Ok(Method::Mross),
                        other => Err(BenchError::BadValue {
                            key: key.into(),
                            msg: format!("unknown method `{other}` (expected unif, osmac, mross)"),
                        }),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "loss" => loss_kind = Some(value.to_string()),
            "gamma" => gamma = Some(parse_num(key, value)?),
            "threshold" => thr_kind = Some(value.to_string()),
            "threshold_c" => thr_c = Some(parse_num(key, value)?),
            "threshold_level" => thr_level = Some(parse_num(key, value)?),
            "threshold_kappa" => thr_kappa = Some(parse_num(key, value)?),
            "threshold_exponent" => thr_exponent = Some(parse_num(key, value)?),
            "out" => cfg.out = Some(PathBuf::from(value)),
            other => return Err(BenchError::UnknownKey(other.to_string())),
        }
    }

    match loss_kind.as_deref() {
        None => {
            if let Some(g) = gamma {
                match cfg.loss {
                    LossSpec::Dwd { .. } => cfg.loss = LossSpec::Dwd { gamma: g },
                    _ => {
                        return Err(BenchError::BadValue {
                            key: "gamma".into(),
                            msg: "only meaningful for loss = dwd".into(),
                        })
                    }
                }
            }
        }
        Some("logistic") => {
            reject_gamma(gamma)?;
            cfg.loss = LossSpec::Logistic;
        }
        Some("squared_hinge") => {
            reject_gamma(gamma)?;
            cfg.loss = LossSpec::SquaredHinge;
        }
        Some("dwd") => {
            cfg.loss = LossSpec::Dwd {
                gamma: gamma.unwrap_or(0.5),
            };
        }
        Some(other) => {
            return Err(BenchError::BadValue {
                key: "loss".into(),
                msg: format!("unknown loss `{other}` (expected logistic, squared_hinge, dwd)"),
            })
        }
    }

    let inferred = thr_kind.or_else(|| thr_c.map(|_| "fixed".to_string()));
    match inferred.as_deref() {
        None => {
            if let Some(level) = thr_level {
                cfg.threshold = ThresholdPolicy::EtaLevel(level);
            }
        }
        Some("fixed") => {
            let c = thr_c.ok_or_else(|| BenchError::BadValue {
                key: "threshold_c".into(),
                msg: "required when threshold = fixed".into(),
            })?;
            cfg.threshold = ThresholdPolicy::Fixed(c);
        }
        Some("eta") => cfg.threshold = ThresholdPolicy::EtaLevel(thr_level.unwrap_or(0.99)),
        Some("log_order") => {
            cfg.threshold = ThresholdPolicy::LogOrder {
                kappa: thr_kappa.unwrap_or(0.5),
            }
        }
        Some("power_order") => {
            cfg.threshold = ThresholdPolicy::PowerOrder {
                kappa: thr_kappa.unwrap_or(1.0),
                exponent: thr_exponent.unwrap_or(0.1),
            }
        }
        Some("infinite") => cfg.threshold = ThresholdPolicy::Infinite,
        Some(other) => {
            return Err(BenchError::BadValue {
                key: "threshold".into(),
                msg: format!(
                    "unknown policy `{other}` (expected fixed, eta, log_order, power_order, infinite)"
                ),
            })
        }
    }

    Ok(cfg)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, BenchError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| BenchError::BadValue {
        key: key.to_string(),
        msg: format!("`{value}`: {e}"),
    })
}

fn reject_gamma(gamma: Option<f64>) -> Result<(), BenchError> {
    if gamma.is_some() {
        return Err(BenchError::BadValue {
            key: "gamma".into(),
            msg: "only meaningful for loss = dwd".into(),
        });
    }
    Ok(())
}

fn loss_tag(loss: LossSpec) -> String {
    match loss {
        LossSpec::Logistic => "logistic".into(),
        LossSpec::SquaredHinge => "squared_hinge".into(),
        LossSpec::Dwd { gamma } => format!("dwd{gamma}"),
    }
}

// ======================================================================
// reference parameter cache
// ======================================================================

static REF_CACHE: OnceLock<Mutex<HashMap<String, DVector<f64>>>> = OnceLock::new();

fn reference_key(cfg: &ExperimentConfig) -> String {
    format!(
        "case{}-d{}-n{}-seed{}-{}",
        cfg.case_id,
        cfg.d,
        cfg.n,
        cfg.seed,
        loss_tag(cfg.loss)
    )
}

fn sidecar_path(cfg: &ExperimentConfig) -> Option<PathBuf> {
    let out = cfg.out.as_ref()?;
    let dir = out.parent().unwrap_or_else(|| Path::new("."));
    Some(dir.join(format!("theta-ref-{}.csv", reference_key(cfg))))
}

/// Reference parameter for MSE/coverage, from a large independent fit.
/// Cached on disk beside the output file (when one is configured) and in
/// memory, keyed by everything the value depends on.
fn reference_for(cfg: &ExperimentConfig) -> Result<DVector<f64>, BenchError> {
    let key = reference_key(cfg);
    if let Some(path) = sidecar_path(cfg) {
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let vals: Result<Vec<f64>, _> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.trim().parse::<f64>())
                .collect();
            match vals {
                Ok(v) if v.len() == cfg.d => return Ok(DVector::from_vec(v)),
                _ => {
                    return Err(BenchError::Config(format!(
                        "reference cache {} is corrupt; delete it and rerun",
                        path.display()
                    )))
                }
            }
        }
    }
    let cache = REF_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(theta) = cache.lock().expect("cache lock").get(&key) {
        return Ok(theta.clone());
    }
    let spec = CaseSpec::new(cfg.case_id, cfg.n, cfg.d, cfg.seed)?;
    let theta = reference_theta(&spec, cfg.loss)?;
    if let Some(path) = sidecar_path(cfg) {
        let mut text = String::new();
        for v in theta.iter() {
            text.push_str(&format!("{v}\n"));
        }
        fs::write(&path, text)?;
    }
    cache.lock().expect("cache lock").insert(key, theta.clone());
    Ok(theta)
}

// ======================================================================
// replication engine
// ======================================================================

#[derive(Debug, Clone)]
struct RepOutcome {
    failed: bool,
    mse_contrib: f64,
    wall_time_s: f64,
    covered: Vec<bool>,
    lengths: Vec<f64>,
}

/// One seeded end-to-end fit. Data generation happens before the timer;
/// the timed section covers pilot fitting, the scan, the solve, and the
/// variance plug-in, symmetrically across methods.
fn run_replicate(
    cfg: &ExperimentConfig,
    threshold_c: f64,
    level: f64,
    method: Method,
    r: usize,
    rep: u64,
) -> Result<(DVector<f64>, Vec<(f64, f64)>, f64), BenchError> {
    let role = |stage: &str| format!("{}-r{}-{}", method.name(), r, stage);
    let data_seed = derive_seed(cfg.seed, &role("data"), rep);
    let spec = CaseSpec::new(cfg.case_id, cfg.n, cfg.d, data_seed)?;
    let points = DatasetStream::from_case(spec)?.materialize()?;
    let mut rng = substream(cfg.seed, &role("scan"), rep);
    let opts = SolveOptions::default();

    let start = Instant::now();
    let (theta, intervals) = match method {
        Method::Unif => {
            let (est, summary) = unif_fit_detailed(
                points.iter().cloned().map(Ok),
                cfg.d,
                cfg.n as u64,
                cfg.r0 + r,
                cfg.loss,
                &mut rng,
            )?;
            let basis = ProjectionBasis::new(BasisKind::ConstantOnly, DVector::zeros(cfg.d), cfg.loss);
            let empty =
                PilotFit::from_parts(DVector::zeros(cfg.d), DMatrix::zeros(cfg.d, cfg.d), vec![])?;
            let cov = plugin_variance(&est.theta, &empty, &summary, &basis)?;
            let intervals = confidence_intervals(&est.theta, &cov, level)?;
            (est.theta, intervals)
        }
        Method::Osmac => {
            let pilot = fit_pilot(cfg.loss, points[..cfg.r0].to_vec(), &opts)?;
            let n_scan = (cfg.n - cfg.r0) as u64;
            let (est, summary) = osmac_fit_detailed(
                points[cfg.r0..].iter().cloned().map(Ok),
                &pilot,
                n_scan,
                r,
                cfg.loss,
                &mut rng,
            )?;
            let basis = ProjectionBasis::new(
                BasisKind::ConstantOnly,
                pilot.theta_pilot.clone(),
                cfg.loss,
            );
            let empty =
                PilotFit::from_parts(DVector::zeros(cfg.d), DMatrix::zeros(cfg.d, cfg.d), vec![])?;
            let cov = plugin_variance(&est.theta, &empty, &summary, &basis)?;
            let intervals = confidence_intervals(&est.theta, &cov, level)?;
            (est.theta, intervals)
        }
        Method::Mross => {
            let pilot = fit_pilot(cfg.loss, points[..cfg.r0].to_vec(), &opts)?;
            let rule = InclusionRule::new(RuleKind::LOpt, r, threshold_c)?;
            let rule = rule.with_truncation(truncation_from_pilot(&pilot, &rule, cfg.loss)?)?;
            let n_scan = (cfg.n - cfg.r0) as u64;
            let normalizer = estimate_normalizer(&pilot, &rule, cfg.loss, n_scan)?;
            let basis =
                ProjectionBasis::new(BasisKind::PilotScore, pilot.theta_pilot.clone(), cfg.loss);
            let summary = scan(
                points[cfg.r0..].iter().cloned().map(Ok),
                &pilot,
                &rule,
                cfg.loss,
                &basis,
                normalizer,
                &mut rng,
            )?;
            let est = solve_mross(&pilot, &summary, &basis, level, &opts)?;
            (est.theta, est.intervals)
        }
    };
    let wall = start.elapsed().as_secs_f64();
    Ok((theta, intervals, wall))
}

fn execute_job(
    cfg: &ExperimentConfig,
    theta_ref: &DVector<f64>,
    threshold_c: f64,
    level: f64,
    coords: &[usize],
    method: Method,
    r: usize,
    rep: u64,
) -> RepOutcome {
    match run_replicate(cfg, threshold_c, level, method, r, rep) {
        Ok((theta, intervals, wall)) => {
            let mut covered = Vec::with_capacity(coords.len());
            let mut lengths = Vec::with_capacity(coords.len());
            for &j in coords {
                let (lo, hi) = intervals[j];
                covered.push(lo <= theta_ref[j] && theta_ref[j] <= hi);
                lengths.push(hi - lo);
            }
            RepOutcome {
                failed: false,
                mse_contrib: (&theta - theta_ref).norm_squared(),
                wall_time_s: wall,
                covered,
                lengths,
            }
        }
        Err(_) => RepOutcome {
            failed: true,
            mse_contrib: f64::NAN,
            wall_time_s: f64::NAN,
            covered: vec![false; coords.len()],
            lengths: vec![f64::NAN; coords.len()],
        },
    }
}

/// Run every (method, r, replicate) cell. The outcome vector is in the
/// nested (method, r, replicate) order regardless of worker count or
/// scheduling, so downstream aggregation is deterministic.
///
/// Execution interleaves methods and budgets within each replicate so
/// slow machine phases (frequency shifts, cache state) average into
/// every cell instead of biasing whole method blocks; per-cell results
/// are unaffected (seeds are keyed by cell, not execution slot), but
/// timing ratios between methods depend on this.
fn run_all(
    cfg: &ExperimentConfig,
    level: f64,
    coords: &[usize],
) -> Result<Vec<RepOutcome>, BenchError> {
    cfg.validate()?;
    let threshold_c = cfg.threshold.threshold(cfg.loss, cfg.r0)?;
    let theta_ref = reference_for(cfg)?;
    let mut jobs = Vec::with_capacity(cfg.methods.len() * cfg.r_list.len() * cfg.s_reps);
    for rep in 0..cfg.s_reps as u64 {
        for rj in 0..cfg.r_list.len() {
            for mi in 0..cfg.methods.len() {
                jobs.push((mi, rj, rep));
            }
        }
    }
    let pool = ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    let executed: Vec<RepOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mi, rj, rep)| {
                let method = cfg.methods[mi];
                let r = cfg.r_list[rj];
                execute_job(cfg, &theta_ref, threshold_c, level, coords, method, r, rep)
            })
            .collect()
    });
    // Scatter back into nested order for the fixed-chunk aggregation.
    let mut slots: Vec<Option<RepOutcome>> = (0..jobs.len()).map(|_| None).collect();
    for (&(mi, rj, rep), outcome) in jobs.iter().zip(executed) {
        slots[(mi * cfg.r_list.len() + rj) * cfg.s_reps + rep as usize] = Some(outcome);
    }
    Ok(slots.into_iter().map(|o| o.expect("every job ran")).collect())
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Walk outcomes in the fixed nested order, yielding each (method, r)
/// chunk of `s_reps` consecutive entries.
fn chunks<'a>(
    cfg: &'a ExperimentConfig,
    outcomes: &'a [RepOutcome],
) -> impl Iterator<Item = (Method, usize, &'a [RepOutcome])> {
    cfg.methods
        .iter()
        .flat_map(move |&m| cfg.r_list.iter().map(move |&r| (m, r)))
        .enumerate()
        .map(move |(i, (m, r))| (m, r, &outcomes[i * cfg.s_reps..(i + 1) * cfg.s_reps]))
}

// ======================================================================
// MSE tables
// ======================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub method: Method,
    pub r: usize,
    pub mse: f64,
    pub sd: f64,
    pub failures: usize,
}

pub fn run_mse(cfg: &ExperimentConfig) -> Result<Vec<MseRow>, BenchError> {
    if cfg.s_reps == 0 {
        return Err(BenchError::Config("s must be at least 1 for mse runs".into()));
    }
    let outcomes = run_all(cfg, 0.95, &[])?;
    let rows = mse_rows(cfg, &outcomes);
    if let Some(out) = &cfg.out {
        fs::write(out, mse_csv(&rows))?;
    }
    Ok(rows)
}

fn mse_rows(cfg: &ExperimentConfig, outcomes: &[RepOutcome]) -> Vec<MseRow> {
    chunks(cfg, outcomes)
        .map(|(method, r, cell)| {
            let ok: Vec<f64> = cell
                .iter()
                .filter(|o| !o.failed)
                .map(|o| o.mse_contrib)
                .collect();
            let failures = cell.len() - ok.len();
            let mse = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            MseRow {
                method,
                r,
                mse,
                sd: sample_sd(&ok),
                failures,
            }
        })
        .collect()
}

pub fn mse_csv(rows: &[MseRow]) -> String {
    let mut s = String::from("method,r,mse,sd,failures\n");
    for row in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            row.method, row.r, row.mse, row.sd, row.failures
        ));
    }
    s
}

// ======================================================================
// coverage tables
// ======================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub method: Method,
    pub r: usize,
    pub coord: usize,
    /// Fraction of successful replications whose interval covers the
    /// reference coordinate.
    pub cp: f64,
    pub mean_length: f64,
    pub failures: usize,
}

pub fn run_coverage(
    cfg: &ExperimentConfig,
    level: f64,
    coords: &[usize],
) -> Result<Vec<CoverageRow>, BenchError> {
    if cfg.s_reps == 0 {
        return Err(BenchError::Config(
            "s must be at least 1 for coverage runs".into(),
        ));
    }
    if coords.is_empty() {
        return Err(BenchError::Config("coverage needs at least one coordinate".into()));
    }
    if let Some(&j) = coords.iter().find(|&&j| j >= cfg.d) {
        return Err(BenchError::Config(format!(
            "coverage coordinate {j} out of range for d = {}",
            cfg.d
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(BenchError::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let outcomes = run_all(cfg, level, coords)?;
    let rows = coverage_rows(cfg, coords, &outcomes);
    if let Some(out) = &cfg.out {
        fs::write(out, coverage_csv(&rows))?;
    }
    Ok(rows)
}

fn coverage_rows(
    cfg: &ExperimentConfig,
    coords: &[usize],
    outcomes: &[RepOutcome],
) -> Vec<CoverageRow> {
    let mut rows = Vec::new();
    for (method, r, cell) in chunks(cfg, outcomes) {
        let ok: Vec<&RepOutcome> = cell.iter().filter(|o| !o.failed).collect();
        let failures = cell.len() - ok.len();
        for (k, &coord) in coords.iter().enumerate() {
            let (cp, mean_length) = if ok.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let hits = ok.iter().filter(|o| o.covered[k]).count();
                let total_len: f64 = ok.iter().map(|o| o.lengths[k]).sum();
                (hits as f64 / ok.len() as f64, total_len / ok.len() as f64)
            };
            rows.push(CoverageRow {
                method,
                r,
                coord,
                cp,
                mean_length,
                failures,
            });
        }
    }
    rows
}

pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut s = String::from("method,r,coord,cp,mean_length,failures\n");
    for row in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method, row.r, row.coord, row.cp, row.mean_length, row.failures
        ));
    }
    s
}

// ======================================================================
// timing tables
// ======================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: Method,
    pub r: usize,
    pub mean_s: f64,
    pub sd_s: f64,
    pub failures: usize,
}

/// Wall-clock per end-to-end fit, excluding data generation. Unlike the
/// statistical tables, zero repetitions is allowed and yields an empty
/// table.
pub fn run_timing(cfg: &ExperimentConfig) -> Result<Vec<TimingRow>, BenchError> {
    let rows = if cfg.s_reps == 0 {
        cfg.validate()?;
        Vec::new()
    } else {
        let outcomes = run_all(cfg, 0.95, &[])?;
        timing_rows(cfg, &outcomes)
    };
    if let Some(out) = &cfg.out {
        fs::write(out, timing_csv(&rows))?;
    }
    Ok(rows)
}

fn timing_rows(cfg: &ExperimentConfig, outcomes: &[RepOutcome]) -> Vec<TimingRow> {
    chunks(cfg, outcomes)
        .map(|(method, r, cell)| {
            let ok: Vec<f64> = cell
                .iter()
                .filter(|o| !o.failed)
                .map(|o| o.wall_time_s)
                .collect();
            let failures = cell.len() - ok.len();
            let mean_s = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            TimingRow {
                method,
                r,
                mean_s,
                sd_s: sample_sd(&ok),
                failures,
            }
        })
        .collect()
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("method,r,mean_s,sd_s,failures\n");
    for row in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            row.method, row.r, row.mean_s, row.sd_s, row.failures
        ));
    }
    s
}

// ======================================================================
// single fits on CSV data
// ======================================================================

#[derive(Debug, Clone)]
pub struct FitSettings {
    pub loss: LossSpec,
    pub r0: usize,
    pub budget_r: usize,
    pub threshold: ThresholdPolicy,
    pub rule: RuleKind,
    pub level: f64,
    pub seed: u64,
    pub label_column: usize,
    pub add_intercept: bool,
}

impl FitSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        FitSettings {
            loss: cfg.loss,
            r0: cfg.r0,
            budget_r: cfg.r_list.first().copied().unwrap_or(1000),
            threshold: cfg.threshold,
            rule: RuleKind::LOpt,
            level: 0.95,
            seed: cfg.seed,
            label_column: 0,
            add_intercept: true,
        }
    }
}

/// Fit the subsampled estimator on a CSV file: the first `r0` rows form
/// the pilot, the rest are scanned once.
pub fn fit_csv(path: &Path, s: &FitSettings) -> Result<MrossEstimate, BenchError> {
    let stream = DatasetStream::from_csv(path, s.label_column, s.add_intercept)?;
    let points = stream.materialize()?;
    if points.len() <= s.r0 {
        return Err(BenchError::Config(format!(
            "need more than r0 = {} rows, file has {}",
            s.r0,
            points.len()
        )));
    }
    let opts = SolveOptions::default();
    let pilot = fit_pilot(s.loss, points[..s.r0].to_vec(), &opts)?;
    let threshold_c = s.threshold.threshold(s.loss, s.r0)?;
    let rule = InclusionRule::new(s.rule, s.budget_r, threshold_c)?;
    let rule = rule.with_truncation(truncation_from_pilot(&pilot, &rule, s.loss)?)?;
    let n_scan = (points.len() - s.r0) as u64;
    let normalizer = estimate_normalizer(&pilot, &rule, s.loss, n_scan)?;
    let basis = ProjectionBasis::new(BasisKind::PilotScore, pilot.theta_pilot.clone(), s.loss);
    let mut rng = substream(s.seed, "fit-scan", 0);
    let summary = scan(
        points[s.r0..].iter().cloned().map(Ok),
        &pilot,
        &rule,
        s.loss,
        &basis,
        normalizer,
        &mut rng,
    )?;
    Ok(solve_mross(&pilot, &summary, &basis, s.level, &opts)?)
}

// ======================================================================
// tests
// ======================================================================
