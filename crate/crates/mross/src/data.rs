//! Labeled-point streams: synthetic benchmark cases, CSV ingestion, and
//! full-data reference fits.
//!
//! A [`DatasetStream`] is a replayable producer: every call to
//! [`DatasetStream::points`] starts an identical traversal, so multi-pass
//! algorithms (pilot fit, scan, reference fit) never need the data in
//! memory. Synthetic streams regenerate from a fixed substream seed; CSV
//! streams re-open the file.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal};
use thiserror::Error;

use crate::loss::LossSpec;
use crate::rng::{derive_seed, substream};
use crate::solver::{solve_score, SolveOptions};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("label must be +1, -1, or 0 (mapped to -1), got {0}")]
    BadLabel(f64),
    #[error("features must be finite")]
    NonFiniteFeature,
    #[error("case id must be in 1..=6, got {0}")]
    BadCase(u8),
    #[error("dimension must be at least 2 (intercept plus one feature), got {0}")]
    BadDim(usize),
    #[error("cases 5 and 6 split the feature block in half; need an even feature count, got {0}")]
    OddFeatures(usize),
    #[error("stream must contain at least one point")]
    EmptyStream,
    #[error("degrees of freedom must be positive and finite, got {0}")]
    BadDf(f64),
    #[error("covariance matrix is not symmetric positive definite")]
    NotSpd,
    #[error("points have inconsistent dimensions: {0} vs {1}")]
    MixedDims(usize, usize),
    #[error("csv row {line}: {msg}")]
    CsvRow { line: u64, msg: String },
    #[error("csv file has no data rows")]
    EmptyCsv,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("reference fit failed: {0}")]
    ReferenceFit(String),
}

/// One observation: covariate vector (intercept included by convention in
/// the first coordinate) and a label in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: DVector<f64>,
    pub y: f64,
}

impl LabeledPoint {
    pub fn new(x: DVector<f64>, y: f64) -> Result<Self, DataError> {
        if y != 1.0 && y != -1.0 {
            return Err(DataError::BadLabel(y));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteFeature);
        }
        Ok(LabeledPoint { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Classification margin `y * x' theta`.
    #[inline]
    pub fn margin(&self, theta: &DVector<f64>) -> f64 {
        self.y * self.x.dot(theta)
    }
}

/// Configuration of a synthetic benchmark case.
///
/// `d` counts the intercept, so the covariate block has `d - 1` entries.
/// Cases 1-3 draw labels from a logistic model with coefficients
/// `(0, 0.5, ..., 0.5)`; cases 4-6 are mixtures with class-dependent
/// covariates (cases 5 and 6 place their mean shifts on half-length feature
/// blocks and therefore need an even feature count).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseSpec {
    pub case_id: u8,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

impl CaseSpec {
    pub fn new(case_id: u8, n: usize, d: usize, seed: u64) -> Result<Self, DataError> {
        let spec = CaseSpec { case_id, n, d, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(1..=6).contains(&self.case_id) {
            return Err(DataError::BadCase(self.case_id));
        }
        if self.d < 2 {
            return Err(DataError::BadDim(self.d));
        }
        if self.n == 0 {
            return Err(DataError::EmptyStream);
        }
        if matches!(self.case_id, 5 | 6) && (self.d - 1) % 2 != 0 {
            return Err(DataError::OddFeatures(self.d - 1));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.d - 1
    }
}

/// Banded covariance `0.5^{|i-j|}`.
pub fn sigma_ar(f: usize) -> DMatrix<f64> {
    DMatrix::from_fn(f, f, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()))
}

/// Equicorrelated covariance: unit diagonal, `0.5` off the diagonal.
pub fn sigma_eq(f: usize) -> DMatrix<f64> {
    DMatrix::from_fn(f, f, |i, j| if i == j { 1.0 } else { 0.5 })
}

/// Logistic-model coefficients `(0, 0.5, ..., 0.5)` used by cases 1-3.
pub fn theta_lin(d: usize) -> DVector<f64> {
    DVector::from_fn(d, |i, _| if i == 0 { 0.0 } else { 0.5 })
}

/// One draw from a multivariate t distribution `t_df(mu, sigma)`.
///
/// Sampled as `mu + L z * sqrt(df / w)` with `L L' = sigma`,
/// `z ~ N(0, I)`, `w ~ chi^2_df`. For `df > 2` the covariance is
/// `sigma * df / (df - 2)`.
pub fn sample_mvt<R: Rng>(
    df: f64,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, DataError> {
    if !(df.is_finite() && df > 0.0) {
        return Err(DataError::BadDf(df));
    }
    if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
        return Err(DataError::MixedDims(sigma.nrows(), mu.len()));
    }
    let chol = Cholesky::new(sigma.clone()).ok_or(DataError::NotSpd)?;
    let z = DVector::from_fn(mu.len(), |_, _| rng.sample(StandardNormal));
    let w: f64 = rng.sample(ChiSquared::new(df).expect("df checked above"));
    Ok(mu + chol.l() * z * (df / w).sqrt())
}

/// A replayable source of labeled points.
#[derive(Debug, Clone)]
pub struct DatasetStream {
    dim: usize,
    n_hint: usize,
    source: Source,
}

#[derive(Debug, Clone)]
enum Source {
    Case(CaseSpec),
    Memory(Arc<Vec<LabeledPoint>>),
    Csv {
        path: PathBuf,
        label_column: usize,
        add_intercept: bool,
    },
}

impl DatasetStream {
    /// Synthetic stream for one of the benchmark cases.
    pub fn from_case(spec: CaseSpec) -> Result<Self, DataError> {
        spec.validate()?;
        Ok(DatasetStream {
            dim: spec.d,
            n_hint: spec.n,
            source: Source::Case(spec),
        })
    }

    /// In-memory stream (used to exclude generation cost from timing runs
    /// and to replay fixed datasets in Monte Carlo checks).
    pub fn from_points(points: Vec<LabeledPoint>) -> Result<Self, DataError> {
        let first = points.first().ok_or(DataError::EmptyStream)?;
        let dim = first.dim();
        if let Some(p) = points.iter().find(|p| p.dim() != dim) {
            return Err(DataError::MixedDims(dim, p.dim()));
        }
        Ok(DatasetStream {
            dim,
            n_hint: points.len(),
            source: Source::Memory(Arc::new(points)),
        })
    }

    /// CSV-backed stream. `label_column` is the zero-based column holding
    /// the label (`+1`/`-1`, or `0`/`1` with `0` mapped to `-1`); all other
    /// columns are features in file order. With `add_intercept` a leading
    /// `1.0` coordinate is prepended. A non-numeric first row is treated as
    /// a header and skipped. Each traversal re-opens the file.
    pub fn from_csv<P: AsRef<Path>>(
        path: P,
        label_column: usize,
        add_intercept: bool,
    ) -> Result<Self, DataError> {
        let path = path.as_ref().to_path_buf();
        // Validate structure eagerly: dimension from the first data row,
        // row count for the size hint.
        let mut gen = CsvGen::open(&path, label_column, add_intercept)?;
        let first = gen.next().ok_or(DataError::EmptyCsv)??;
        let dim = first.dim();
        let mut n_hint = 1;
        for row in gen {
            row?;
            n_hint += 1;
        }
        Ok(DatasetStream {
            dim,
            n_hint,
            source: Source::Csv {
                path,
                label_column,
                add_intercept,
            },
        })
    }

    /// Dimension of every point (intercept included where applicable).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of points a full traversal yields.
    pub fn n_hint(&self) -> usize {
        self.n_hint
    }

    /// A fresh traversal. Two traversals of the same stream produce
    /// identical sequences.
    pub fn points(&self) -> PointIter {
        let inner = match &self.source {
            Source::Case(spec) => IterImpl::Case(Box::new(CaseGen::new(*spec))),
            Source::Memory(data) => IterImpl::Memory {
                data: Arc::clone(data),
                pos: 0,
            },
            Source::Csv {
                path,
                label_column,
                add_intercept,
            } => match CsvGen::open(path, *label_column, *add_intercept) {
                Ok(gen) => IterImpl::Csv(Box::new(gen)),
                Err(e) => IterImpl::Failed(Some(e)),
            },
        };
        PointIter { inner }
    }

    /// Collect the whole stream into memory.
    pub fn materialize(&self) -> Result<Vec<LabeledPoint>, DataError> {
        self.points().collect()
    }
}

pub struct PointIter {
    inner: IterImpl,
}

enum IterImpl {
    Case(Box<CaseGen>),
    Memory {
        data: Arc<Vec<LabeledPoint>>,
        pos: usize,
    },
    Csv(Box<CsvGen>),
    Failed(Option<DataError>),
}

impl Iterator for PointIter {
    type Item = Result<LabeledPoint, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.inner {
            IterImpl::Case(gen) => gen.next().map(Ok),
            IterImpl::Memory { data, pos } => {
                let item = data.get(*pos)?.clone();
                *pos += 1;
                Some(Ok(item))
            }
            IterImpl::Csv(gen) => gen.next(),
            IterImpl::Failed(err) => err.take().map(Err),
        }
    }
}

// ======================================================================
// synthetic generation
// ======================================================================

struct CaseGen {
    spec: CaseSpec,
    emitted: usize,
    rng: ChaCha8Rng,
    chol1: DMatrix<f64>,
    chol2: Option<DMatrix<f64>>,
    chi3: ChiSquared<f64>,
    z: DVector<f64>,
}

impl CaseGen {
    fn new(spec: CaseSpec) -> Self {
        let f = spec.features();
        let chol1 = Cholesky::new(sigma_ar(f))
            .expect("banded covariance is SPD")
            .l()
            .into_owned();
        let chol2 = matches!(spec.case_id, 2 | 4).then(|| {
            Cholesky::new(sigma_eq(f))
                .expect("equicorrelated covariance is SPD")
                .l()
                .into_owned()
        });
        CaseGen {
            spec,
            emitted: 0,
            rng: substream(spec.seed, "case-stream", u64::from(spec.case_id)),
            chol1,
            chol2,
            chi3: ChiSquared::new(3.0).expect("fixed df"),
            z: DVector::zeros(f),
        }
    }

    fn standard_normals(&mut self) {
        for v in self.z.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
    }

    /// Mean shift for case 5, by class and mixture component, on
    /// half-length feature blocks.
    fn case5_mean(&self, y: f64, comp: usize) -> DVector<f64> {
        let f = self.spec.features();
        let h = f / 2;
        let (lo, hi) = if y > 0.0 {
            match comp {
                0 => (0.0, 1.0),
                1 => (-1.0, 2.0),
                _ => (-1.0, -1.0),
            }
        } else {
            match comp {
                0 => (0.0, -1.0),
                1 => (1.0, -2.0),
                _ => (1.0, 2.0),
            }
        };
        DVector::from_fn(f, |i, _| if i < h { lo } else { hi })
    }

    fn draw(&mut self) -> LabeledPoint {
        let f = self.spec.features();
        self.standard_normals();
        let (v, y) = match self.spec.case_id {
            1 => {
                let v = &self.chol1 * &self.z;
                let y = self.labeled(&v);
                (v, y)
            }
            2 => {
                let use_eq = self.rng.random::<bool>();
                let l = if use_eq {
                    self.chol2.as_ref().expect("case 2 has a second factor")
                } else {
                    &self.chol1
                };
                let v = l * &self.z;
                let y = self.labeled(&v);
                (v, y)
            }
            3 => {
                let w: f64 = self.rng.sample(self.chi3);
                let v = (&self.chol1 * &self.z) * (3.0 / w).sqrt();
                let y = self.labeled(&v);
                (v, y)
            }
            4 => {
                let y = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
                let l = if y > 0.0 {
                    &self.chol1
                } else {
                    self.chol2.as_ref().expect("case 4 has a second factor")
                };
                let mut v = l * &self.z;
                v.add_scalar_mut(0.5 * y);
                (v, y)
            }
            5 => {
                let y = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
                let u: f64 = self.rng.random();
                let comp = if u < 0.5 {
                    0
                } else if u < 0.75 {
                    1
                } else {
                    2
                };
                let v = self.case5_mean(y, comp) + &self.chol1 * &self.z;
                (v, y)
            }
            6 => {
                let y = if self.rng.random::<f64>() < 0.8 { 1.0 } else { -1.0 };
                let w: f64 = self.rng.sample(self.chi3);
                let h = f / 2;
                let mut v = (&self.chol1 * &self.z) * (3.0 / w).sqrt();
                for i in h..f {
                    v[i] += y;
                }
                (v, y)
            }
            _ => unreachable!("validated case id"),
        };
        let mut x = DVector::zeros(self.spec.d);
        x[0] = 1.0;
        x.rows_mut(1, f).copy_from(&v);
        LabeledPoint { x, y }
    }

    /// Label drawn after assembling the covariate, from the logistic model.
    fn labeled(&mut self, v: &DVector<f64>) -> f64 {
        // Intercept coefficient is zero, so the feature block suffices.
        let lin = 0.5 * v.sum();
        let p = 1.0 / (1.0 + (-lin).exp());
        if self.rng.random::<f64>() < p {
            1.0
        } else {
            -1.0
        }
    }
}

impl Iterator for CaseGen {
    type Item = LabeledPoint;

    fn next(&mut self) -> Option<LabeledPoint> {
        if self.emitted >= self.spec.n {
            return None;
        }
        self.emitted += 1;
        Some(self.draw())
    }
}

// ======================================================================
// csv ingestion
// ======================================================================

struct CsvGen {
    records: csv::StringRecordsIntoIter<File>,
    label_column: usize,
    add_intercept: bool,
    first_row: bool,
}

impl CsvGen {
    fn open(path: &Path, label_column: usize, add_intercept: bool) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(file);
        Ok(CsvGen {
            records: rdr.into_records(),
            label_column,
            add_intercept,
            first_row: true,
        })
    }

    fn parse(&self, record: &csv::StringRecord, line: u64) -> Result<LabeledPoint, DataError> {
        if self.label_column >= record.len() {
            return Err(DataError::CsvRow {
                line,
                msg: format!(
                    "label column {} out of range for {} fields",
                    self.label_column,
                    record.len()
                ),
            });
        }
        let mut features = Vec::with_capacity(record.len() - 1 + usize::from(self.add_intercept));
        if self.add_intercept {
            features.push(1.0);
        }
        let mut label = 0.0;
        for (idx, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| DataError::CsvRow {
                line,
                msg: format!("field {idx} is not a number: {field:?}"),
            })?;
            if idx == self.label_column {
                label = match value {
                    v if v == 1.0 => 1.0,
                    v if v == -1.0 => -1.0,
                    v if v == 0.0 => -1.0,
                    v => {
                        return Err(DataError::CsvRow {
                            line,
                            msg: format!("label must be +1, -1, or 0, got {v}"),
                        })
                    }
                };
            } else {
                if !value.is_finite() {
                    return Err(DataError::CsvRow {
                        line,
                        msg: format!("field {idx} is not finite"),
                    });
                }
                features.push(value);
            }
        }
        Ok(LabeledPoint {
            x: DVector::from_vec(features),
            y: label,
        })
    }
}

impl Iterator for CsvGen {
    type Item = Result<LabeledPoint, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let record = match self.records.next()? {
                Ok(r) => r,
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    return Some(Err(DataError::CsvRow {
                        line,
                        msg: e.to_string(),
                    }));
                }
            };
            let line = record.position().map_or(0, |p| p.line());
            let was_first = self.first_row;
            self.first_row = false;
            match self.parse(&record, line) {
                Ok(p) => return Some(Ok(p)),
                // A non-numeric first row is an optional header.
                Err(DataError::CsvRow { .. }) if was_first && !record_is_numeric(&record) => {
                    continue;
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

fn record_is_numeric(record: &csv::StringRecord) -> bool {
    record.iter().all(|f| f.parse::<f64>().is_ok())
}

// ======================================================================
// reference fits
// ======================================================================

/// Full-data estimate on an independent, ten-times-larger dataset from the
/// same case; used as the target value when scoring subsampling estimators.
///
/// Streams the data through the solver, so memory stays O(d^2).
pub fn reference_theta(spec: &CaseSpec, loss: LossSpec) -> Result<DVector<f64>, DataError> {
    spec.validate()?;
    let ref_spec = CaseSpec {
        n: spec.n.saturating_mul(10),
        seed: derive_seed(spec.seed, "reference-data", u64::from(spec.case_id)),
        ..*spec
    };
    let stream = DatasetStream::from_case(ref_spec)?;
    let n = ref_spec.n as f64;
    let d = ref_spec.d;

    let fit = |l: LossSpec, init: &DVector<f64>, opts: &SolveOptions| {
        let score = |theta: &DVector<f64>| {
            let mut s = DVector::zeros(d);
            for p in stream.points() {
                let p = p?;
                let z = p.y * p.x.dot(theta);
                s.axpy(l.dloss(z) * p.y, &p.x, 1.0);
            }
            Ok(s / n)
        };
        let jacobian = |theta: &DVector<f64>| {
            let mut j = DMatrix::zeros(d, d);
            for p in stream.points() {
                let p = p?;
                let z = p.y * p.x.dot(theta);
                j.ger(l.ddloss(z), &p.x, &p.x, 1.0);
            }
            Ok(j / n)
        };
        solve_score(score, jacobian, init, opts)
    };

    // Losses with a flat linear branch at the origin (DWD) start from the
    // logistic solution, which always has curvature.
    let opts = SolveOptions::default();
    let init = if matches!(loss, LossSpec::Dwd { .. }) {
        let warm_opts = SolveOptions {
            tol: opts.tol.max(1e-6),
            ..opts
        };
        fit(LossSpec::Logistic, &DVector::zeros(d), &warm_opts)
            .map_err(|e| DataError::ReferenceFit(e.to_string()))?
            .theta
    } else {
        DVector::zeros(d)
    };

    let report =
        fit(loss, &init, &opts).map_err(|e| DataError::ReferenceFit(e.to_string()))?;
    if !report.converged {
        return Err(DataError::ReferenceFit(format!(
            "no convergence after {} iterations (final score norm {:.3e})",
            report.iterations, report.final_score_norm
        )));
    }
    Ok(report.theta)
}

// ======================================================================
// tests
// ======================================================================
