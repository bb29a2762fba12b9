//! Single-pass Poisson subsampler with region compression.
//!
//! Each scanned point is assigned to one of three regions relative to the
//! pilot decision value x'theta_pilot: confidently positive points and
//! confidently negative points are compressed into running centroids, and
//! everything else (the sampling region) is kept with an inclusion
//! probability proportional to its estimated influence. Only selected
//! points are stored, so peak memory scales with the subsample, not the
//! stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use thiserror::Error;

use crate::data::{DataError, LabeledPoint};
use crate::estimator::{BasisKind, ProjectionBasis};
use crate::loss::LossSpec;
use crate::solver::PilotFit;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampling rule: {0}")]
    BadRule(String),
    #[error("a-optimal weights need an invertible pilot hessian")]
    SingularHessian,
    #[error("no pilot point falls in the sampling region; lower the threshold or enlarge the pilot")]
    EmptyRegion,
    #[error("normalizer must be positive and finite, got {0}")]
    BadNormalizer(f64),
    #[error("point dimension {0} does not match pilot dimension {1}")]
    DimensionMismatch(usize, usize),
    #[error("weight quantile for truncation must be positive, got {0}")]
    BadTruncation(f64),
    #[error("corrupt subsample file {path}: {msg}")]
    BadSpill { path: PathBuf, msg: String },
    #[error("subsample io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Stream(#[from] DataError),
}

// ======================================================================
// rules and regions
// ======================================================================

/// How the per-point sampling weight is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    /// Every sampling-region point gets weight 1.
    Uniform,
    /// |phi'(y x'theta_pilot)| * ||x|| (influence on the score norm).
    LOpt,
    /// |phi'(y x'theta_pilot)| * ||H^-1 x|| (influence on the estimate).
    AOpt,
}

/// Sampling configuration for one scan: target subsample size, region
/// threshold, and optional weight truncation.
#[derive(Debug, Clone, Copy)]
pub struct InclusionRule {
    pub kind: RuleKind,
    pub budget_r: usize,
    pub threshold_c: f64,
    pub truncation_m: Option<f64>,
}

impl InclusionRule {
    /// `threshold_c` may be infinite (no region compression) but must be
    /// positive.
    pub fn new(kind: RuleKind, budget_r: usize, threshold_c: f64) -> Result<Self, SamplerError> {
        if budget_r == 0 {
            return Err(SamplerError::BadRule("budget_r must be at least 1".into()));
        }
        if !(threshold_c > 0.0) {
            return Err(SamplerError::BadRule(format!(
                "threshold_c must be positive, got {threshold_c}"
            )));
        }
        Ok(InclusionRule {
            kind,
            budget_r,
            threshold_c,
            truncation_m: None,
        })
    }

    pub fn with_truncation(mut self, m: f64) -> Result<Self, SamplerError> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(SamplerError::BadRule(format!(
                "truncation_m must be positive and finite, got {m}"
            )));
        }
        self.truncation_m = Some(m);
        Ok(self)
    }
}

/// Three-way partition of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Confidently positive and labeled +1: compressed into a centroid.
    Plus,
    /// Confidently negative and labeled -1: compressed into a centroid.
    Minus,
    /// Everything else: eligible for subsampling.
    Sample,
}

/// Assign a point to its region. Boundary values and label-mismatched
/// extremes stay in the sampling region (strict inequalities, matching
/// label required).
pub fn classify_region(pilot: &PilotFit, threshold_c: f64, p: &LabeledPoint) -> Region {
    region_of(p.x.dot(&pilot.theta_pilot), p.y, threshold_c)
}

fn region_of(v: f64, y: f64, threshold_c: f64) -> Region {
    if v > threshold_c && y > 0.0 {
        Region::Plus
    } else if v < -threshold_c && y < 0.0 {
        Region::Minus
    } else {
        Region::Sample
    }
}

// ======================================================================
// weights and probabilities
// ======================================================================

/// Unnormalized sampling weight of a sampling-region point, truncated at
/// `truncation_m` when the rule carries one.
pub fn sampling_weight(
    rule: &InclusionRule,
    loss: LossSpec,
    pilot: &PilotFit,
    p: &LabeledPoint,
) -> Result<f64, SamplerError> {
    let dl = match rule.kind {
        RuleKind::Uniform => 0.0,
        _ => loss.dloss(p.y * p.x.dot(&pilot.theta_pilot)),
    };
    weight_from_dloss(rule, pilot, p, dl)
}

/// [`sampling_weight`] with `phi'(y x'theta_pilot)` precomputed; the scan
/// evaluates the margin once per point and shares it here.
fn weight_from_dloss(
    rule: &InclusionRule,
    pilot: &PilotFit,
    p: &LabeledPoint,
    dl: f64,
) -> Result<f64, SamplerError> {
    let raw = match rule.kind {
        RuleKind::Uniform => 1.0,
        RuleKind::LOpt => dl.abs() * p.x.norm(),
        RuleKind::AOpt => {
            let inv = pilot
                .hessian_inv
                .as_ref()
                .ok_or(SamplerError::SingularHessian)?;
            dl.abs() * (inv * &p.x).norm()
        }
    };
    Ok(match rule.truncation_m {
        Some(m) => raw.min(m),
        None => raw,
    })
}

/// Estimate the scan-wide weight total from the pilot sample: the sum of
/// sampling-region pilot weights, scaled from pilot size to `n_scan`.
pub fn estimate_normalizer(
    pilot: &PilotFit,
    rule: &InclusionRule,
    loss: LossSpec,
    n_scan: u64,
) -> Result<f64, SamplerError> {
    if pilot.pilot_points.is_empty() {
        return Err(SamplerError::EmptyRegion);
    }
    let mut sum = 0.0;
    let mut in_region = 0u64;
    for p in &pilot.pilot_points {
        if classify_region(pilot, rule.threshold_c, p) == Region::Sample {
            in_region += 1;
            sum += sampling_weight(rule, loss, pilot, p)?;
        }
    }
    if in_region == 0 {
        return Err(SamplerError::EmptyRegion);
    }
    let normalizer = n_scan as f64 * sum / pilot.r0() as f64;
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(SamplerError::BadNormalizer(normalizer));
    }
    Ok(normalizer)
}

/// `min(budget_r * weight / normalizer, 1)`.
pub fn inclusion_probability(rule: &InclusionRule, weight: f64, normalizer: f64) -> f64 {
    (rule.budget_r as f64 * weight / normalizer).min(1.0)
}

/// Weight level below which the heaviest 5% of pilot sampling-region
/// weights are clipped (used to bound inverse-probability weights).
pub fn truncation_from_pilot(
    pilot: &PilotFit,
    rule: &InclusionRule,
    loss: LossSpec,
) -> Result<f64, SamplerError> {
    let untruncated = InclusionRule {
        truncation_m: None,
        ..*rule
    };
    let mut weights = Vec::new();
    for p in &pilot.pilot_points {
        if classify_region(pilot, rule.threshold_c, p) == Region::Sample {
            weights.push(sampling_weight(&untruncated, loss, pilot, p)?);
        }
    }
    if weights.is_empty() {
        return Err(SamplerError::EmptyRegion);
    }
    weights.sort_by(f64::total_cmp);
    // Nearest-rank 95th percentile.
    let idx = ((weights.len() as f64 * 0.95).ceil() as usize).clamp(1, weights.len()) - 1;
    let m = weights[idx];
    if !(m > 0.0) {
        return Err(SamplerError::BadTruncation(m));
    }
    Ok(m)
}

// ======================================================================
// the scan
// ======================================================================

/// Everything one pass retains: region centroids and counts, the
/// sampling-region mean of the auxiliary summary g, and the selected
/// subsample with the inclusion probabilities actually used.
#[derive(Debug, Clone)]
pub struct ScanSummary {
    pub xbar_plus: DVector<f64>,
    pub n_plus: u64,
    pub xbar_minus: DVector<f64>,
    pub n_minus: u64,
    /// Mean of g over all sampling-region points (selected or not).
    pub gbar: DVector<f64>,
    pub n_s: u64,
    pub n_total: u64,
    pub subsample: Vec<(LabeledPoint, f64)>,
    pub realized_r: u64,
    /// Sum of inclusion probabilities (the expected subsample size).
    pub pi_sum: f64,
}

/// One pass over `points`: classify, compress, and Poisson-sample.
///
/// `normalizer` is the (estimated or exact) total sampling weight of the
/// scanned data; inclusion probabilities are `min(r * w / normalizer, 1)`
/// and the recorded per-point probability is exactly the one used for the
/// Bernoulli draw. Zero-weight points stay in the region accounting but
/// can never be selected.
pub fn scan<I, R>(
    points: I,
    pilot: &PilotFit,
    rule: &InclusionRule,
    loss: LossSpec,
    basis: &ProjectionBasis,
    normalizer: f64,
    rng: &mut R,
) -> Result<ScanSummary, SamplerError>
where
    I: IntoIterator<Item = Result<LabeledPoint, DataError>>,
    R: Rng + ?Sized,
{
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(SamplerError::BadNormalizer(normalizer));
    }
    let d = pilot.dim();
    if rule.kind == RuleKind::AOpt && pilot.hessian_inv.is_none() {
        return Err(SamplerError::SingularHessian);
    }

    let mut sum_plus = DVector::zeros(d);
    let mut sum_minus = DVector::zeros(d);
    let mut g_sum = DVector::zeros(basis.dim());
    let mut g_buf = DVector::zeros(basis.dim());
    let mut n_plus = 0u64;
    let mut n_minus = 0u64;
    let mut n_s = 0u64;
    let mut n_total = 0u64;
    let mut pi_sum = 0.0;
    let mut subsample = Vec::new();

    // One margin evaluation per point, shared by the region test, the
    // sampling weight, and the g-features; the loss derivative is computed
    // only when one of the latter two needs it.
    let share_dl = basis.loss == loss;
    let needs_dl =
        rule.kind != RuleKind::Uniform || (share_dl && basis.kind == BasisKind::PilotScore);
    for p in points {
        let p = p?;
        if p.dim() != d {
            return Err(SamplerError::DimensionMismatch(p.dim(), d));
        }
        n_total += 1;
        let v = p.x.dot(&pilot.theta_pilot);
        match region_of(v, p.y, rule.threshold_c) {
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
                let dl = if needs_dl { loss.dloss(p.y * v) } else { 0.0 };
                if share_dl {
                    basis.accumulate_from_dloss(&mut g_sum, &p, dl);
                } else {
                    basis.fill(&mut g_buf, &p);
                    g_sum += &g_buf;
                }
                let w = weight_from_dloss(rule, pilot, &p, dl)?;
                let pi = inclusion_probability(rule, w, normalizer);
                pi_sum += pi;
                if pi > 0.0 && rng.random::<f64>() < pi {
                    subsample.push((p, pi));
                }
            }
        }
    }

    let xbar_plus = if n_plus > 0 { sum_plus / n_plus as f64 } else { sum_plus };
    let xbar_minus = if n_minus > 0 {
        sum_minus / n_minus as f64
    } else {
        sum_minus
    };
    let gbar = if n_s > 0 { g_sum / n_s as f64 } else { g_sum };
    let realized_r = subsample.len() as u64;
    Ok(ScanSummary {
        xbar_plus,
        n_plus,
        xbar_minus,
        n_minus,
        gbar,
        n_s,
        n_total,
        subsample,
        realized_r,
        pi_sum,
    })
}

// ======================================================================
// binary spill
// ======================================================================

/// Write the subsample as fixed-width binary rows of d + 2 little-endian
/// f64 values: the features, then the label, then the recorded inclusion
/// probability.
pub fn write_subsample(
    path: &Path,
    subsample: &[(LabeledPoint, f64)],
) -> Result<(), SamplerError> {
    let io_err = |source| SamplerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for (p, pi) in subsample {
        for v in p.x.iter() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        out.write_all(&p.y.to_le_bytes()).map_err(io_err)?;
        out.write_all(&pi.to_le_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read rows written by [`write_subsample`]; `dim` is the feature count
/// per row (d).
pub fn read_subsample(
    path: &Path,
    dim: usize,
) -> Result<Vec<(LabeledPoint, f64)>, SamplerError> {
    let io_err = |source| SamplerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let spill_err = |msg: String| SamplerError::BadSpill {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(io_err)?;
    let row_len = (dim + 2) * 8;
    let len = file.metadata().map_err(io_err)?.len();
    if len % row_len as u64 != 0 {
        return Err(spill_err(format!(
            "length {len} is not a whole number of {row_len}-byte rows"
        )));
    }
    let mut reader = BufReader::new(file);
    let mut row = vec![0u8; row_len];
    let mut rows = Vec::with_capacity((len / row_len as u64) as usize);
    for _ in 0..len / row_len as u64 {
        reader.read_exact(&mut row).map_err(io_err)?;
        let vals: Vec<f64> = row
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let x = DVector::from_row_slice(&vals[..dim]);
        let y = vals[dim];
        let pi = vals[dim + 1];
        let point = LabeledPoint::new(x, y)
            .map_err(|e| spill_err(format!("row {}: {e}", rows.len() + 1)))?;
        if !(pi > 0.0 && pi <= 1.0) {
            return Err(spill_err(format!(
                "row {}: inclusion probability {pi} outside (0, 1]",
                rows.len() + 1
            )));
        }
        rows.push((point, pi));
    }
    Ok(rows)
}

// ======================================================================
// tests
// ======================================================================
