//! Multi-resolution optimal subsampling (MROSS) for binary linear
//! classification at stream scale.
//!
//! The crate fits linear classifiers under margin losses (logistic, squared
//! hinge, DWD) without holding the data in memory. A small pilot sample fixes
//! a preliminary estimate; a single pass over the remaining stream then
//! splits points into two "cheap" regions, summarized only by their running
//! centroids, and a middle region that is Poisson-subsampled with
//! gradient-proportional probabilities. The final estimating equation pools
//! the pilot, a projection-corrected inverse-probability score on the
//! subsample, and the centroid summaries, and ships a plug-in covariance for
//! Wald intervals.
//!
//! Modules:
//! - [`loss`]: margin losses and per-point scores/Hessians.
//! - [`data`]: synthetic stream generators, CSV ingestion, reference fits.
//! - [`solver`]: damped Newton root finder for score equations, pilot fits.
//! - [`sampler`]: region partition, sampling weights, the one-pass scan.
//! - [`estimator`]: corrected scores, combined equation, covariance.
//! - [`baselines`]: uniform and plain optimal-subsampling comparators.
//! - [`bench`]: seeded replication experiments (MSE, coverage, timing).

pub mod baselines;
pub mod bench;
pub mod data;
pub mod estimator;
pub mod loss;
pub mod rng;
pub mod sampler;
pub mod solver;
