//! Detection of time windows where two experimental groups' continuous
//! time series differ.
//!
//! The pipeline: fit a parametric curve to each subject's series
//! ([`fitting`]), build bootstrap distributions of the group-level curves
//! ([`resampling`]) or a max-statistic permutation null ([`permutation`]),
//! and convert the resulting test-statistic series into significant time
//! intervals with an autocorrelation-aware alpha adjustment ([`inference`]).
//! [`simgen`] and [`harness`] provide a seeded Monte Carlo framework for
//! evaluating family-wise error rate and power of the three methods.

pub mod curves;
pub mod fitting;
pub mod harness;
pub mod inference;
pub mod permutation;
pub mod resampling;
pub mod seed;
pub mod simgen;
