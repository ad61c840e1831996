//! Bootstrap distributions of group-level curves and the per-time test
//! statistic series.
//!
//! The homogeneous bootstrap draws parameters for every subject (no subject
//! resampling) and so captures only within-subject uncertainty. The
//! heterogeneous bootstrap first resamples subjects with replacement, adding
//! the between-subject variance component. Paired designs share one subject
//! resampling plan across the two groups and form statistics on the bootstrap
//! distribution of paired mean differences.
//!
//! All bootstrap iterations use seeds derived from `(seed, b)`, so output is
//! deterministic regardless of execution order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{CurveError, CurveModel};
use crate::fitting::SubjectFit;
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("zero bootstrap variance at time index {0}; the bootstrap distribution is degenerate")]
    ZeroVariance(usize),
    #[error("resample plan has shape ({rows}, {cols}), expected ({b}, {n})")]
    PlanShapeMismatch {
        rows: usize,
        cols: usize,
        b: usize,
        n: usize,
    },
    #[error("subject with pair id '{0}' has no counterpart in the other group")]
    UnpairedSubject(String),
    #[error("group '{0}' has no converged fits")]
    EmptyGroup(String),
    #[error("time grids differ between the two groups")]
    GridMismatch,
    #[error("pair ids are required for paired resampling")]
    MissingPairIds,
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// Which resampling scheme produced a statistic series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatMethod {
    Homogeneous,
    Heterogeneous,
    Permutation,
}

/// Converged fits for one group, with optional pairing keys aligned to them.
#[derive(Debug, Clone)]
pub struct GroupFits {
    pub group: String,
    pub fits: Vec<SubjectFit>,
    pub pair_ids: Option<Vec<String>>,
}

impl GroupFits {
    /// Keeps converged fits only; returns the number dropped.
    pub fn from_fits(
        group: impl Into<String>,
        fits: Vec<SubjectFit>,
        pair_ids: Option<Vec<String>>,
    ) -> (Self, usize) {
        let keep: Vec<bool> = fits.iter().map(|f| f.converged).collect();
        let dropped = keep.iter().filter(|k| !**k).count();
        let fits = fits
            .into_iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(f, _)| f)
            .collect();
        let pair_ids = pair_ids.map(|ids| {
            ids.into_iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(id, _)| id)
                .collect()
        });
        (
            Self {
                group: group.into(),
                fits,
                pair_ids,
            },
            dropped,
        )
    }

    pub fn len(&self) -> usize {
        self.fits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fits.is_empty()
    }
}

/// Per-time mean and standard deviation of the bootstrapped population curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCurveStats {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub b_count: usize,
}

/// Test-statistic series over the analysis grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestStatSeries {
    pub times: Vec<f64>,
    pub stats: Vec<f64>,
    pub method: StatMethod,
    pub paired: bool,
}

/// Shared with-replacement subject index plan, one row per bootstrap.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    pub indices: Vec<Vec<usize>>,
}

impl ResamplePlan {
    pub fn generate(b: usize, n: usize, seed: u64) -> Self {
        let indices = (0..b)
            .map(|i| {
                let mut rng = stream_rng(seed, i as u64);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            })
            .collect();
        Self { indices }
    }

    /// Each subject exactly once per row; reduces the heterogeneous bootstrap
    /// to the homogeneous one.
    pub fn identity(b: usize, n: usize) -> Self {
        Self {
            indices: (0..b).map(|_| (0..n).collect()).collect(),
        }
    }

    fn check(&self, b: usize, n: usize) -> Result<(), ResampleError> {
        if self.indices.len() != b || self.indices.iter().any(|row| row.len() != n) {
            return Err(ResampleError::PlanShapeMismatch {
                rows: self.indices.len(),
                cols: self.indices.first().map_or(0, |r| r.len()),
                b,
                n,
            });
        }
        Ok(())
    }
}

/// Draws one parameter vector from N(theta_hat, diag(se^2)).
fn draw_params(fit: &SubjectFit, rng: &mut impl Rng) -> Vec<f64> {
    fit.theta_hat
        .iter()
        .zip(&fit.se)
        .map(|(&m, &s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect()
}

fn mean_params(draws: &[Vec<f64>]) -> Vec<f64> {
    let p = draws[0].len();
    let n = draws.len() as f64;
    (0..p)
        .map(|j| draws.iter().map(|d| d[j]).sum::<f64>() / n)
        .collect()
}

/// One bootstrapped population curve per iteration (B x |times|).
fn bootstrap_curves(
    group: &GroupFits,
    spec: &dyn CurveModel,
    times: &[f64],
    b: usize,
    seed: u64,
    plan: Option<&ResamplePlan>,
    with_replacement: bool,
) -> Result<Vec<Vec<f64>>, ResampleError> {
    let n = group.len();
    if n == 0 {
        return Err(ResampleError::EmptyGroup(group.group.clone()));
    }
    if let Some(p) = plan {
        p.check(b, n)?;
    }
    let mut curves = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = stream_rng(seed, i as u64);
        let chosen: Vec<usize> = match plan {
            Some(p) => p.indices[i].clone(),
            None if with_replacement => (0..n).map(|_| rng.random_range(0..n)).collect(),
            None => (0..n).collect(),
        };
        let draws: Vec<Vec<f64>> = chosen
            .iter()
            .map(|&j| draw_params(&group.fits[j], &mut rng))
            .collect();
        let theta_g = mean_params(&draws);
        let curve: Result<Vec<f64>, CurveError> =
            times.iter().map(|&t| spec.eval(&theta_g, t)).collect();
        curves.push(curve?);
    }
    Ok(curves)
}

fn stats_from_curves(times: &[f64], curves: &[Vec<f64>]) -> GroupCurveStats {
    let b = curves.len();
    let t = times.len();
    let mut mean = vec![0.0; t];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= b as f64;
    }
    let mut sd = vec![0.0; t];
    for c in curves {
        for ((s, v), m) in sd.iter_mut().zip(c).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / (b as f64 - 1.0)).sqrt();
    }
    GroupCurveStats {
        times: times.to_vec(),
        mean,
        sd,
        b_count: b,
    }
}

/// Homogeneous bootstrap: every subject contributes one parameter draw per
/// iteration, with no subject resampling.
pub fn hom_bootstrap(
    group: &GroupFits,
    spec: &dyn CurveModel,
    times: &[f64],
    b: usize,
    seed: u64,
) -> Result<GroupCurveStats, ResampleError> {
    let curves = bootstrap_curves(group, spec, times, b, seed, None, false)?;
    Ok(stats_from_curves(times, &curves))
}

/// Heterogeneous bootstrap: subjects are resampled with replacement before
/// their parameters are drawn. An explicit `resample_plan` overrides the
/// internal index draws (used for paired designs).
pub fn het_bootstrap(
    group: &GroupFits,
    spec: &dyn CurveModel,
    times: &[f64],
    b: usize,
    seed: u64,
    resample_plan: Option<&ResamplePlan>,
) -> Result<GroupCurveStats, ResampleError> {
    let curves = bootstrap_curves(group, spec, times, b, seed, resample_plan, true)?;
    Ok(stats_from_curves(times, &curves))
}

/// Per-time test statistic T_t = (mean1 - mean2) / sqrt(sd1^2 + sd2^2).
pub fn diff_test_stats(
    g1: &GroupCurveStats,
    g2: &GroupCurveStats,
    method: StatMethod,
    paired: bool,
) -> Result<TestStatSeries, ResampleError> {
    if g1.times != g2.times {
        return Err(ResampleError::GridMismatch);
    }
    let stats = g1
        .mean
        .iter()
        .zip(&g2.mean)
        .zip(g1.sd.iter().zip(&g2.sd))
        .enumerate()
        .map(|(i, ((m1, m2), (s1, s2)))| {
            let var = s1 * s1 + s2 * s2;
            if var <= 0.0 {
                return Err(ResampleError::ZeroVariance(i));
            }
            Ok((m1 - m2) / var.sqrt())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TestStatSeries {
        times: g1.times.clone(),
        stats,
        method,
        paired,
    })
}

/// Aligns group 2's fit order to group 1's pair ids.
pub(crate) fn pair_alignment(g1: &GroupFits, g2: &GroupFits) -> Result<Vec<usize>, ResampleError> {
    let ids1 = g1.pair_ids.as_ref().ok_or(ResampleError::MissingPairIds)?;
    let ids2 = g2.pair_ids.as_ref().ok_or(ResampleError::MissingPairIds)?;
    if g1.len() != g2.len() {
        return Err(ResampleError::UnpairedSubject(format!(
            "group sizes differ ({} vs {})",
            g1.len(),
            g2.len()
        )));
    }
    ids1.iter()
        .map(|id| {
            ids2.iter()
                .position(|other| other == id)
                .ok_or_else(|| ResampleError::UnpairedSubject(id.clone()))
        })
        .collect()
}

/// Paired heterogeneous bootstrap: one shared with-replacement index plan
/// drives both groups, and the statistic series is formed from the bootstrap
/// distribution of the paired mean differences at each time.
pub fn paired_diff_bootstrap(
    g1: &GroupFits,
    g2: &GroupFits,
    spec: &dyn CurveModel,
    times: &[f64],
    b: usize,
    seed: u64,
) -> Result<TestStatSeries, ResampleError> {
    let align = pair_alignment(g1, g2)?;
    let n = g1.len();
    let plan = ResamplePlan::generate(b, n, derive_seed(seed, 0));
    let plan2 = ResamplePlan {
        indices: plan
            .indices
            .iter()
            .map(|row| row.iter().map(|&i| align[i]).collect())
            .collect(),
    };
    let curves1 = bootstrap_curves(g1, spec, times, b, derive_seed(seed, 1), Some(&plan), true)?;
    let curves2 = bootstrap_curves(g2, spec, times, b, derive_seed(seed, 2), Some(&plan2), true)?;
    let diffs: Vec<Vec<f64>> = curves1
        .iter()
        .zip(&curves2)
        .map(|(c1, c2)| c1.iter().zip(c2).map(|(a, b)| a - b).collect())
        .collect();
    let stats = stats_from_curves(times, &diffs);
    let t_stats = stats
        .mean
        .iter()
        .zip(&stats.sd)
        .enumerate()
        .map(|(i, (m, s))| {
            if *s <= 0.0 {
                return Err(ResampleError::ZeroVariance(i));
            }
            Ok(m / s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TestStatSeries {
        times: times.to_vec(),
        stats: t_stats,
        method: StatMethod::Heterogeneous,
        paired: true,
    })
}
