//! Max-statistic permutation test.
//!
//! The observed statistic compares the two groups' subject-level curves at
//! their point estimates. The null distribution reshuffles group membership
//! (preserving group sizes; pair-respecting swaps in paired mode), redraws
//! each subject's parameters from its sampling distribution, and retains the
//! maximum statistic over the grid from each permutation. Significance is a
//! single comparison of the observed series against the 1 - alpha quantile
//! of those maxima.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{CurveError, CurveModel};
use crate::fitting::SubjectFit;
use crate::resampling::{pair_alignment, GroupFits, ResampleError, StatMethod, TestStatSeries};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum PermError {
    #[error("zero between-subject variance at time index {0}")]
    ZeroVariance(usize),
    #[error("group '{group}' has {got} subjects; permutation testing needs at least 2")]
    TooFewSubjects { group: String, got: usize },
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PermOptions {
    pub paired: bool,
    /// Redraw parameters for the observed statistic too (default: point
    /// estimates for observed, redraw only in the null permutations).
    pub redraw_observed: bool,
    /// Enumerate every label assignment instead of sampling; the requested
    /// permutation count is ignored.
    pub exhaustive: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationResult {
    /// Absolute-valued observed statistic series.
    pub observed: TestStatSeries,
    /// Max statistic from each permutation.
    pub null_max: Vec<f64>,
    /// 1 - alpha empirical quantile of `null_max`.
    pub threshold: f64,
    pub significant: Vec<bool>,
    /// Fraction of null maxima at or above the observed maximum.
    pub p_value_max: f64,
}

/// Mean and sample variance (n-1 denominator) of subject curves per time.
fn group_curve_stats(curves: &[Vec<f64>], n_times: usize) -> (Vec<f64>, Vec<f64>) {
    let n = curves.len() as f64;
    let mut mean = vec![0.0; n_times];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; n_times];
    for c in curves {
        for ((s, v), m) in var.iter_mut().zip(c).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for s in var.iter_mut() {
        *s /= n - 1.0;
    }
    (mean, var)
}

fn perm_stat_series(
    curves1: &[Vec<f64>],
    curves2: &[Vec<f64>],
    n_times: usize,
) -> Result<Vec<f64>, PermError> {
    let (m1, v1) = group_curve_stats(curves1, n_times);
    let (m2, v2) = group_curve_stats(curves2, n_times);
    (0..n_times)
        .map(|i| {
            let var = v1[i] + v2[i];
            if var <= 0.0 {
                return Err(PermError::ZeroVariance(i));
            }
            Ok((m1[i] - m2[i]).abs() / var.sqrt())
        })
        .collect()
}

fn subject_curves(
    fits: &[&SubjectFit],
    spec: &dyn CurveModel,
    times: &[f64],
    redraw: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Vec<f64>>, PermError> {
    match redraw {
        None => fits
            .iter()
            .map(|f| {
                times
                    .iter()
                    .map(|&t| spec.eval(&f.theta_hat, t))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(PermError::from)
            })
            .collect(),
        Some(rng) => fits
            .iter()
            .map(|f| {
                let theta: Vec<f64> = f
                    .theta_hat
                    .iter()
                    .zip(&f.se)
                    .map(|(&m, &s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect();
                times
                    .iter()
                    .map(|&t| spec.eval(&theta, t))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(PermError::from)
            })
            .collect(),
    }
}

/// Observed max-statistic series from the subjects' point estimates.
pub fn observed_perm_stat(
    g1: &GroupFits,
    g2: &GroupFits,
    spec: &dyn CurveModel,
    times: &[f64],
) -> Result<TestStatSeries, PermError> {
    for g in [g1, g2] {
        if g.len() < 2 {
            return Err(PermError::TooFewSubjects {
                group: g.group.clone(),
                got: g.len(),
            });
        }
    }
    let c1 = subject_curves(&g1.fits.iter().collect::<Vec<_>>(), spec, times, None)?;
    let c2 = subject_curves(&g2.fits.iter().collect::<Vec<_>>(), spec, times, None)?;
    let stats = perm_stat_series(&c1, &c2, times.len())?;
    Ok(TestStatSeries {
        times: times.to_vec(),
        stats,
        method: StatMethod::Permutation,
        paired: false,
    })
}

/// Random group-size-preserving partition of the pooled subject indices.
pub(crate) fn unpaired_partition(n1: usize, n2: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n1 + n2).collect();
    idx.shuffle(rng);
    idx
}

/// Independent fair-coin swap per pair.
pub(crate) fn paired_flips(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random::<bool>()).collect()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic combination
        let mut i = k as isize - 1;
        while i >= 0 && cur[i as usize] == i as usize + n - k {
            i -= 1;
        }
        if i < 0 {
            return out;
        }
        let i = i as usize;
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

enum Assignment {
    /// Pooled index order; first n1 entries form permuted group 1.
    Partition(Vec<usize>),
    /// Per-pair swap flags.
    Flips(Vec<bool>),
}

/// Runs the max-statistic permutation test.
pub fn permutation_test(
    g1: &GroupFits,
    g2: &GroupFits,
    spec: &dyn CurveModel,
    times: &[f64],
    p_count: usize,
    alpha: f64,
    seed: u64,
    opts: &PermOptions,
) -> Result<PermutationResult, PermError> {
    let n1 = g1.len();
    let n2 = g2.len();
    for g in [g1, g2] {
        if g.len() < 2 {
            return Err(PermError::TooFewSubjects {
                group: g.group.clone(),
                got: g.len(),
            });
        }
    }
    let align = if opts.paired {
        Some(pair_alignment(g1, g2)?)
    } else {
        None
    };

    // pooled[0..n1] are group 1's fits; in paired mode pooled[n1 + align[i]]
    // is the partner of pooled[i]
    let pooled: Vec<&SubjectFit> = g1.fits.iter().chain(g2.fits.iter()).collect();

    let observed_stats = {
        let c1: Vec<Vec<f64>>;
        let c2: Vec<Vec<f64>>;
        if opts.redraw_observed {
            let mut rng = stream_rng(seed, 0);
            c1 = subject_curves(&pooled[..n1].to_vec(), spec, times, Some(&mut rng))?;
            c2 = subject_curves(&pooled[n1..].to_vec(), spec, times, Some(&mut rng))?;
        } else {
            c1 = subject_curves(&pooled[..n1].to_vec(), spec, times, None)?;
            c2 = subject_curves(&pooled[n1..].to_vec(), spec, times, None)?;
        }
        perm_stat_series(&c1, &c2, times.len())?
    };

    let assignments: Vec<Assignment> = if opts.exhaustive {
        if opts.paired {
            let bits = n1;
            (0..(1usize << bits))
                .map(|mask| Assignment::Flips((0..bits).map(|i| mask >> i & 1 == 1).collect()))
                .collect()
        } else {
            combinations(n1 + n2, n1)
                .into_iter()
                .map(|chosen| {
                    let mut rest: Vec<usize> =
                        (0..n1 + n2).filter(|i| !chosen.contains(i)).collect();
                    let mut order = chosen;
                    order.append(&mut rest);
                    Assignment::Partition(order)
                })
                .collect()
        }
    } else {
        (0..p_count)
            .map(|p| {
                let mut rng = stream_rng(seed, 1 + p as u64);
                if opts.paired {
                    Assignment::Flips(paired_flips(n1, &mut rng))
                } else {
                    Assignment::Partition(unpaired_partition(n1, n2, &mut rng))
                }
            })
            .collect()
    };

    let p_total = assignments.len();
    let mut null_max = Vec::with_capacity(p_total);
    for (p, assignment) in assignments.iter().enumerate() {
        let mut rng = stream_rng(seed, 1_000_000 + p as u64);
        let (idx1, idx2): (Vec<usize>, Vec<usize>) = match assignment {
            Assignment::Partition(order) => {
                (order[..n1].to_vec(), order[n1..].to_vec())
            }
            Assignment::Flips(flips) => {
                let align = align.as_ref().expect("paired mode");
                let mut a = Vec::with_capacity(n1);
                let mut b = Vec::with_capacity(n1);
                for (i, &flip) in flips.iter().enumerate() {
                    let partner = n1 + align[i];
                    if flip {
                        a.push(partner);
                        b.push(i);
                    } else {
                        a.push(i);
                        b.push(partner);
                    }
                }
                (a, b)
            }
        };
        let f1: Vec<&SubjectFit> = idx1.iter().map(|&i| pooled[i]).collect();
        let f2: Vec<&SubjectFit> = idx2.iter().map(|&i| pooled[i]).collect();
        let c1 = subject_curves(&f1, spec, times, Some(&mut rng))?;
        let c2 = subject_curves(&f2, spec, times, Some(&mut rng))?;
        let stats = perm_stat_series(&c1, &c2, times.len())?;
        null_max.push(stats.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    }

    let mut sorted = null_max.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // conservative empirical quantile: order statistic ceil((1 - alpha) * P)
    let rank = (((1.0 - alpha) * p_total as f64).ceil() as usize).clamp(1, p_total);
    let threshold = sorted[rank - 1];
    let significant: Vec<bool> = observed_stats.iter().map(|&t| t > threshold).collect();
    let obs_max = observed_stats.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let p_value_max =
        null_max.iter().filter(|&&m| m >= obs_max).count() as f64 / p_total as f64;

    Ok(PermutationResult {
        observed: TestStatSeries {
            times: times.to_vec(),
            stats: observed_stats,
            method: StatMethod::Permutation,
            paired: opts.paired,
        },
        null_max,
        threshold,
        significant,
        p_value_max,
    })
}
