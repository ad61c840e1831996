//! Monte Carlo driver for the simulation studies: runs replicated scenario
//! draws, applies the requested detection methods to each replicate, and
//! aggregates family-wise error, per-comparison error, and power summaries.
//!
//! Replicates execute independently on a rayon pool; every random stream is
//! derived from (seed, replicate index), and results are folded in replicate
//! order, so reports are identical regardless of worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::CurveSpec;
use crate::fitting::{fit_subject, FitOptions, SubjectSeries};
use crate::inference::{adjust_alpha, estimate_rho, significant_intervals, InferError};
use crate::permutation::{permutation_test, PermError, PermOptions};
use crate::resampling::{
    diff_test_stats, het_bootstrap, hom_bootstrap, paired_diff_bootstrap, GroupFits,
    ResampleError, StatMethod,
};
use crate::seed::{derive_seed, stream_rng};
use crate::simgen::{
    scenario_fwer_logistic, scenario_power_piecewise, scenario_power_shift, ErrorConfig,
    LogisticDistConfig, PairedMode, PiecewiseEffectConfig, ScenarioData, ShiftConfig, SimError,
};

/// A replicate is abandoned and redrawn after this many attempts.
const MAX_ATTEMPTS: u64 = 20;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("replicate {replicate} failed {attempts} consecutive draws; last error: {last}")]
    ReplicateExhausted {
        replicate: usize,
        attempts: u64,
        last: String,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HomBoot,
    HetBoot,
    Perm,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::HomBoot => "hom_boot",
            Method::HetBoot => "het_boot",
            Method::Perm => "perm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    FwerLogistic,
    PowerPiecewise,
    PowerShift,
}

/// Uniform analysis grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridConfig {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl GridConfig {
    pub fn times(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start];
        }
        let step = (self.stop - self.start) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.start + step * i as f64).collect()
    }
}

fn default_true() -> bool {
    true
}
fn default_methods() -> Vec<Method> {
    vec![Method::HomBoot, Method::HetBoot, Method::Perm]
}
fn default_n_subjects() -> usize {
    25
}
fn default_replicates() -> usize {
    200
}
fn default_alpha() -> f64 {
    0.05
}
fn default_resamples() -> usize {
    1000
}
fn default_phi() -> f64 {
    0.8
}
fn default_sigma() -> f64 {
    0.025
}

/// One cell of the simulation factorial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub kind: ScenarioKind,
    #[serde(default = "default_true")]
    pub heterogeneous: bool,
    #[serde(default = "default_true")]
    pub ar1_error: bool,
    #[serde(default = "default_true")]
    pub ar1_fit: bool,
    #[serde(default)]
    pub paired: PairedMode,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_n_subjects")]
    pub n_subjects: usize,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resamples")]
    pub bootstrap_samples: usize,
    #[serde(default = "default_resamples")]
    pub permutations: usize,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub logistic: LogisticDistConfig,
    #[serde(default)]
    pub effect: PiecewiseEffectConfig,
    #[serde(default)]
    pub shift: Option<ShiftConfig>,
}

impl SimScenario {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty() {
            return Err(HarnessError::Config("no methods requested".into()));
        }
        if self.n_subjects < 2 {
            return Err(HarnessError::Config("n_subjects must be >= 2".into()));
        }
        if self.replicates == 0 {
            return Err(HarnessError::Config("replicates must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(HarnessError::Config("alpha must lie in (0, 1)".into()));
        }
        if self.paired != PairedMode::None && !self.heterogeneous {
            return Err(HarnessError::Config(
                "paired designs require heterogeneous subject parameters".into(),
            ));
        }
        if self.kind == ScenarioKind::PowerShift && self.shift.is_none() {
            return Err(HarnessError::Config(
                "power_shift scenarios need a shift config".into(),
            ));
        }
        if self.kind == ScenarioKind::PowerPiecewise && self.paired != PairedMode::None {
            return Err(HarnessError::Config(
                "piecewise scenarios have no paired variant".into(),
            ));
        }
        let g = self.grid_config();
        if g.points < 10 || !(g.stop > g.start) {
            return Err(HarnessError::Config("grid needs >= 10 increasing points".into()));
        }
        Ok(())
    }

    pub fn grid_config(&self) -> GridConfig {
        self.grid.unwrap_or(match self.kind {
            ScenarioKind::PowerPiecewise => GridConfig {
                start: -1.0,
                stop: 1.0,
                points: 401,
            },
            _ => GridConfig {
                start: 0.0,
                stop: 1600.0,
                points: 101,
            },
        })
    }

    fn error_config(&self) -> ErrorConfig {
        ErrorConfig {
            phi: if self.ar1_error { self.phi } else { 0.0 },
            sigma: self.sigma,
        }
    }

    fn curve_spec(&self) -> CurveSpec {
        match self.kind {
            ScenarioKind::PowerPiecewise => CurveSpec::PiecewiseLinear,
            _ => CurveSpec::Logistic4,
        }
    }

    fn is_paired(&self) -> bool {
        self.paired != PairedMode::None
    }
}

/// Power partition for one method: alpha_rate counts replicates with any
/// null-region detection, beta_rate those with no detection anywhere, and
/// power_rate the remainder (clean detections only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerSummary {
    pub alpha_rate: f64,
    pub beta_rate: f64,
    pub power_rate: f64,
    /// Onset quartiles (25/50/75) over the power_rate replicates; absent
    /// when no replicate qualifies.
    pub onset_quartiles: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    /// Fraction of replicates flagging any null-region time; absent when the
    /// scenario has no null region.
    pub fwer: Option<f64>,
    pub median_pcer: Option<f64>,
    /// Detection proportion at each grid time.
    pub per_time_rate: Vec<f64>,
    /// Present for power scenarios (nonempty effect region).
    pub power: Option<PowerSummary>,
}

/// Per-replicate, per-method record backing the per-replicate CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub method: Method,
    pub any_null_detection: bool,
    pub any_effect_detection: bool,
    pub onset: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub scenario: SimScenario,
    pub times: Vec<f64>,
    pub replicates_run: usize,
    /// Replicate draws abandoned for insufficient convergence or degenerate
    /// statistics.
    pub redraw_count: usize,
    /// Non-converged subject fits dropped across all retained replicates.
    pub dropped_subject_total: usize,
    pub methods: Vec<MethodReport>,
    pub replicate_rows: Vec<ReplicateRow>,
}

struct ReplicateOutcome {
    /// One significance mask per requested method, in `sc.methods` order.
    masks: Vec<Vec<bool>>,
    dropped_subjects: usize,
    redraws: usize,
}

fn fit_group(
    series: &[SubjectSeries],
    spec: &CurveSpec,
    ar1: bool,
) -> (Vec<crate::fitting::SubjectFit>, Vec<Option<String>>, usize) {
    let opts = FitOptions::default();
    let mut fits = Vec::with_capacity(series.len());
    let mut ids = Vec::with_capacity(series.len());
    let mut dropped = 0;
    for s in series {
        match fit_subject(s, spec, ar1, &opts) {
            Ok(f) if f.converged => {
                fits.push(f);
                ids.push(s.pair_id.clone());
            }
            _ => dropped += 1,
        }
    }
    (fits, ids, dropped)
}

/// Keeps only pairs present in both groups after convergence filtering.
fn intersect_pairs(
    fits1: &mut Vec<crate::fitting::SubjectFit>,
    ids1: &mut Vec<Option<String>>,
    fits2: &mut Vec<crate::fitting::SubjectFit>,
    ids2: &mut Vec<Option<String>>,
) {
    let set1: Vec<&String> = ids1.iter().flatten().collect();
    let set2: Vec<&String> = ids2.iter().flatten().collect();
    let keep = |id: &Option<String>, other: &[&String]| {
        id.as_ref().map(|i| other.contains(&i)).unwrap_or(false)
    };
    let keep1: Vec<bool> = ids1.iter().map(|id| keep(id, &set2)).collect();
    let keep2: Vec<bool> = ids2.iter().map(|id| keep(id, &set1)).collect();
    let filter = |fits: &mut Vec<crate::fitting::SubjectFit>,
                  ids: &mut Vec<Option<String>>,
                  keep: &[bool]| {
        let mut i = 0;
        fits.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        let mut i = 0;
        ids.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    };
    filter(fits1, ids1, &keep1);
    filter(fits2, ids2, &keep2);
}

#[derive(Debug, Error)]
enum AttemptError {
    #[error("only {kept} of {total} subjects converged")]
    TooFewConverged { kept: usize, total: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Perm(#[from] PermError),
    #[error(transparent)]
    Infer(#[from] InferError),
}

fn gen_data(
    sc: &SimScenario,
    times: &[f64],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ScenarioData, AttemptError> {
    let err = sc.error_config();
    let homogeneous = !sc.heterogeneous;
    let data = match sc.kind {
        ScenarioKind::FwerLogistic => scenario_fwer_logistic(
            &sc.logistic,
            sc.n_subjects,
            homogeneous,
            &sc.paired,
            &err,
            times,
            rng,
        )?,
        ScenarioKind::PowerPiecewise => {
            scenario_power_piecewise(&sc.effect, sc.n_subjects, homogeneous, &err, times, rng)?
        }
        ScenarioKind::PowerShift => scenario_power_shift(
            &sc.logistic,
            sc.shift.as_ref().expect("validated"),
            sc.n_subjects,
            sc.is_paired(),
            &err,
            times,
            rng,
        )?,
    };
    Ok(data)
}

fn method_mask(
    sc: &SimScenario,
    method: Method,
    g1: &GroupFits,
    g2: &GroupFits,
    times: &[f64],
    rep_seed: u64,
    stream: u64,
) -> Result<Vec<bool>, AttemptError> {
    let spec = sc.curve_spec();
    let b = sc.bootstrap_samples;
    match method {
        Method::HomBoot => {
            let s1 = hom_bootstrap(g1, &spec, times, b, derive_seed(rep_seed, stream))?;
            let s2 = hom_bootstrap(g2, &spec, times, b, derive_seed(rep_seed, stream + 1))?;
            let stats = diff_test_stats(&s1, &s2, StatMethod::Homogeneous, false)?;
            let rho = estimate_rho(&stats)?;
            let adj = adjust_alpha(sc.alpha, rho, times.len())?;
            Ok(significant_intervals(&stats, &adj).mask)
        }
        Method::HetBoot => {
            let stats = if sc.is_paired() {
                paired_diff_bootstrap(g1, g2, &spec, times, b, derive_seed(rep_seed, stream))?
            } else {
                let s1 = het_bootstrap(g1, &spec, times, b, derive_seed(rep_seed, stream), None)?;
                let s2 =
                    het_bootstrap(g2, &spec, times, b, derive_seed(rep_seed, stream + 1), None)?;
                diff_test_stats(&s1, &s2, StatMethod::Heterogeneous, false)?
            };
            let rho = estimate_rho(&stats)?;
            let adj = adjust_alpha(sc.alpha, rho, times.len())?;
            Ok(significant_intervals(&stats, &adj).mask)
        }
        Method::Perm => {
            let opts = PermOptions {
                paired: sc.is_paired(),
                ..PermOptions::default()
            };
            let result = permutation_test(
                g1,
                g2,
                &spec,
                times,
                sc.permutations,
                sc.alpha,
                derive_seed(rep_seed, stream),
                &opts,
            )?;
            Ok(result.significant)
        }
    }
}

fn run_attempt(
    sc: &SimScenario,
    times: &[f64],
    rep_seed: u64,
) -> Result<(Vec<Vec<bool>>, usize), AttemptError> {
    let mut rng = stream_rng(rep_seed, 0);
    let data = gen_data(sc, times, &mut rng)?;
    let spec = sc.curve_spec();
    let total = data.group1.len() + data.group2.len();
    let (mut fits1, mut ids1, d1) = fit_group(&data.group1, &spec, sc.ar1_fit);
    let (mut fits2, mut ids2, d2) = fit_group(&data.group2, &spec, sc.ar1_fit);
    if sc.is_paired() {
        intersect_pairs(&mut fits1, &mut ids1, &mut fits2, &mut ids2);
    }
    let kept = fits1.len() + fits2.len();
    if kept * 5 < total * 4 || fits1.len() < 2 || fits2.len() < 2 {
        return Err(AttemptError::TooFewConverged { kept, total });
    }
    let dropped = d1 + d2;
    let to_group = |group: &str, fits: Vec<crate::fitting::SubjectFit>, ids: Vec<Option<String>>| {
        let pair_ids = if sc.is_paired() {
            Some(ids.into_iter().flatten().collect())
        } else {
            None
        };
        GroupFits {
            group: group.to_string(),
            fits,
            pair_ids,
        }
    };
    let g1 = to_group("g1", fits1, ids1);
    let g2 = to_group("g2", fits2, ids2);
    let masks = sc
        .methods
        .iter()
        .enumerate()
        .map(|(k, &m)| method_mask(sc, m, &g1, &g2, times, rep_seed, 10 + 4 * k as u64))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((masks, dropped))
}

fn run_replicate(
    sc: &SimScenario,
    times: &[f64],
    replicate: usize,
) -> Result<ReplicateOutcome, HarnessError> {
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let rep_seed = derive_seed(sc.seed, replicate as u64 * MAX_ATTEMPTS + attempt);
        match run_attempt(sc, times, rep_seed) {
            Ok((masks, dropped)) => {
                return Ok(ReplicateOutcome {
                    masks,
                    dropped_subjects: dropped,
                    redraws: attempt as usize,
                })
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(HarnessError::ReplicateExhausted {
        replicate,
        attempts: MAX_ATTEMPTS,
        last,
    })
}

/// Fraction of replicates whose mask is true anywhere in the null region.
pub fn aggregate_fwer(masks: &[Vec<bool>], null_idx: &[usize]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    let hits = masks
        .iter()
        .filter(|m| null_idx.iter().any(|&i| m[i]))
        .count();
    hits as f64 / masks.len() as f64
}

/// Median over null-region times of the per-time false-positive proportion.
pub fn aggregate_median_pcer(masks: &[Vec<bool>], null_idx: &[usize]) -> f64 {
    if masks.is_empty() || null_idx.is_empty() {
        return 0.0;
    }
    let n = masks.len() as f64;
    let mut rates: Vec<f64> = null_idx
        .iter()
        .map(|&i| masks.iter().filter(|m| m[i]).count() as f64 / n)
        .collect();
    rates.sort_by(|a, b| a.total_cmp(b));
    let mid = rates.len() / 2;
    if rates.len() % 2 == 1 {
        rates[mid]
    } else {
        0.5 * (rates[mid - 1] + rates[mid])
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Power partition over replicates plus the per-time detection curve.
pub fn aggregate_power(
    masks: &[Vec<bool>],
    times: &[f64],
    null_idx: &[usize],
    effect_idx: &[usize],
) -> (PowerSummary, Vec<f64>) {
    let n = masks.len() as f64;
    let per_time: Vec<f64> = (0..times.len())
        .map(|i| masks.iter().filter(|m| m[i]).count() as f64 / n)
        .collect();
    let mut alpha_count = 0;
    let mut beta_count = 0;
    let mut onsets = Vec::new();
    for m in masks {
        let any_null = null_idx.iter().any(|&i| m[i]);
        let any_effect = effect_idx.iter().any(|&i| m[i]);
        if any_null {
            alpha_count += 1;
        } else if !any_effect {
            beta_count += 1;
        } else {
            let onset = effect_idx
                .iter()
                .copied()
                .find(|&i| m[i])
                .map(|i| times[i])
                .expect("effect detection present");
            onsets.push(onset);
        }
    }
    onsets.sort_by(|a, b| a.total_cmp(b));
    let onset_quartiles = if onsets.is_empty() {
        None
    } else {
        Some([
            quantile(&onsets, 0.25),
            quantile(&onsets, 0.5),
            quantile(&onsets, 0.75),
        ])
    };
    (
        PowerSummary {
            alpha_rate: alpha_count as f64 / n,
            beta_rate: beta_count as f64 / n,
            power_rate: onsets.len() as f64 / n,
            onset_quartiles,
        },
        per_time,
    )
}

fn regions(sc: &SimScenario, times: &[f64]) -> (Vec<usize>, Vec<usize>) {
    match sc.kind {
        ScenarioKind::FwerLogistic => ((0..times.len()).collect(), Vec::new()),
        ScenarioKind::PowerPiecewise => {
            let null = times
                .iter()
                .enumerate()
                .filter(|(_, &t)| t < 0.0)
                .map(|(i, _)| i)
                .collect();
            let effect = times
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= 0.0)
                .map(|(i, _)| i)
                .collect();
            (null, effect)
        }
        ScenarioKind::PowerShift => (Vec::new(), (0..times.len()).collect()),
    }
}

/// Runs every replicate of a scenario and aggregates the per-method metrics.
pub fn run_scenario(sc: &SimScenario) -> Result<SimReport, HarnessError> {
    sc.validate()?;
    let times = sc.grid_config().times();
    let outcomes: Vec<ReplicateOutcome> = (0..sc.replicates)
        .into_par_iter()
        .map(|r| run_replicate(sc, &times, r))
        .collect::<Result<Vec<_>, _>>()?;

    let (null_idx, effect_idx) = regions(sc, &times);
    let mut methods = Vec::with_capacity(sc.methods.len());
    let mut replicate_rows = Vec::new();
    for (k, &method) in sc.methods.iter().enumerate() {
        let masks: Vec<Vec<bool>> = outcomes.iter().map(|o| o.masks[k].clone()).collect();
        let (fwer, median_pcer) = if null_idx.is_empty() {
            (None, None)
        } else {
            (
                Some(aggregate_fwer(&masks, &null_idx)),
                Some(aggregate_median_pcer(&masks, &null_idx)),
            )
        };
        let (power, per_time_rate) = if effect_idx.is_empty() {
            let n = masks.len() as f64;
            let per_time = (0..times.len())
                .map(|i| masks.iter().filter(|m| m[i]).count() as f64 / n)
                .collect();
            (None, per_time)
        } else {
            let (summary, per_time) = aggregate_power(&masks, &times, &null_idx, &effect_idx);
            (Some(summary), per_time)
        };
        for (r, m) in masks.iter().enumerate() {
            let any_null = null_idx.iter().any(|&i| m[i]);
            let any_effect = effect_idx.iter().any(|&i| m[i]);
            let onset = if !any_null {
                effect_idx.iter().copied().find(|&i| m[i]).map(|i| times[i])
            } else {
                None
            };
            replicate_rows.push(ReplicateRow {
                replicate: r,
                method,
                any_null_detection: any_null,
                any_effect_detection: any_effect,
                onset,
            });
        }
        methods.push(MethodReport {
            method,
            fwer,
            median_pcer,
            per_time_rate,
            power,
        });
    }

    Ok(SimReport {
        schema_version: 1,
        scenario: sc.clone(),
        times,
        replicates_run: outcomes.len(),
        redraw_count: outcomes.iter().map(|o| o.redraws).sum(),
        dropped_subject_total: outcomes.iter().map(|o| o.dropped_subjects).sum(),
        methods,
        replicate_rows,
    })
}
