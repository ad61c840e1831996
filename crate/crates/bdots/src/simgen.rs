//! Synthetic data generation for the FWER and power experiments: group-level
//! parameter draws, AR(1)/iid observation noise, paired constructions, and
//! the three scenario families.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{CurveModel, CurveSpec};
use crate::fitting::SubjectSeries;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("covariance matrix is not positive semi-definite")]
    NonPsdCovariance,
    #[error("dimension mismatch: mu has {mu} entries, covariance is {cov}x{cov2}")]
    DimensionMismatch { mu: usize, cov: usize, cov2: usize },
    #[error("unknown scenario kind '{0}'")]
    UnknownScenario(String),
    #[error(transparent)]
    Curve(#[from] crate::curves::CurveError),
}

/// Group-level parameter distribution N(mu, cov).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub mu: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GroupDistribution {
    /// Independent components with the given standard deviations.
    pub fn diagonal(mu: Vec<f64>, sd: &[f64]) -> Self {
        let d = mu.len();
        let mut cov = vec![vec![0.0; d]; d];
        for (j, s) in sd.iter().enumerate() {
            cov[j][j] = s * s;
        }
        Self { mu, cov }
    }

    fn factor(&self) -> Result<DMatrix<f64>, SimError> {
        let d = self.mu.len();
        if self.cov.len() != d || self.cov.iter().any(|r| r.len() != d) {
            return Err(SimError::DimensionMismatch {
                mu: d,
                cov: self.cov.len(),
                cov2: self.cov.first().map_or(0, |r| r.len()),
            });
        }
        let m = DMatrix::from_fn(d, d, |i, j| self.cov[i][j]);
        if m.iter().all(|v| *v == 0.0) {
            return Ok(DMatrix::zeros(d, d));
        }
        if let Some(ch) = Cholesky::new(m.clone()) {
            return Ok(ch.l());
        }
        // semi-definite fallback: spectral factor with tiny negatives clamped
        let eig = SymmetricEigen::new(m);
        let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        let tol = 1e-10 * max_ev.max(1.0);
        let mut sqrt_ev = eig.eigenvalues.clone();
        for v in sqrt_ev.iter_mut() {
            if *v < -tol {
                return Err(SimError::NonPsdCovariance);
            }
            *v = v.max(0.0).sqrt();
        }
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_ev))
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            mu: vec![0.0; self.mu.len()],
            cov: self
                .cov
                .iter()
                .map(|row| row.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

/// AR(1) observation-noise configuration; phi = 0 gives iid errors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ErrorConfig {
    pub phi: f64,
    pub sigma: f64,
}

/// How the second group's parameters relate to the first in paired designs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PairedMode {
    None,
    Identical,
    Noisy { noise_scale: f64 },
}

impl Default for PairedMode {
    fn default() -> Self {
        PairedMode::None
    }
}

fn mvn_draw(mu: &[f64], l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = mu.len();
    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    (0..d)
        .map(|i| mu[i] + (0..d).map(|j| l[(i, j)] * z[j]).sum::<f64>())
        .collect()
}

/// Draws per-subject parameter vectors. Under the homogeneous flag a single
/// draw is replicated for all n subjects.
pub fn draw_subject_params(
    dist: &GroupDistribution,
    n: usize,
    homogeneous: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, SimError> {
    let l = dist.factor()?;
    if homogeneous {
        let theta = mvn_draw(&dist.mu, &l, rng);
        Ok(vec![theta; n])
    } else {
        Ok((0..n).map(|_| mvn_draw(&dist.mu, &l, rng)).collect())
    }
}

/// Simulates one observed series: y_t = f(t|theta) + e_t with AR(1) errors
/// started from their stationary distribution.
pub fn gen_series(
    theta: &[f64],
    spec: &dyn CurveModel,
    times: &[f64],
    err: &ErrorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SubjectSeries, SimError> {
    let mut values = Vec::with_capacity(times.len());
    let mut eps = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let f = spec.eval(theta, t)?;
        if err.sigma > 0.0 {
            if i == 0 {
                let s0 = err.sigma / (1.0 - err.phi * err.phi).sqrt();
                let z: f64 = StandardNormal.sample(rng);
                eps = s0 * z;
            } else {
                let w: f64 = StandardNormal.sample(rng);
                eps = err.phi * eps + err.sigma * w;
            }
        }
        values.push(f + eps);
    }
    Ok(SubjectSeries {
        subject_id: String::new(),
        group: String::new(),
        pair_id: None,
        times: times.to_vec(),
        values,
    })
}

fn label(series: &mut [SubjectSeries], group: &str, paired: bool) {
    for (i, s) in series.iter_mut().enumerate() {
        s.subject_id = format!("{group}_s{i}");
        s.group = group.to_string();
        if paired {
            s.pair_id = Some(format!("p{i}"));
        }
    }
}

/// Generates two paired groups sharing pair ids: group 2's parameters equal
/// group 1's (identical mode) or get zero-mean noise with covariance
/// noise_scale * V (noisy mode). Error realizations are independent.
pub fn gen_paired_groups(
    dist: &GroupDistribution,
    n: usize,
    mode: &PairedMode,
    spec: &dyn CurveModel,
    times: &[f64],
    err: &ErrorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SubjectSeries>, Vec<SubjectSeries>), SimError> {
    let params1 = draw_subject_params(dist, n, false, rng)?;
    let params2: Vec<Vec<f64>> = match mode {
        PairedMode::None => {
            return Err(SimError::UnknownScenario("paired mode is none".into()))
        }
        PairedMode::Identical => params1.clone(),
        PairedMode::Noisy { noise_scale } => {
            let noise_dist = dist.scaled(*noise_scale);
            let l = noise_dist.factor()?;
            params1
                .iter()
                .map(|p| {
                    let d = mvn_draw(&noise_dist.mu, &l, rng);
                    p.iter().zip(&d).map(|(a, b)| a + b).collect()
                })
                .collect()
        }
    };
    let mut g1 = Vec::with_capacity(n);
    let mut g2 = Vec::with_capacity(n);
    for p in &params1 {
        g1.push(gen_series(p, spec, times, err, rng)?);
    }
    for p in &params2 {
        g2.push(gen_series(p, spec, times, err, rng)?);
    }
    label(&mut g1, "g1", true);
    label(&mut g2, "g2", true);
    Ok((g1, g2))
}

/// Default logistic generating distribution: curves rising from ~0.1 to ~0.9
/// over t in [0, 1600], independent components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogisticDistConfig {
    pub mu: [f64; 4],
    pub sd: [f64; 4],
}

impl Default for LogisticDistConfig {
    fn default() -> Self {
        Self {
            mu: [0.9, 0.1, 0.006, 720.0],
            sd: [0.06, 0.04, 0.0012, 160.0],
        }
    }
}

impl LogisticDistConfig {
    pub fn to_distribution(&self) -> GroupDistribution {
        GroupDistribution::diagonal(self.mu.to_vec(), &self.sd)
    }
}

/// Piecewise power-study settings: "Effect" group slope distribution and the
/// per-subject parameter spreads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PiecewiseEffectConfig {
    pub slope_mean: f64,
    pub sigma_b: f64,
    pub sigma_m: f64,
}

impl Default for PiecewiseEffectConfig {
    fn default() -> Self {
        Self {
            slope_mean: 0.25,
            sigma_b: 0.05,
            sigma_m: 0.05,
        }
    }
}

/// Crossover-shift power-study settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub shift: f64,
    pub crossover_sd: f64,
}

/// Generated data for one replicate: the two groups and their common grid.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub group1: Vec<SubjectSeries>,
    pub group2: Vec<SubjectSeries>,
}

/// Null scenario: both groups share one logistic generating distribution.
/// Under the homogeneous flag a single parameter draw is shared by every
/// subject in both groups so the null holds exactly.
pub fn scenario_fwer_logistic(
    dist_cfg: &LogisticDistConfig,
    n: usize,
    homogeneous: bool,
    paired: &PairedMode,
    err: &ErrorConfig,
    times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<ScenarioData, SimError> {
    let spec = CurveSpec::Logistic4;
    let dist = dist_cfg.to_distribution();
    if *paired != PairedMode::None {
        let (group1, group2) = gen_paired_groups(&dist, n, paired, &spec, times, err, rng)?;
        return Ok(ScenarioData { group1, group2 });
    }
    let (params1, params2) = if homogeneous {
        let theta = draw_subject_params(&dist, 1, false, rng)?.remove(0);
        (vec![theta.clone(); n], vec![theta; n])
    } else {
        (
            draw_subject_params(&dist, n, false, rng)?,
            draw_subject_params(&dist, n, false, rng)?,
        )
    };
    let mut group1 = Vec::with_capacity(n);
    let mut group2 = Vec::with_capacity(n);
    for p in &params1 {
        group1.push(gen_series(p, &spec, times, err, rng)?);
    }
    for p in &params2 {
        group2.push(gen_series(p, &spec, times, err, rng)?);
    }
    label(&mut group1, "g1", false);
    label(&mut group2, "g2", false);
    Ok(ScenarioData { group1, group2 })
}

/// Piecewise power scenario on (-1, 1): the "No Effect" group has slope 0,
/// the "Effect" group draws its slope around `slope_mean`. The baseline is
/// shared between the groups in the homogeneous case so the t < 0 null holds
/// exactly.
pub fn scenario_power_piecewise(
    eff: &PiecewiseEffectConfig,
    n: usize,
    homogeneous: bool,
    err: &ErrorConfig,
    times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<ScenarioData, SimError> {
    let spec = CurveSpec::PiecewiseLinear;
    let (params_none, params_eff): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if homogeneous {
        let zb: f64 = StandardNormal.sample(rng);
        let zm: f64 = StandardNormal.sample(rng);
        let b = eff.sigma_b * zb;
        let m = eff.slope_mean + eff.sigma_m * zm;
        (vec![vec![b, 0.0]; n], vec![vec![b, m]; n])
    } else {
        let draw_b = |rng: &mut ChaCha8Rng| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            eff.sigma_b * z
        };
        let none = (0..n).map(|_| vec![draw_b(rng), 0.0]).collect();
        let effect = (0..n)
            .map(|_| {
                let b = draw_b(rng);
                let z: f64 = StandardNormal.sample(rng);
                vec![b, eff.slope_mean + eff.sigma_m * z]
            })
            .collect();
        (none, effect)
    };
    let mut group1 = Vec::with_capacity(n);
    let mut group2 = Vec::with_capacity(n);
    for p in &params_none {
        group1.push(gen_series(p, &spec, times, err, rng)?);
    }
    for p in &params_eff {
        group2.push(gen_series(p, &spec, times, err, rng)?);
    }
    label(&mut group1, "no_effect", false);
    label(&mut group2, "effect", false);
    Ok(ScenarioData { group1, group2 })
}

/// Crossover-shift power scenario: group 2's crossover mean is shifted, and
/// both groups use the configured crossover standard deviation. In the paired
/// variant group 2's parameters equal group 1's plus the shift.
pub fn scenario_power_shift(
    dist_cfg: &LogisticDistConfig,
    shift_cfg: &ShiftConfig,
    n: usize,
    paired: bool,
    err: &ErrorConfig,
    times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<ScenarioData, SimError> {
    let spec = CurveSpec::Logistic4;
    let mut base = *dist_cfg;
    base.sd[3] = shift_cfg.crossover_sd;
    let dist1 = base.to_distribution();

    let (params1, params2): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if paired {
        let p1 = draw_subject_params(&dist1, n, false, rng)?;
        let p2 = p1
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q[3] += shift_cfg.shift;
                q
            })
            .collect();
        (p1, p2)
    } else {
        let mut shifted = base;
        shifted.mu[3] += shift_cfg.shift;
        let dist2 = shifted.to_distribution();
        (
            draw_subject_params(&dist1, n, false, rng)?,
            draw_subject_params(&dist2, n, false, rng)?,
        )
    };
    let mut group1 = Vec::with_capacity(n);
    let mut group2 = Vec::with_capacity(n);
    for p in &params1 {
        group1.push(gen_series(p, &spec, times, err, rng)?);
    }
    for p in &params2 {
        group2.push(gen_series(p, &spec, times, err, rng)?);
    }
    label(&mut group1, "g1", paired);
    label(&mut group2, "g2", paired);
    Ok(ScenarioData { group1, group2 })
}
