//! Per-subject nonlinear least squares with optional AR(1) error structure.
//!
//! Each subject's observed series is fit to a curve family by damped
//! (Levenberg-Marquardt style) least squares. When AR(1) errors are
//! requested, the fit alternates between estimating the autocorrelation
//! coefficient from the current residuals and re-solving the least squares
//! problem on quasi-differenced (Prais-Winsten) observations.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{CurveError, CurveModel, CurveSpec};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("insufficient data: {got} observations, need at least {need}")]
    InsufficientData { got: usize, need: usize },
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// One subject's observed series in long format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub group: String,
    pub pair_id: Option<String>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SubjectSeries {
    pub fn validate(&self, n_params: usize) -> Result<(), FitError> {
        let need = n_params + 2;
        if self.times.len() < need {
            return Err(FitError::InsufficientData {
                got: self.times.len(),
                need,
            });
        }
        if self.times.len() != self.values.len() {
            return Err(FitError::InvalidSeries(format!(
                "times ({}) and values ({}) differ in length",
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FitError::InvalidSeries(
                "times must be strictly increasing".into(),
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(FitError::InvalidSeries("values must be finite".into()));
        }
        Ok(())
    }
}

/// Point estimates, standard errors, and diagnostics for one subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectFit {
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    /// AR(1) coefficient; 0 when AR(1) was disabled or the estimate was <= 0.
    pub phi_hat: f64,
    pub sigma_hat: f64,
    pub converged: bool,
    pub rss: f64,
    pub n_iter: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Starting values; defaults to [`init_params`].
    pub init: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            init: None,
        }
    }
}

const PHI_TOL: f64 = 1e-4;
const PHI_MAX_OUTER: usize = 25;
const PHI_CLIP: f64 = 0.99;

/// Lag-1 sample autocorrelation.
pub(crate) fn lag1_autocorr(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let denom: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if denom <= 0.0 {
        return 0.0;
    }
    let num: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    num / denom
}

/// Heuristic starting values for a series under the given family.
pub fn init_params(series: &SubjectSeries, spec: &CurveSpec) -> Result<Vec<f64>, FitError> {
    series.validate(spec.n_params())?;
    let t = &series.times;
    let y = &series.values;
    let n = y.len();
    match spec {
        CurveSpec::Logistic4 => {
            let k = (n / 10).max(1);
            let b = y[..k].iter().sum::<f64>() / k as f64;
            let p = y[n - k..].iter().sum::<f64>() / k as f64;
            let mid = (p + b) / 2.0;
            let range = t[n - 1] - t[0];
            // first time the series crosses the midpoint, falling back to the
            // middle of the window when it never does
            let rising = p >= b;
            let x = t
                .iter()
                .zip(y)
                .find(|(_, &v)| if rising { v >= mid } else { v <= mid })
                .map(|(&ti, _)| ti)
                .unwrap_or(t[0] + range / 2.0);
            let s = (p - b) / (0.5 * range);
            Ok(vec![p, b, s, x])
        }
        CurveSpec::PiecewiseLinear => {
            let pre: Vec<f64> = t
                .iter()
                .zip(y)
                .filter(|(&ti, _)| ti < 0.0)
                .map(|(_, &v)| v)
                .collect();
            let post: Vec<(f64, f64)> = t
                .iter()
                .zip(y)
                .filter(|(&ti, _)| ti >= 0.0)
                .map(|(&ti, &v)| (ti, v))
                .collect();
            let (slope, intercept) = if post.len() >= 2 {
                ls_line(&post)
            } else {
                (0.0, y.iter().sum::<f64>() / n as f64)
            };
            let b = if pre.is_empty() {
                intercept
            } else {
                pre.iter().sum::<f64>() / pre.len() as f64
            };
            Ok(vec![b, slope])
        }
    }
}

fn ls_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return (0.0, sy / n);
    }
    let slope = (n * sxy - sx * sy) / denom;
    (slope, (sy - slope * sx) / n)
}

/// Fits one subject's series, optionally alternating with AR(1)
/// quasi-differencing of the observations.
pub fn fit_subject(
    series: &SubjectSeries,
    spec: &dyn CurveModel,
    ar1: bool,
    opts: &FitOptions,
) -> Result<SubjectFit, FitError> {
    series.validate(spec.n_params())?;
    let theta0 = match &opts.init {
        Some(v) => {
            if v.len() != spec.n_params() {
                return Err(FitError::InvalidSeries(format!(
                    "initial guess has {} entries, expected {}",
                    v.len(),
                    spec.n_params()
                )));
            }
            v.clone()
        }
        None => {
            // shipped families get the heuristic; user families must supply init
            if let Some(cs) = spec_as_builtin(spec) {
                init_params(series, &cs)?
            } else {
                return Err(FitError::InvalidSeries(
                    "no initial guess available for this curve family".into(),
                ));
            }
        }
    };

    let mut theta = theta0;
    let mut phi = 0.0;
    let mut total_iter = 0;
    let mut converged = false;
    let mut last = None;

    let outer = if ar1 { PHI_MAX_OUTER } else { 1 };
    for _ in 0..outer {
        let (th, inner) = lm_minimize(series, spec, &theta, phi, opts)?;
        theta = th;
        total_iter += inner.n_iter;
        converged = inner.converged;
        last = Some(inner);
        if !ar1 {
            break;
        }
        let fitted: Result<Vec<f64>, _> =
            series.times.iter().map(|&t| spec.eval(&theta, t)).collect();
        let fitted = fitted?;
        let resid: Vec<f64> = series
            .values
            .iter()
            .zip(&fitted)
            .map(|(y, f)| y - f)
            .collect();
        let phi_new = lag1_autocorr(&resid).clamp(0.0, PHI_CLIP);
        if (phi_new - phi).abs() < PHI_TOL {
            phi = phi_new;
            break;
        }
        phi = phi_new;
    }

    let last = last.expect("at least one inner fit");
    // standard errors from the whitened normal matrix at the optimum
    let (_, jac) = whitened_problem(series, spec, &theta, phi)?;
    let jtj = jac.transpose() * &jac;
    let n = series.times.len();
    let dof = (n - spec.n_params()).max(1) as f64;
    let sigma2 = last.rss / dof;
    let chol = Cholesky::new(jtj).ok_or_else(|| {
        FitError::SingularJacobian("normal matrix is rank deficient at the optimum".into())
    })?;
    let cov = chol.inverse() * sigma2;
    let se: Vec<f64> = (0..spec.n_params()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    Ok(SubjectFit {
        theta_hat: theta,
        se,
        phi_hat: if ar1 { phi } else { 0.0 },
        sigma_hat: sigma2.sqrt(),
        converged,
        rss: last.rss,
        n_iter: total_iter,
    })
}

fn spec_as_builtin(spec: &dyn CurveModel) -> Option<CurveSpec> {
    CurveSpec::by_name(spec.name()).ok()
}

struct InnerFit {
    rss: f64,
    converged: bool,
    n_iter: usize,
}

/// Residual vector and Jacobian of the Prais-Winsten transformed problem.
/// With phi = 0 this is the identity transform.
fn whitened_problem(
    series: &SubjectSeries,
    spec: &dyn CurveModel,
    theta: &[f64],
    phi: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), FitError> {
    let n = series.times.len();
    let p = spec.n_params();
    let mut fitted = Vec::with_capacity(n);
    let mut jac_rows = Vec::with_capacity(n);
    for &t in &series.times {
        fitted.push(map_degenerate(spec.eval(theta, t))?);
        jac_rows.push(map_degenerate(spec.jacobian(theta, t))?);
    }
    let mut r = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, p);
    let w0 = (1.0 - phi * phi).sqrt();
    r[0] = w0 * (series.values[0] - fitted[0]);
    for j in 0..p {
        jac[(0, j)] = w0 * jac_rows[0][j];
    }
    for i in 1..n {
        r[i] = (series.values[i] - phi * series.values[i - 1]) - (fitted[i] - phi * fitted[i - 1]);
        for j in 0..p {
            jac[(i, j)] = jac_rows[i][j] - phi * jac_rows[i - 1][j];
        }
    }
    Ok((r, jac))
}

fn map_degenerate<T>(res: Result<T, CurveError>) -> Result<T, FitError> {
    res.map_err(|e| match e {
        CurveError::DegenerateParams(m) => FitError::SingularJacobian(m),
        other => FitError::Curve(other),
    })
}

fn lm_minimize(
    series: &SubjectSeries,
    spec: &dyn CurveModel,
    theta0: &[f64],
    phi: f64,
    opts: &FitOptions,
) -> Result<(Vec<f64>, InnerFit), FitError> {
    let p = spec.n_params();
    let mut theta = theta0.to_vec();
    let (mut r, mut jac) = whitened_problem(series, spec, &theta, phi)?;
    let mut rss = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iter = 0;

    while iter < opts.max_iter {
        iter += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        for j in 0..p {
            if jtj[(j, j)] <= 0.0 || !jtj[(j, j)].is_finite() {
                return Err(FitError::SingularJacobian(format!(
                    "parameter '{}' has no leverage on the residuals",
                    spec.param_names()[j]
                )));
            }
        }

        // try damped steps, growing lambda until one reduces the RSS
        let mut accepted = false;
        for _ in 0..25 {
            let mut a = jtj.clone();
            for j in 0..p {
                a[(j, j)] += lambda * jtj[(j, j)];
            }
            let delta = match Cholesky::new(a) {
                Some(ch) => ch.solve(&g),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            let trial_rss = match whitened_problem(series, spec, &trial, phi) {
                Ok((tr, _)) => tr.norm_squared(),
                Err(_) => f64::INFINITY,
            };
            if trial_rss.is_finite() && trial_rss <= rss {
                let step = delta.amax();
                let scale = theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                theta = trial;
                let improved = rss - trial_rss;
                rss = trial_rss;
                let (nr, nj) = whitened_problem(series, spec, &theta, phi)?;
                r = nr;
                jac = nj;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if step < opts.step_tol * (scale + opts.step_tol)
                    || improved < opts.step_tol * rss.max(1e-30)
                {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            // no productive step left: treat a tiny gradient-free plateau as done
            if !accepted {
                converged = (jac.transpose() * &r).amax() < opts.grad_tol * 1e3;
            }
            break;
        }
    }

    Ok((
        theta,
        InnerFit {
            rss,
            converged,
            n_iter: iter,
        },
    ))
}
