//! Parametric mean-structure families and the generic curve-evaluation
//! contract shared by fitting, resampling, and simulation.
//!
//! Two families ship with the crate: the four-parameter logistic
//! ([`CurveSpec::Logistic4`]) and a piecewise linear function flat below
//! t = 0 ([`CurveSpec::PiecewiseLinear`]). Both have analytic Jacobians;
//! user-supplied families can rely on the finite-difference default of
//! [`CurveModel::jacobian`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("degenerate parameters: {0}")]
    DegenerateParams(String),
    #[error("degenerate parameters for subject {subject}: {message}")]
    DegenerateSubject { subject: usize, message: String },
    #[error("unknown curve family '{0}' (expected 'logistic4' or 'piecewise_linear')")]
    UnknownFamily(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    WrongArity { got: usize, expected: usize },
}

/// Evaluation contract every curve family satisfies.
///
/// `eval` must be deterministic and finite for in-bounds parameters; the
/// default `jacobian` uses central finite differences and may be overridden
/// with an analytic form.
pub trait CurveModel: Sync {
    fn name(&self) -> &str;
    fn n_params(&self) -> usize;
    fn param_names(&self) -> &[&str];

    /// Per-parameter `[lo, hi]` bounds, `None` when unbounded.
    fn param_bounds(&self) -> Option<Vec<[f64; 2]>> {
        None
    }

    fn eval(&self, params: &[f64], t: f64) -> Result<f64, CurveError>;

    /// Vector of partial derivatives of `eval` with respect to each parameter.
    fn jacobian(&self, params: &[f64], t: f64) -> Result<Vec<f64>, CurveError> {
        let mut out = Vec::with_capacity(self.n_params());
        let mut work = params.to_vec();
        for j in 0..self.n_params() {
            let h = 1e-6 * params[j].abs().max(1e-3);
            work[j] = params[j] + h;
            let hi = self.eval(&work, t)?;
            work[j] = params[j] - h;
            let lo = self.eval(&work, t)?;
            work[j] = params[j];
            out.push((hi - lo) / (2.0 * h));
        }
        Ok(out)
    }

    fn check_params(&self, params: &[f64]) -> Result<(), CurveError> {
        if params.len() != self.n_params() {
            return Err(CurveError::WrongArity {
                got: params.len(),
                expected: self.n_params(),
            });
        }
        Ok(())
    }
}

/// Four-parameter logistic: peak, baseline, slope at crossover, crossover time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logistic4Params {
    pub peak: f64,
    pub baseline: f64,
    pub slope: f64,
    pub crossover: f64,
}

impl Logistic4Params {
    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.peak, self.baseline, self.slope, self.crossover]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            peak: v[0],
            baseline: v[1],
            slope: v[2],
            crossover: v[3],
        }
    }
}

/// Piecewise linear: intercept, and slope applied for t >= 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseParams {
    pub baseline: f64,
    pub slope: f64,
}

impl PiecewiseParams {
    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.baseline, self.slope]
    }
}

/// The curve families selectable by name in configs and on the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveSpec {
    Logistic4,
    PiecewiseLinear,
}

impl CurveSpec {
    pub fn by_name(name: &str) -> Result<Self, CurveError> {
        match name {
            "logistic4" => Ok(CurveSpec::Logistic4),
            "piecewise_linear" => Ok(CurveSpec::PiecewiseLinear),
            other => Err(CurveError::UnknownFamily(other.to_string())),
        }
    }
}

/// Numerically stable logistic sigmoid 1/(1+e^-v).
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const MIN_PEAK_BASELINE_GAP: f64 = 1e-10;

impl CurveModel for CurveSpec {
    fn name(&self) -> &str {
        match self {
            CurveSpec::Logistic4 => "logistic4",
            CurveSpec::PiecewiseLinear => "piecewise_linear",
        }
    }

    fn n_params(&self) -> usize {
        match self {
            CurveSpec::Logistic4 => 4,
            CurveSpec::PiecewiseLinear => 2,
        }
    }

    fn param_names(&self) -> &[&str] {
        match self {
            CurveSpec::Logistic4 => &["peak", "baseline", "slope", "crossover"],
            CurveSpec::PiecewiseLinear => &["baseline", "slope"],
        }
    }

    fn eval(&self, params: &[f64], t: f64) -> Result<f64, CurveError> {
        self.check_params(params)?;
        match self {
            CurveSpec::Logistic4 => {
                let (p, b, s, x) = (params[0], params[1], params[2], params[3]);
                if (p - b).abs() < MIN_PEAK_BASELINE_GAP {
                    return Err(CurveError::DegenerateParams(format!(
                        "peak ({p}) equals baseline ({b})"
                    )));
                }
                // f = (p-b) / (1 + exp(4s(x-t)/(p-b))) + b
                let u = 4.0 * s * (x - t) / (p - b);
                Ok((p - b) * sigmoid(-u) + b)
            }
            CurveSpec::PiecewiseLinear => {
                let (b, m) = (params[0], params[1]);
                Ok(if t < 0.0 { b } else { m * t + b })
            }
        }
    }

    fn jacobian(&self, params: &[f64], t: f64) -> Result<Vec<f64>, CurveError> {
        self.check_params(params)?;
        match self {
            CurveSpec::Logistic4 => {
                let (p, b, s, x) = (params[0], params[1], params[2], params[3]);
                if (p - b).abs() < MIN_PEAK_BASELINE_GAP {
                    return Err(CurveError::DegenerateParams(format!(
                        "peak ({p}) equals baseline ({b})"
                    )));
                }
                let u = 4.0 * s * (x - t) / (p - b);
                let l = sigmoid(-u);
                // e^u / (1+e^u)^2, stable for large |u|
                let els = sigmoid(u) * l;
                Ok(vec![
                    l + u * els,
                    1.0 - l - u * els,
                    -4.0 * (x - t) * els,
                    -4.0 * s * els,
                ])
            }
            CurveSpec::PiecewiseLinear => Ok(vec![1.0, if t < 0.0 { 0.0 } else { t }]),
        }
    }
}

/// Evaluates one curve per parameter vector over a common time grid.
/// Row i, column j holds `spec.eval(params_list[i], times[j])`.
pub fn curve_matrix(
    spec: &dyn CurveModel,
    params_list: &[Vec<f64>],
    times: &[f64],
) -> Result<Vec<Vec<f64>>, CurveError> {
    params_list
        .iter()
        .enumerate()
        .map(|(i, params)| {
            times
                .iter()
                .map(|&t| {
                    spec.eval(params, t).map_err(|e| match e {
                        CurveError::DegenerateParams(message) => {
                            CurveError::DegenerateSubject { subject: i, message }
                        }
                        other => other,
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn logistic_at_crossover_is_midpoint() {
        let f = CurveSpec::Logistic4.eval(&[1.0, 0.0, 1.0, 0.0], 0.0).unwrap();
        assert_abs_diff_eq!(f, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn logistic_derivative_at_crossover_equals_slope() {
        // central finite differences of eval as the oracle
        let spec = CurveSpec::Logistic4;
        let theta = [1.0, 0.0, 1.0, 0.0];
        let h = 1e-6;
        let d = (spec.eval(&theta, h).unwrap() - spec.eval(&theta, -h).unwrap()) / (2.0 * h);
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn logistic_asymptotes() {
        let spec = CurveSpec::Logistic4;
        let theta = [0.9, 0.1, 0.002, 800.0];
        assert_abs_diff_eq!(spec.eval(&theta, 1e9).unwrap(), 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(spec.eval(&theta, -1e9).unwrap(), 0.1, epsilon = 1e-9);
    }

    #[test]
    fn logistic_rejects_equal_peak_and_baseline() {
        let err = CurveSpec::Logistic4.eval(&[0.5, 0.5, 1.0, 0.0], 0.0);
        assert!(matches!(err, Err(CurveError::DegenerateParams(_))));
    }

    #[test]
    fn logistic_swap_invariance() {
        // swapping peak and baseline flips both the numerator and the
        // exponent sign, so the curve is unchanged
        let spec = CurveSpec::Logistic4;
        for t in [-100.0, 0.0, 350.0, 800.0, 1600.0] {
            let a = spec.eval(&[0.9, 0.1, 0.002, 800.0], t).unwrap();
            let b = spec.eval(&[0.1, 0.9, 0.002, 800.0], t).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn piecewise_branches() {
        let spec = CurveSpec::PiecewiseLinear;
        assert_eq!(spec.eval(&[0.2, 0.25], -0.5).unwrap(), 0.2);
        assert_eq!(spec.eval(&[0.0, 0.25], 1.0).unwrap(), 0.25);
        assert_eq!(spec.eval(&[0.2, 0.25], 0.0).unwrap(), 0.2);
    }

    #[test]
    fn piecewise_continuous_at_zero() {
        let spec = CurveSpec::PiecewiseLinear;
        let left = spec.eval(&[0.3, 7.0], -1e-12).unwrap();
        let right = spec.eval(&[0.3, 7.0], 1e-12).unwrap();
        assert_abs_diff_eq!(left, right, epsilon = 1e-10);
    }

    #[test]
    fn curve_matrix_constant_curve() {
        let m = curve_matrix(&CurveSpec::PiecewiseLinear, &[vec![0.3, 0.0]], &[-1.0, 0.0, 1.0])
            .unwrap();
        assert_eq!(m, vec![vec![0.3, 0.3, 0.3]]);
    }

    #[test]
    fn curve_matrix_empty_params() {
        let m = curve_matrix(&CurveSpec::Logistic4, &[], &[0.0, 1.0]).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn curve_matrix_matches_pointwise_eval() {
        let spec = CurveSpec::Logistic4;
        let params = vec![vec![0.9, 0.1, 0.002, 800.0], vec![0.8, 0.2, 0.003, 600.0]];
        let times = [0.0, 400.0, 800.0, 1600.0];
        let m = curve_matrix(&spec, &params, &times).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &t) in times.iter().enumerate() {
                assert_eq!(row[j], spec.eval(&params[i], t).unwrap());
            }
        }
    }

    #[test]
    fn curve_matrix_attaches_subject_index() {
        let params = vec![vec![0.9, 0.1, 0.002, 800.0], vec![0.5, 0.5, 0.002, 800.0]];
        let err = curve_matrix(&CurveSpec::Logistic4, &params, &[0.0]).unwrap_err();
        assert!(matches!(err, CurveError::DegenerateSubject { subject: 1, .. }));
    }

    /// Analytic Jacobians agree with central finite differences of eval on
    /// 100 randomly sampled (params, t) pairs per family.
    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = crate::seed::stream_rng(20240801, 0);
        for _ in 0..100 {
            let theta = [
                rng.random_range(0.6..1.0),
                rng.random_range(0.0..0.4),
                rng.random_range(0.0005..0.01),
                rng.random_range(200.0..1400.0),
            ];
            let t = rng.random_range(0.0..1600.0);
            check_jac(&CurveSpec::Logistic4, &theta, t);

            let pw = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let t2 = rng.random_range(-1.0..1.0);
            check_jac(&CurveSpec::PiecewiseLinear, &pw, t2);
        }
    }

    fn check_jac(spec: &CurveSpec, theta: &[f64], t: f64) {
        let analytic = spec.jacobian(theta, t).unwrap();
        let mut work = theta.to_vec();
        for j in 0..theta.len() {
            let h = 1e-5 * theta[j].abs().max(1e-4);
            work[j] = theta[j] + h;
            let hi = spec.eval(&work, t).unwrap();
            work[j] = theta[j] - h;
            let lo = spec.eval(&work, t).unwrap();
            work[j] = theta[j];
            let fd = (hi - lo) / (2.0 * h);
            // deep in the tails both sides are ~0 and central differences
            // lose all precision; skip the relative comparison there
            if analytic[j].abs() < 1e-8 && fd.abs() < 1e-8 {
                continue;
            }
            let scale = analytic[j].abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic[j] - fd).abs() <= 1e-5 * scale + 1e-9,
                "{} param {} at t={}: analytic {} vs fd {}",
                spec.name(),
                j,
                t,
                analytic[j],
                fd
            );
        }
    }

    proptest! {
        #[test]
        fn logistic_swap_invariance_prop(
            p in 0.5f64..1.0,
            b in 0.0f64..0.45,
            s in 0.0005f64..0.01,
            x in 100.0f64..1500.0,
            t in 0.0f64..1600.0,
        ) {
            let spec = CurveSpec::Logistic4;
            let a = spec.eval(&[p, b, s, x], t).unwrap();
            let c = spec.eval(&[b, p, s, x], t).unwrap();
            prop_assert!((a - c).abs() < 1e-12);
        }

        #[test]
        fn logistic_monotone_when_slope_positive(
            x in 100.0f64..1500.0,
            t1 in 0.0f64..1600.0,
            dt in 1.0f64..200.0,
        ) {
            let spec = CurveSpec::Logistic4;
            let theta = [0.9, 0.1, 0.002, x];
            let a = spec.eval(&theta, t1).unwrap();
            let b = spec.eval(&theta, t1 + dt).unwrap();
            prop_assert!(b >= a);
        }
    }
}
