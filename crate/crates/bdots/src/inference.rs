//! Converts a bootstrap test-statistic series into significant time
//! intervals.
//!
//! Adjacent statistics on a dense grid are highly correlated; modeling the
//! sequence as AR(1) with lag-1 correlation rho, the per-test level alpha*
//! is chosen so that the chain probability of no exceedance across the grid
//! equals 1 - alpha. The conditional no-exceedance probability comes from a
//! bivariate normal rectangle computed with the Drezner-Wesolowsky/Genz
//! quadrature (absolute accuracy well below 1e-7).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::resampling::TestStatSeries;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("statistic series has {0} entries; need at least 10 to estimate rho")]
    SeriesTooShort(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("root solve for alpha* failed to bracket the target FWER")]
    NoRoot,
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
}

/// Per-test nominal level alpha* that yields the target family-wise alpha
/// under an AR(1) model of the statistic sequence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdjustedAlpha {
    pub alpha: f64,
    pub alpha_star: f64,
    pub rho: f64,
    pub t_count: usize,
}

/// Significance mask and its maximal contiguous runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceReport {
    /// Critical value z_{1 - alpha*/2}.
    pub threshold: f64,
    pub mask: Vec<bool>,
    /// Maximal runs of significant grid times, as [start, end] pairs.
    pub intervals: Vec<[f64; 2]>,
}

/// Standard normal CDF.
fn phid(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn z_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

// Gauss-Legendre points and weights from the Drezner-Wesolowsky/Genz
// bivariate normal routine.
const QUAD_6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];
const QUAD_12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];
const QUAD_20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

/// P(X > dh, Y > dk) for standard bivariate normals with correlation r.
fn bvnd(dh: f64, dk: f64, r: f64) -> f64 {
    let frac_1_2pi = 1.0 / std::f64::consts::TAU;
    let sqrt_2pi = std::f64::consts::TAU.sqrt();
    let h = dh;
    let mut k = dk;
    let hk = h * k;
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &QUAD_6
    } else if r.abs() < 0.75 {
        &QUAD_12
    } else {
        &QUAD_20
    };
    let mut bvn = 0.0;

    if r.abs() <= 0.925 {
        if r.abs() > 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = 0.5 * r.asin();
            for (w, x) in quad {
                for is in [-1.0, 1.0] {
                    let sn = (asr * (is * x + 1.0)).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr * frac_1_2pi;
        }
        bvn + phid(-h) * phid(-k)
    } else {
        if r < 0.0 {
            k = -k;
        }
        if r.abs() < 1.0 {
            let hk = if r < 0.0 { -hk } else { hk };
            let a_s = (1.0 - r) * (1.0 + r);
            let mut a = a_s.sqrt();
            let b_s = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -0.5 * (b_s / a_s + hk);
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                        + c * d * (a_s * a_s) / 5.0);
            }
            if -hk < 100.0 {
                let b = b_s.sqrt();
                bvn -= (-0.5 * hk).exp()
                    * sqrt_2pi
                    * phid(-b / a)
                    * b
                    * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
            }
            a /= 2.0;
            for (w, x) in quad {
                for is in [-1.0, 1.0] {
                    let x = a * (is * x + 1.0);
                    let x_s = x * x;
                    let r_s = (1.0 - x_s).sqrt();
                    let asr = -0.5 * (b_s / x_s + hk);
                    if asr > -100.0 {
                        bvn += a
                            * w
                            * asr.exp()
                            * ((-hk * (1.0 - r_s) / (2.0 * (1.0 + r_s))).exp() / r_s
                                - (1.0 + c * x_s * (1.0 + d * x_s)));
                    }
                }
            }
            bvn *= -frac_1_2pi;
        }
        if r > 0.0 {
            bvn + phid(-h.max(k))
        } else {
            bvn = -bvn;
            if k > h {
                bvn += phid(k) - phid(h);
            }
            bvn
        }
    }
}

/// P(X <= h, Y <= k) for a standard bivariate normal with correlation rho.
pub fn bvn_rect_prob(h: f64, k: f64, rho: f64) -> f64 {
    if !(-1.0..=1.0).contains(&rho) {
        panic!("correlation {rho} outside [-1, 1]");
    }
    if h == f64::NEG_INFINITY || k == f64::NEG_INFINITY {
        return 0.0;
    }
    if h == f64::INFINITY {
        return if k == f64::INFINITY { 1.0 } else { phid(k) };
    }
    if k == f64::INFINITY {
        return phid(h);
    }
    if rho >= 1.0 {
        return phid(h.min(k));
    }
    if rho <= -1.0 {
        return (phid(h) + phid(k) - 1.0).max(0.0);
    }
    bvnd(-h, -k, rho).clamp(0.0, 1.0)
}

/// P(|X| <= z, |Y| <= z) for correlation rho.
fn central_rect(z: f64, rho: f64) -> f64 {
    // assemble from the four corner CDF evaluations
    let a = bvn_rect_prob(z, z, rho);
    let b = bvn_rect_prob(z, -z, rho);
    let c = bvn_rect_prob(-z, -z, rho);
    (a - 2.0 * b + c).clamp(0.0, 1.0)
}

/// Lag-1 sample autocorrelation of the statistic sequence, clipped to
/// [0, 0.999].
pub fn estimate_rho(stats: &TestStatSeries) -> Result<f64, InferError> {
    if stats.stats.len() < 10 {
        return Err(InferError::SeriesTooShort(stats.stats.len()));
    }
    Ok(crate::fitting::lag1_autocorr(&stats.stats).clamp(0.0, 0.999))
}

fn fwer_at(alpha_star: f64, rho: f64, t_count: usize) -> f64 {
    let z = z_quantile(1.0 - alpha_star / 2.0);
    let p1 = 1.0 - alpha_star;
    let cond = (central_rect(z, rho) / p1).min(1.0);
    1.0 - p1 * cond.powi(t_count as i32 - 1)
}

/// Solves for the per-test alpha* whose chain FWER equals `alpha`.
pub fn adjust_alpha(alpha: f64, rho: f64, t_count: usize) -> Result<AdjustedAlpha, InferError> {
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(InferError::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    if t_count == 0 {
        return Err(InferError::InvalidInput("t_count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(InferError::InvalidInput(format!("rho {rho} outside [0, 1]")));
    }
    if t_count == 1 || rho >= 1.0 {
        return Ok(AdjustedAlpha {
            alpha,
            alpha_star: alpha,
            rho,
            t_count,
        });
    }
    let mut lo = 1e-12;
    let mut hi = alpha;
    if fwer_at(hi, rho, t_count) < alpha - 1e-8 {
        return Err(InferError::NoRoot);
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let f = fwer_at(mid, rho, t_count);
        if (f - alpha).abs() <= 1e-9 {
            break;
        }
        if f > alpha {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    if (fwer_at(mid, rho, t_count) - alpha).abs() > 1e-8 {
        return Err(InferError::NoRoot);
    }
    Ok(AdjustedAlpha {
        alpha,
        alpha_star: mid,
        rho,
        t_count,
    })
}

/// Thresholds |T_t| at z_{1 - alpha*/2} and extracts maximal significant runs.
pub fn significant_intervals(
    stats: &TestStatSeries,
    adj: &AdjustedAlpha,
) -> SignificanceReport {
    let threshold = z_quantile(1.0 - adj.alpha_star / 2.0);
    let mask: Vec<bool> = stats.stats.iter().map(|t| t.abs() > threshold).collect();
    SignificanceReport {
        threshold,
        intervals: intervals_from_mask(&stats.times, &mask),
        mask,
    }
}

/// Maximal contiguous true runs of `mask`, as [first, last] grid times.
pub fn intervals_from_mask(times: &[f64], mask: &[bool]) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push([times[s], times[i - 1]]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push([times[s], times[mask.len() - 1]]);
    }
    out
}

/// Maps each p-value to the FWER that would make it exactly critical under
/// the AR(1) chain with the given rho; T is the series length.
pub fn p_adjust(p_values: &[f64], rho: f64) -> Result<Vec<f64>, InferError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(InferError::InvalidInput(format!("rho {rho} outside [0, 1]")));
    }
    let t_count = p_values.len();
    p_values
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(InferError::InvalidPValue(p));
            }
            if rho >= 1.0 || t_count <= 1 {
                return Ok(p);
            }
            if p <= 0.0 {
                return Ok(0.0);
            }
            if p >= 1.0 {
                return Ok(1.0);
            }
            Ok(fwer_at(p, rho, t_count).clamp(0.0, 1.0))
        })
        .collect()
}
