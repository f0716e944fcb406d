//! Normal and (noncentral) chi-square distribution functions.

use libm::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

const SERIES_TOL: f64 = 1e-10;
const QUANTILE_TOL: f64 = 1e-8;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Phi(x)`, accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile (Acklam's rational approximation refined by one Halley step).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Noncentral chi-square distribution with `df` degrees of freedom and
/// noncentrality `ncp` (`ncp = 0` gives the central distribution).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoncentralChiSquared {
    df: f64,
    ncp: f64,
}

impl NoncentralChiSquared {
    pub fn new(df: f64, ncp: f64) -> Result<Self> {
        if !(df > 0.0 && df.is_finite()) {
            return Err(Error::ParameterDomain(format!("chi-square df must be positive, got {df}")));
        }
        if !(ncp >= 0.0 && ncp.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "noncentrality must be nonnegative, got {ncp}"
            )));
        }
        Ok(Self { df, ncp })
    }

    pub fn df(&self) -> f64 {
        self.df
    }

    pub fn ncp(&self) -> f64 {
        self.ncp
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x.is_infinite() {
            return 1.0;
        }
        self.poisson_mixture(|a| gamma_lr(a, x / 2.0)).clamp(0.0, 1.0)
    }

    /// Survival function `1 - F(x)`, summed directly from upper incomplete gammas.
    pub fn sf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        if x.is_infinite() {
            return 0.0;
        }
        self.poisson_mixture(|a| gamma_ur(a, x / 2.0)).clamp(0.0, 1.0)
    }

    /// Sum of Poisson(ncp/2) weights times `term(df/2 + j)`, from the Poisson
    /// mode outwards until the neglected weight falls below the series tolerance.
    fn poisson_mixture(&self, term: impl Fn(f64) -> f64) -> f64 {
        let half_k = self.df / 2.0;
        if self.ncp == 0.0 {
            return term(half_k);
        }
        let mean = self.ncp / 2.0;
        let log_weight =
            |j: f64| -mean + j * mean.ln() - ln_gamma(j + 1.0);
        let mode = mean.floor();
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        let mut j = mode;
        loop {
            let w = log_weight(j).exp();
            total += w * term(half_k + j);
            weight_sum += w;
            if j == 0.0 || w < 1e-300 {
                break;
            }
            j -= 1.0;
        }
        let mut j = mode + 1.0;
        while 1.0 - weight_sum > SERIES_TOL * 0.5 {
            let w = log_weight(j).exp();
            total += w * term(half_k + j);
            weight_sum += w;
            j += 1.0;
            if j > mode + 1e6 {
                break;
            }
        }
        total
    }

    /// Quantile by monotone bisection on the CDF.
    pub fn quantile(&self, prob: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&prob) {
            if prob == 1.0 {
                return Ok(f64::INFINITY);
            }
            return Err(Error::ParameterDomain(format!("probability {prob} outside [0, 1)")));
        }
        if prob == 0.0 {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = self.df + self.ncp + 10.0 * (2.0 * (self.df + 2.0 * self.ncp)).sqrt() + 10.0;
        while self.cdf(hi) < prob {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi.max(1.0) {
                break;
            }
        }
        let x = 0.5 * (lo + hi);
        debug_assert!((self.cdf(x) - prob).abs() < QUANTILE_TOL);
        Ok(x)
    }
}

/// Upper quantile `chi^2_{df, 1 - alpha}(ncp)`.
pub fn chi_square_upper_quantile(df: f64, ncp: f64, alpha: f64) -> Result<f64> {
    NoncentralChiSquared::new(df, ncp)?.quantile(1.0 - alpha)
}
