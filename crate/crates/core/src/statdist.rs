//! χ² constants calibrating the global filter: the quantile `c(α)`, the
//! truncated second-moment factor `q(α)` and `p(α) = 1 − α`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

const MAX_SERIES_ITER: usize = 5000;
const MAX_QUANTILE_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatError {
    #[error("chi-square argument must be nonnegative, got {0}")]
    NegativeArgument(f64),
    #[error("degrees of freedom must be at least 1")]
    ZeroDegrees,
    #[error("alpha must lie in [0, 1), got {0}")]
    AlphaRange(f64),
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
}

/// `ln Γ(m/2)` for a positive integer `m`, exact up to rounding.
fn ln_gamma_half<F: Scalar>(m: usize) -> F {
    let mut acc = F::zero();
    let mut a = F::of_usize(m) * F::of(0.5);
    let one = F::one();
    while a > one + F::of(0.25) {
        a -= one;
        acc += a.ln();
    }
    if m % 2 == 1 {
        acc + F::of(std::f64::consts::PI).sqrt().ln()
    } else {
        acc
    }
}

/// Regularized `P(a, z)` and `Q(a, z)` with `a = m/2`.
fn gamma_pq<F: Scalar>(m: usize, z: F) -> Result<(F, F), StatError> {
    let a = F::of_usize(m) * F::of(0.5);
    if z == F::zero() {
        return Ok((F::zero(), F::one()));
    }
    if z.is_infinite() {
        return Ok((F::one(), F::zero()));
    }
    let eps = F::epsilon();
    let log_prefix = a * z.ln() - z - ln_gamma_half::<F>(m);
    if z < a + F::one() {
        // P = e^{-z} z^a / Γ(a+1) · Σ z^k / ((a+1)···(a+k))
        let mut denom = a;
        let mut term = F::one() / a;
        let mut sum = term;
        for _ in 0..MAX_SERIES_ITER {
            denom += F::one();
            term *= z / denom;
            sum += term;
            if term.abs() < sum.abs() * eps {
                let p = (log_prefix.exp() * sum).min(F::one());
                return Ok((p, F::one() - p));
            }
        }
        Err(StatError::NoConvergence("incomplete gamma series"))
    } else {
        // Modified Lentz for the continued fraction of Q.
        let tiny = F::min_positive_value() / eps;
        let two = F::of(2.0);
        let mut b = z + F::one() - a;
        let mut c = F::one() / tiny;
        let mut d = F::one() / b;
        let mut frac = d;
        for i in 1..=MAX_SERIES_ITER {
            let fi = F::of_usize(i);
            let an = -fi * (fi - a);
            b += two;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = F::one() / d;
            let delta = d * c;
            frac *= delta;
            if (delta - F::one()).abs() < eps {
                let q = (log_prefix.exp() * frac).min(F::one());
                return Ok((F::one() - q, q));
            }
        }
        Err(StatError::NoConvergence("incomplete gamma continued fraction"))
    }
}

fn check_args<F: Scalar>(x: F, m: usize) -> Result<(), StatError> {
    if m == 0 {
        return Err(StatError::ZeroDegrees);
    }
    if !(x >= F::zero()) {
        return Err(StatError::NegativeArgument(x.as_f64()));
    }
    Ok(())
}

/// `P[χ²_m ≤ x]`.
pub fn chi2_cdf<F: Scalar>(x: F, m: usize) -> Result<F, StatError> {
    check_args(x, m)?;
    gamma_pq(m, x * F::of(0.5)).map(|(p, _)| p)
}

/// `P[χ²_m > x]`, accurate in the far tail.
pub fn chi2_sf<F: Scalar>(x: F, m: usize) -> Result<F, StatError> {
    check_args(x, m)?;
    gamma_pq(m, x * F::of(0.5)).map(|(_, q)| q)
}

pub fn chi2_pdf<F: Scalar>(x: F, m: usize) -> F {
    if !(x > F::zero()) {
        return match m {
            1 => F::infinity(),
            2 => F::of(0.5),
            _ => F::zero(),
        };
    }
    let a = F::of_usize(m) * F::of(0.5);
    ((a - F::one()) * x.ln() - x * F::of(0.5) - a * F::of(2.0).ln() - ln_gamma_half::<F>(m)).exp()
}

/// Standard normal quantile (Acklam's rational approximation, ~1e-9); only used as a starting point.
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0);
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// `c(α)`: the `(1 − α)`-quantile of `χ²_m`, `+∞` at `α = 0`.
pub fn threshold_constant<F: Scalar>(alpha: F, m: usize) -> Result<F, StatError> {
    if m == 0 {
        return Err(StatError::ZeroDegrees);
    }
    if !(alpha >= F::zero() && alpha < F::one()) {
        return Err(StatError::AlphaRange(alpha.as_f64()));
    }
    if alpha == F::zero() {
        return Ok(F::infinity());
    }
    // Solve on the smaller tail so the residual keeps full relative precision.
    let upper = alpha < F::of(0.5);
    let residual = |c: F| -> Result<F, StatError> {
        Ok(if upper { alpha - chi2_sf(c, m)? } else { chi2_cdf(c, m)? - (F::one() - alpha) })
    };

    let mf = m as f64;
    let z = normal_quantile(1.0 - alpha.as_f64());
    let k = 2.0 / (9.0 * mf);
    let wh = mf * (1.0 - k + z * k.sqrt()).powi(3);
    let mut c = F::of(if wh > 0.0 { wh } else { 0.5 * mf * (1.0 - alpha.as_f64()).powi(2) });

    let mut lo = F::zero();
    let mut hi = c.max(F::one());
    while residual(hi)? < F::zero() {
        lo = hi;
        hi = hi * F::of(2.0);
        if !hi.is_finite() {
            return Err(StatError::NoConvergence("chi-square quantile bracket"));
        }
    }
    let tol = F::of(1e-13).max(F::epsilon() * F::of(8.0));
    for _ in 0..MAX_QUANTILE_ITER {
        let r = residual(c)?;
        if r.abs() <= tol * if upper { alpha.max(F::epsilon()) } else { F::one() } {
            return Ok(c);
        }
        if r < F::zero() {
            lo = c;
        } else {
            hi = c;
        }
        // residual is increasing in c with slope equal to the density
        let slope = chi2_pdf(c, m);
        let newton = c - r / slope;
        c = if slope > F::zero() && newton > lo && newton < hi { newton } else { (lo + hi) * F::of(0.5) };
        if hi - lo <= F::epsilon() * hi * F::of(4.0) {
            return Ok(c);
        }
    }
    Err(StatError::NoConvergence("chi-square quantile"))
}

/// `q(α) = m⁻¹ E[V 1{V ≤ c(α)}]`, computed as `P[χ²_{m+2} ≤ c(α)]`.
pub fn truncation_factor<F: Scalar>(alpha: F, m: usize) -> Result<F, StatError> {
    let c = threshold_constant(alpha, m)?;
    if c.is_infinite() {
        return Ok(F::one());
    }
    chi2_cdf(c, m + 2)
}

/// χ² constants for one filter block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConstants<F> {
    pub alpha: F,
    pub m: usize,
    pub c: F,
    pub q: F,
    pub p: F,
}

impl<F: Scalar> TruncationConstants<F> {
    pub fn new(alpha: F, m: usize) -> Result<Self, StatError> {
        let c = threshold_constant(alpha, m)?;
        let q = if c.is_infinite() { F::one() } else { chi2_cdf(c, m + 2)? };
        Ok(Self { alpha, m, c, q, p: F::one() - alpha })
    }
}
