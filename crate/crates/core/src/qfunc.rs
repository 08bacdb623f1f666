//! Gaussian tail function and its inverse.
//!
//! `q(x)` is the standard normal upper tail `P(N(0,1) > x)`. It is evaluated
//! with a power series near the origin and the Laplace continued fraction for
//! the Mills ratio in the tail, which keeps relative accuracy near machine
//! precision down to `q(x) ~ 1e-300`.
//!
//! `q_inverse` inverts `q` by bisection, so its accuracy only depends on `q`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::{Error, Result};

const SERIES_CUTOFF: f64 = 3.0;
const BRACKET: f64 = 38.0;
const BISECTION_WIDTH: f64 = 1e-12;

fn density(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `Phi(x) - 1/2 = phi(x) * sum_n x^(2n+1) / (2n+1)!!` for `x >= 0`.
fn central_mass(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        k += 2.0;
        term *= x2 / k;
        sum += term;
    }
    density(x) * sum
}

/// Mills ratio `q(x) / phi(x)` via modified Lentz on
/// `1 / (x + 1/(x + 2/(x + 3/(x + ...))))`.
fn mills_ratio(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..5000 {
        let a = k as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// Standard normal upper tail probability.
pub fn q(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 1.0 - q(-x);
    }
    if x < SERIES_CUTOFF {
        0.5 - central_mass(x)
    } else {
        density(x) * mills_ratio(x)
    }
}

/// Complementary error function, `erfc(z) = 2 q(z sqrt 2)`.
pub fn erfc(z: f64) -> f64 {
    2.0 * q(z / FRAC_1_SQRT_2)
}

/// Inverse of [`q`]: returns `x` with `q(x) = eps`.
///
/// ```
/// let x = lgqp::qfunc::q_inverse(0.5).unwrap();
/// assert!(x.abs() < 1e-10);
/// ```
pub fn q_inverse(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!(
            "q_inverse expects a probability in (0, 1), got {eps}"
        )));
    }
    let (mut lo, mut hi) = (-BRACKET, BRACKET);
    while hi - lo > BISECTION_WIDTH {
        let mid = 0.5 * (lo + hi);
        // q is decreasing
        if q(mid) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
