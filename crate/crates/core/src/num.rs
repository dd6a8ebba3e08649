//! Float helpers routed through `libm` so results do not depend on whether
//! `std` is linked.

pub(crate) use libm::{exp, log, log1p, pow, sqrt, tanh};

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    log(x)
}

#[inline]
pub(crate) fn powi(x: f64, n: i32) -> f64 {
    let mut acc = 1.0;
    let mut base = if n < 0 { 1.0 / x } else { x };
    let mut e = n.unsigned_abs();
    while e > 0 {
        if e & 1 == 1 {
            acc *= base;
        }
        base *= base;
        e >>= 1;
    }
    acc
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + log1p(exp(-x))
    } else {
        log1p(exp(x))
    }
}

/// `ln(sigmoid(x))`.
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}
