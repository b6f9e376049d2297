//! Scalar float helpers that work without `std`.

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn acos(x: f64) -> f64 {
    libm::acos(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(exp(-x))
    } else {
        libm::log1p(exp(x))
    }
}

/// `a + b = s + e` exactly.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `a · b = p + e` exactly (barring overflow and underflow).
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, libm::fma(a, b, -p))
}

/// Sign of the exact real sum of `terms`.
///
/// Builds a non-overlapping expansion of the sum; its most significant
/// component carries the sign.
pub fn exact_sum_sign(terms: &[f64]) -> core::cmp::Ordering {
    let mut exp: alloc::vec::Vec<f64> = alloc::vec::Vec::with_capacity(terms.len());
    for &t in terms {
        let mut q = t;
        let mut next = alloc::vec::Vec::with_capacity(exp.len() + 1);
        for &c in &exp {
            let (s, e) = two_sum(q, c);
            if e != 0.0 {
                next.push(e);
            }
            q = s;
        }
        next.push(q);
        exp = next;
    }
    let top = exp.iter().rev().find(|&&c| c != 0.0).copied().unwrap_or(0.0);
    top.partial_cmp(&0.0).unwrap_or(core::cmp::Ordering::Equal)
}
