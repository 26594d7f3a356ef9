//! Dense vector helpers over `[S]`. Dimensions are tiny, so plain slices are enough.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

pub fn zeros<S: Scalar>(d: usize) -> Vec<S> {
    vec![S::zero(); d]
}

pub fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sub<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn scale<S: Scalar>(a: &[S], k: S) -> Vec<S> {
    a.iter().map(|&x| x * k).collect()
}

/// `y += k * x`
pub fn axpy<S: Scalar>(y: &mut [S], k: S, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// `ka * a + kb * b`
pub fn lincomb<S: Scalar>(ka: S, a: &[S], kb: S, b: &[S]) -> Vec<S> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| ka * x + kb * y).collect()
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

pub fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub fn dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    sq_dist(a, b).sqrt()
}

pub fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(S::zero(), S::max)
}

pub fn all_finite<S: Scalar>(a: &[S]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// `log(sum(exp(v)))` with max subtraction; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    let s: S = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Draws a standard normal vector of length `d`.
pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<S> {
    (0..d)
        .map(|_| S::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}
