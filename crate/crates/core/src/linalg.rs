//! Small iterative solvers shared by the integration and refinement stages.

use crate::scalar::{lit, Real};

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Conjugate gradients for a symmetric positive semi-definite operator given by `apply`.
///
/// Stops when `‖r‖ ≤ tol · ‖b‖` or after `max_iter` iterations; returns the solution, the
/// iteration count and the final relative residual.
pub fn conjugate_gradient<T: Real, F>(apply: F, b: &[T], x0: &[T], tol: T, max_iter: usize) -> (Vec<T>, usize, T)
where
    F: FnMut(&[T], &mut [T]),
{
    conjugate_gradient_observed(apply, b, x0, tol, max_iter, |_, _| {})
}

/// [`conjugate_gradient`] calling `observe(x, r)` with the iterate and its residual `b - A x`
/// after every step.
pub fn conjugate_gradient_observed<T: Real, F, O>(
    mut apply: F,
    b: &[T],
    x0: &[T],
    tol: T,
    max_iter: usize,
    mut observe: O,
) -> (Vec<T>, usize, T)
where
    F: FnMut(&[T], &mut [T]),
    O: FnMut(&[T], &[T]),
{
    let n = b.len();
    let mut x = x0.to_vec();
    let mut ax = vec![T::zero(); n];
    apply(&x, &mut ax);
    let mut r: Vec<T> = b.iter().zip(&ax).map(|(b, a)| *b - *a).collect();
    let bnorm = dot(b, b).sqrt().max(lit(1e-300));
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![T::zero(); n];
    let mut it = 0;
    while it < max_iter && rr.sqrt() > tol * bnorm {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let next = dot(&r, &r);
        let beta = next / rr;
        rr = next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        it += 1;
        observe(&x, &r);
    }
    (x, it, rr.sqrt() / bnorm)
}
