//! Small numeric kernels: monotone bisection and adaptive Simpson quadrature.

use crate::real::Real;

/// Finds `x` in `[lo, hi]` with `f(x) = target` for nondecreasing `f`.
///
/// Assumes `f(lo) <= target <= f(hi)`. Bisects until the bracket stops
/// shrinking in floating point or `max_iter` halvings have been done, and
/// returns the bracket endpoint whose value is closest to `target`.
pub fn bisect_nondecreasing<S: Real>(
    mut f: impl FnMut(S) -> S,
    target: S,
    mut lo: S,
    mut hi: S,
    max_iter: usize,
) -> S {
    let mut f_lo = f(lo) - target;
    let mut f_hi = f(hi) - target;
    for _ in 0..max_iter {
        let mid = lo + (hi - lo) * S::half();
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid) - target;
        if fm == S::zero() {
            return mid;
        }
        if fm < S::zero() {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
            f_hi = fm;
        }
    }
    if f_lo.abs() <= f_hi.abs() {
        lo
    } else {
        hi
    }
}

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<S: Real>(f: &impl Fn(S) -> S, a: S, b: S, tol: S, max_depth: u32) -> S {
    if a == b {
        return S::zero();
    }
    let fa = f(a);
    let fb = f(b);
    let m = (a + b) * S::half();
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    refine(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[inline]
fn simpson<S: Real>(a: S, b: S, fa: S, fm: S, fb: S) -> S {
    (b - a) / S::lit(6.0) * (fa + S::lit(4.0) * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine<S: Real>(
    f: &impl Fn(S) -> S,
    a: S,
    b: S,
    fa: S,
    fm: S,
    fb: S,
    whole: S,
    tol: S,
    depth: u32,
) -> S {
    let m = (a + b) * S::half();
    let lm = (a + m) * S::half();
    let rm = (m + b) * S::half();
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= S::lit(15.0) * tol {
        return left + right + delta / S::lit(15.0);
    }
    let half_tol = tol * S::half();
    refine(f, a, m, fa, flm, fm, left, half_tol, depth - 1)
        + refine(f, m, b, fm, frm, fb, right, half_tol, depth - 1)
}
