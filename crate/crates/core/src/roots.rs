//! Small scalar root-finding helpers shared by the profile inversion,
//! equilibrium and critical-rate code.

/// Bisection on a bracket where `f(lo)` and `f(hi)` have opposite signs.
///
/// Runs until the bracket stops shrinking in floating point or `max_iter`
/// halvings have been done, and returns the midpoint of the final bracket.
/// Returns `None` when the endpoints do not bracket a sign change.
pub fn bisect<F>(mut lo: f64, mut hi: f64, mut f: F, max_iter: usize) -> Option<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Some(lo);
    }
    if f_hi == 0.0 {
        return Some(hi);
    }
    if f_lo.signum() == f_hi.signum() || !f_lo.is_finite() || !f_hi.is_finite() {
        return None;
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo.min(hi) || mid >= lo.max(hi) {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Some(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Brent's method. Same bracket contract as [`bisect`], converges to `xtol`.
pub fn brent<F>(a: f64, b: f64, mut f: F, xtol: f64, max_iter: usize) -> Option<f64>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() || !fa.is_finite() || !fb.is_finite() {
        return None;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
    }
    Some(b)
}

/// Every sign change of `f` over `n` uniform subintervals of `[lo, hi]`,
/// each refined with Brent to `xtol`. Exact zeros on grid nodes are kept once.
pub fn scan_roots<F>(lo: f64, hi: f64, n: usize, mut f: F, xtol: f64) -> Vec<f64>
where
    F: FnMut(f64) -> f64,
{
    let n = n.max(1);
    let mut roots = Vec::new();
    let mut x_prev = lo;
    let mut f_prev = f(lo);
    if f_prev == 0.0 {
        roots.push(lo);
    }
    for k in 1..=n {
        let x = if k == n {
            hi
        } else {
            lo + (hi - lo) * (k as f64) / (n as f64)
        };
        let fx = f(x);
        if fx == 0.0 {
            roots.push(x);
        } else if f_prev != 0.0 && fx.signum() != f_prev.signum() {
            if let Some(r) = brent(x_prev, x, &mut f, xtol, 200) {
                roots.push(r);
            }
        }
        x_prev = x;
        f_prev = fx;
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisect_finds_sqrt_two() {
        let r = bisect(0.0, 2.0, |x| x * x - 2.0, 200).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn brent_matches_bisect_on_transcendental() {
        let f = |x: f64| x.cos() - x;
        let a = brent(0.0, 1.0, f, 1e-15, 100).unwrap();
        let b = bisect(0.0, 1.0, f, 200).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn no_bracket_is_none() {
        assert!(bisect(1.0, 2.0, |x| x * x + 1.0, 50).is_none());
        assert!(brent(1.0, 2.0, |x| x * x + 1.0, 1e-12, 50).is_none());
    }

    #[test]
    fn scan_finds_all_cubic_roots() {
        let roots = scan_roots(-3.0, 3.0, 600, |x| (x + 2.0) * (x - 0.5) * (x - 1.5), 1e-14);
        assert_eq!(roots.len(), 3);
        for (r, e) in roots.iter().zip([-2.0, 0.5, 1.5]) {
            assert!((r - e).abs() < 1e-12, "{r} vs {e}");
        }
    }
}
