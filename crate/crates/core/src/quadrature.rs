//! One-dimensional quadrature used for coefficient integrals.

/// Composite Simpson on `[a, b]`, doubling the panel count until two
/// successive refinements agree to `rel_tol` (relative, with an absolute
/// floor of `1e-15`).
pub fn simpson_refined<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut panels = 2usize;
    let mut prev = simpson(&f, a, b, panels);
    for _ in 0..20 {
        panels *= 2;
        let next = simpson(&f, a, b, panels);
        if (next - prev).abs() <= rel_tol * next.abs().max(1e-15) {
            return next;
        }
        prev = next;
    }
    prev
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Recursive adaptive Simpson with Richardson correction.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson_refined(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 1e-12);
        assert_relative_eq!(v, 4.0 - 4.0 + 2.0, epsilon = 1e-13);
    }

    #[test]
    fn adaptive_handles_peaked_integrand() {
        let v = adaptive_simpson(|x| 1.0 / (1e-3 + x * x), -1.0, 1.0, 1e-12);
        let exact = 2.0 * (1.0 / 1e-3f64.sqrt()) * (1.0 / 1e-3f64.sqrt()).atan();
        assert_relative_eq!(v, exact, max_relative = 1e-9);
    }

    #[test]
    fn empty_interval() {
        assert_eq!(simpson_refined(|x| x, 1.0, 1.0, 1e-10), 0.0);
        assert_eq!(adaptive_simpson(|x| x, 1.0, 0.5, 1e-10), 0.0);
    }
}
