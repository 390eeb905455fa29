//! One-dimensional adaptive quadrature used for kernel normalization and the
//! diffusivity integral, plus radial-moment helpers.
//!
//! Two independent rules are provided: an adaptive Gauss–Kronrod (G7, K15)
//! scheme used on the production path, and a composite Simpson rule kept as a
//! cross-check oracle.

use crate::error::{NldError, Result};

// G7/K15 abscissae and weights on [-1, 1] (Kronrod 1965). The Gauss-7 nodes
// are the K15 nodes with odd index.
const XK: [f64; 15] = [
    -0.991455371120813,
    -0.949107912342759,
    -0.864864423359769,
    -0.741531185599394,
    -0.586087235467691,
    -0.405845151377397,
    -0.207784955007898,
    0.0,
    0.207784955007898,
    0.405845151377397,
    0.586087235467691,
    0.741531185599394,
    0.864864423359769,
    0.949107912342759,
    0.991455371120813,
];
const WK: [f64; 15] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
    0.204432940075298,
    0.190350578064785,
    0.169004726639267,
    0.140653259715525,
    0.104790010322250,
    0.063092092629979,
    0.022935322010529,
];
const WG: [f64; 7] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
    0.381830050505119,
    0.279705391489277,
    0.129484966168870,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    for (i, (&x, &wk)) in XK.iter().zip(WK.iter()).enumerate() {
        let v = f(mid + half * x);
        kronrod += wk * v;
        if i % 2 == 1 {
            gauss += WG[i / 2] * v;
        }
    }
    kronrod *= half;
    gauss *= half;
    // Standard QUADPACK-style error estimate exponent.
    let err = (200.0 * (kronrod - gauss).abs())
        .powf(1.5)
        .min((kronrod - gauss).abs());
    (kronrod, err)
}

fn adapt(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> Result<(f64, f64)> {
    let (val, err) = gk15(f, a, b);
    if err <= tol || (b - a).abs() < 1e-14 {
        return Ok((val, err));
    }
    if depth == 0 {
        return Err(NldError::Numerical(format!(
            "adaptive quadrature did not reach tolerance {tol:.3e} on [{a}, {b}]; achieved {err:.3e}"
        )));
    }
    let mid = 0.5 * (a + b);
    let (l, le) = adapt(f, a, mid, 0.5 * tol, depth - 1)?;
    let (r, re) = adapt(f, mid, b, 0.5 * tol, depth - 1)?;
    Ok((l + r, le + re))
}

/// Adaptive Gauss–Kronrod integral of `f` over `[a, b]` to absolute
/// tolerance `tol`.
pub fn integrate_adaptive(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    adapt(&f, a, b, tol, 48).map(|(v, _)| v)
}

/// Composite Simpson rule with `n` panels (`n` even). Independent of the
/// Gauss–Kronrod path; used as a second quadrature in tests.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let c = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += c * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Surface area of the unit sphere S^{N-1} in R^N.
pub fn unit_sphere_area(dim: usize) -> f64 {
    // 2 pi^{N/2} / Gamma(N/2), evaluated via the half-integer recurrence.
    let n = dim as f64;
    2.0 * std::f64::consts::PI.powf(n / 2.0) / gamma_half(dim)
}

/// Gamma(N/2) for integer N >= 1.
fn gamma_half(n: usize) -> f64 {
    match n {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (n as f64 / 2.0 - 1.0) * gamma_half(n - 2),
    }
}

/// Radial moment integral over R^N of |z|^k times a radial profile supported
/// on [0, radius]: `area(S^{N-1}) * Int_0^radius rho^{k + N - 1} profile(rho) d rho`.
pub fn radial_moment(
    profile: impl Fn(f64) -> f64,
    radius: f64,
    dim: usize,
    k: usize,
    tol: f64,
) -> Result<f64> {
    let p = (k + dim - 1) as i32;
    let v = integrate_adaptive(|r| r.powi(p) * profile(r), 0.0, radius, tol)?;
    Ok(unit_sphere_area(dim) * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let v = integrate_adaptive(|x| 3.0 * x * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 8.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_areas() {
        assert!((unit_sphere_area(2) - 2.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((unit_sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-13);
    }

    #[test]
    fn gauss_kronrod_matches_simpson() {
        let f = |x: f64| (-1.0 / (1.0 - x * x)).exp();
        let gk = integrate_adaptive(|x| f(x.min(1.0 - 1e-15)), 0.0, 1.0, 1e-12).unwrap();
        let s = simpson(|x| if x < 1.0 { f(x) } else { 0.0 }, 0.0, 1.0, 1 << 14);
        assert!((gk - s).abs() / gk.abs() < 1e-8);
    }

    // Uniform density on the unit ball in 3-d has diffusivity exactly 1/10:
    // (1/6) * (Int r^4) / (Int r^2) = (1/6)(1/5)/(1/3).
    #[test]
    fn uniform_ball_diffusivity_is_one_tenth() {
        let m4 = radial_moment(|_| 1.0, 1.0, 3, 2, 1e-12).unwrap();
        let m2 = radial_moment(|_| 1.0, 1.0, 3, 0, 1e-12).unwrap();
        let alpha = m4 / (2.0 * 3.0 * m2);
        assert!((alpha - 0.1).abs() < 1e-12, "alpha = {alpha}");
    }

    // The N = 3 closed form used by the mass-decay prefactor:
    // Int U_alpha(xi) |xi|^{-1} d xi = (pi alpha)^{-1/2}.
    #[test]
    fn gaussian_inverse_moment_closed_form() {
        for &alpha in &[0.0558478269954f64, 0.1, 0.02] {
            let c = (4.0 * std::f64::consts::PI * alpha).powf(-1.5);
            let quad = integrate_adaptive(
                |r| c * (-r * r / (4.0 * alpha)).exp() * r,
                0.0,
                60.0 * alpha.sqrt(),
                1e-14,
            )
            .unwrap()
                * 4.0
                * std::f64::consts::PI;
            let closed = (std::f64::consts::PI * alpha).powf(-0.5);
            assert!(
                (quad - closed).abs() / closed < 1e-8,
                "alpha={alpha}: {quad} vs {closed}"
            );
        }
    }

    #[test]
    fn tolerance_failure_reports() {
        // A genuinely nasty integrand with an impossible tolerance at depth 0
        // exercises the error path through the public API only indirectly;
        // here we call the internal adapt with zero depth budget.
        let err = adapt(&|x: f64| (1e6 * x).sin() / (x + 1e-3), 0.0, 1.0, 1e-300, 0);
        assert!(err.is_err());
    }
}
