//! The regular part omega of the fundamental solution `F = e^{-t} delta +
//! omega`, computed two independent ways (spectral exponential and truncated
//! power series), the Gaussian comparison profile, and the estimate checks
//! used by the far-field analysis.
//!
//! The Dirac atom of F is never discretized; anything that needs F adds the
//! `e^{-t} * identity` action analytically.

use std::sync::Arc;

use rustfft::num_complex::Complex64;

use crate::error::{NldError, Result};
use crate::fft;
use crate::kernel::{convolve, DiscreteKernel};
use crate::lattice::{Field, Grid, NeumaierSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaMethod {
    Spectral,
    Series,
}

/// One time slice of omega as a density field on the box.
#[derive(Debug, Clone)]
pub struct OmegaSlice {
    pub field: Field,
    pub t: f64,
    pub method: OmegaMethod,
    pub series_terms: Option<usize>,
    /// Total discrete mass over the padded grid; equals `1 - e^{-t}` up to
    /// the construction tolerance.
    pub integral: f64,
    pub min_value: f64,
    pub max_value: f64,
}

impl OmegaSlice {
    fn validate(self, integral_tol: f64) -> Result<OmegaSlice> {
        let expect = -(-self.t).exp_m1(); // 1 - e^{-t}, accurately
        if (self.integral - expect).abs() > integral_tol {
            return Err(NldError::Numerical(format!(
                "omega mass {:.15e} deviates from 1 - e^-t = {:.15e} by more than {integral_tol:.1e}",
                self.integral, expect
            )));
        }
        if self.min_value < -1e-10 * self.max_value.abs() {
            return Err(NldError::Numerical(format!(
                "omega minimum {:.3e} below the nonnegativity allowance (max {:.3e})",
                self.min_value, self.max_value
            )));
        }
        Ok(self)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(NldError::Domain(format!(
            "omega is defined for t > 0 (got {t})"
        )));
    }
    Ok(())
}

fn grid_matches(dk: &DiscreteKernel, grid: &Arc<Grid>) -> Result<()> {
    if dk.grid().as_ref() != grid.as_ref() {
        return Err(NldError::GridMismatch(
            "kernel was discretized for a different grid".into(),
        ));
    }
    Ok(())
}

/// Inverse-transform a padded spectral array into an OmegaSlice.
fn slice_from_spectrum(
    mut data: Vec<Complex64>,
    dk: &DiscreteKernel,
    grid: &Arc<Grid>,
    t: f64,
    method: OmegaMethod,
    series_terms: Option<usize>,
    integral_tol: f64,
) -> Result<OmegaSlice> {
    let dim = grid.dim();
    let padded = dk.padded_dims();
    fft::fft_nd(&mut data, &padded[..dim], true);
    let total: f64 = padded[..dim].iter().product::<usize>() as f64;
    for v in data.iter_mut() {
        *v /= total;
    }
    let integral = fft::total_real(&data);
    let (mut field, im_max) = fft::extract(&data, grid, padded);
    let vol = grid.cell_volume();
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for v in field.values.iter_mut() {
        *v /= vol; // mass -> density
        min_v = min_v.min(*v);
        max_v = max_v.max(*v);
    }
    if im_max > 1e-12 * max_v.abs().max(1e-300) * vol {
        return Err(NldError::Numerical(format!(
            "imaginary residue {im_max:.3e} above tolerance"
        )));
    }
    field.time_tag = Some(t);
    OmegaSlice {
        field,
        t,
        method,
        series_terms,
        integral,
        min_value: min_v,
        max_value: max_v,
    }
    .validate(integral_tol)
}

/// omega via its spectral form: `exp(t (J^ - 1)) - exp(-t)` evaluated on the
/// padded discrete spectrum and inverse-transformed. The difference form
/// stays bounded for any t (Re J^ <= 1) and is exact at the zero-frequency
/// bin.
pub fn omega_spectral(dk: &DiscreteKernel, grid: &Arc<Grid>, t: f64) -> Result<OmegaSlice> {
    check_time(t)?;
    grid_matches(dk, grid)?;
    let emt = (-t).exp();
    let data: Vec<Complex64> = dk
        .spectrum()
        .iter()
        .map(|jh| ((jh - 1.0) * t).exp() - emt)
        .collect();
    slice_from_spectrum(data, dk, grid, t, OmegaMethod::Spectral, None, 1e-10)
}

/// Number of series terms needed so the Poisson tail
/// `e^{-t} sum_{n > n*} t^n / n!` falls below the tolerance.
fn poisson_cutoff(t: f64, tolerance: f64) -> Result<usize> {
    if !(tolerance > 0.0) {
        return Err(NldError::Config("series tolerance must be positive".into()));
    }
    // Work with log terms for stability; tail bounded by a geometric series
    // once n + 2 > t.
    let mut log_term = -t + t.ln(); // n = 1
    let mut n = 1usize;
    loop {
        if n as f64 + 2.0 > t {
            let ratio = t / (n as f64 + 2.0);
            let tail_bound = log_term.exp() * ratio / (1.0 - ratio);
            if tail_bound < tolerance {
                return Ok(n);
            }
        }
        n += 1;
        log_term += t.ln() - (n as f64).ln();
        if n > 4_000_000 {
            return Err(NldError::Numerical(
                "series cutoff search did not terminate".into(),
            ));
        }
    }
}

/// Diffusive support estimate: the radius beyond which omega(. , t) falls
/// below `eps` relative to its peak.
fn diffusive_radius(alpha: f64, t: f64, eps: f64) -> f64 {
    (4.0 * alpha * t * (1.0 / eps).ln()).sqrt()
}

/// omega via the exponential power series `e^{-t} sum t^n J^{*n} / n!`,
/// truncated by the Poisson tail bound. Convolution powers accumulate as
/// running products of the padded spectrum.
pub fn omega_series(
    dk: &DiscreteKernel,
    grid: &Arc<Grid>,
    t: f64,
    tolerance: f64,
) -> Result<OmegaSlice> {
    check_time(t)?;
    grid_matches(dk, grid)?;
    let needed = diffusive_radius(dk.alpha, t, 1e-12) + dk.support_radius;
    if needed > grid.extent() {
        return Err(NldError::Resolution(format!(
            "omega(., {t}) spreads over radius ~{needed:.1}; the box extent {:.1} cannot hold \
             the series support (enlarge the box or reduce t)",
            grid.extent()
        )));
    }
    let n_star = poisson_cutoff(t, tolerance)?;
    // c_n = e^{-t} t^n / n!, built incrementally; underflow of e^{-t} is a
    // genuine range limit for the series route.
    let emt = (-t).exp();
    if emt == 0.0 {
        return Err(NldError::Resolution(format!(
            "e^-t underflows at t = {t}; the series route is limited to moderate times"
        )));
    }
    let spectrum = dk.spectrum();
    let mut power: Vec<Complex64> = spectrum.to_vec(); // J^ ^ 1
    let mut acc: Vec<Complex64> = vec![Complex64::default(); spectrum.len()];
    let mut coeff = emt * t; // c_1
    for n in 1..=n_star {
        for (a, p) in acc.iter_mut().zip(&power) {
            *a += coeff * p;
        }
        if n < n_star {
            for (p, s) in power.iter_mut().zip(spectrum) {
                *p *= s;
            }
            coeff *= t / (n as f64 + 1.0);
        }
    }
    slice_from_spectrum(
        acc,
        dk,
        grid,
        t,
        OmegaMethod::Series,
        Some(n_star),
        (2.0 * tolerance).max(1e-10),
    )
}

/// The Gaussian `Gamma_alpha(x, t) = (4 pi alpha t)^{-N/2} exp(-|x|^2 / (4
/// alpha t))` sampled at the nodes.
pub fn gamma_alpha(grid: &Arc<Grid>, t: f64, alpha: f64) -> Result<Field> {
    if !(t > 0.0 && alpha > 0.0) {
        return Err(NldError::Domain(format!(
            "gamma_alpha needs t > 0 and alpha > 0 (got t = {t}, alpha = {alpha})"
        )));
    }
    let n = grid.dim() as f64;
    let norm = (4.0 * std::f64::consts::PI * alpha * t).powf(-n / 2.0);
    let inv = 1.0 / (4.0 * alpha * t);
    let mut f = Field::from_fn(grid, |x| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        norm * (-r2 * inv).exp()
    });
    f.time_tag = Some(t);
    Ok(f)
}

/// Analytic spatial derivative of Gamma along one axis.
fn gamma_alpha_deriv(grid: &Arc<Grid>, t: f64, alpha: f64, axis: usize) -> Field {
    let n = grid.dim() as f64;
    let norm = (4.0 * std::f64::consts::PI * alpha * t).powf(-n / 2.0);
    let inv = 1.0 / (4.0 * alpha * t);
    Field::from_fn(grid, |x| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        -2.0 * x[axis] * inv * norm * (-r2 * inv).exp()
    })
}

/// Residual of the forced equation `d omega/dt = L omega + e^{-t} J`, with a
/// centered finite difference in time: the sup over non-pad nodes of
/// `|FD_t omega - (K omega - omega) - e^{-t} J|`.
pub fn omega_residual(dk: &DiscreteKernel, grid: &Arc<Grid>, t: f64, dt_fd: f64) -> Result<f64> {
    if !(t > dt_fd && dt_fd > 0.0) {
        return Err(NldError::Domain(format!(
            "need t > dt_fd > 0 (got t = {t}, dt_fd = {dt_fd})"
        )));
    }
    let w_plus = omega_spectral(dk, grid, t + dt_fd)?;
    let w_minus = omega_spectral(dk, grid, t - dt_fd)?;
    let w = omega_spectral(dk, grid, t)?;
    let kw = convolve(dk, &w.field)?;
    let forcing = dk.as_density_field();
    let emt = (-t).exp();
    let reach = dk.reach();
    let p = grid.points_per_axis();
    let mut worst = 0.0f64;
    for flat in 0..grid.node_count() {
        let idx = grid.unflatten(flat);
        if (0..grid.dim()).any(|d| idx[d] < reach || idx[d] + reach >= p) {
            continue; // stencil must stay in-box for the circular identity
        }
        let fd = (w_plus.field.values[flat] - w_minus.field.values[flat]) / (2.0 * dt_fd);
        let lw = kw.values[flat] - w.field.values[flat];
        let res = fd - lw - emt * forcing.values[flat];
        worst = worst.max(res.abs());
    }
    Ok(worst)
}

/// One row of [`check_omega_estimates`].
#[derive(Debug, Clone, Copy)]
pub struct OmegaEstimateRow {
    pub t: f64,
    /// (a) `t^{N/2} sup |omega - Gamma_alpha|`.
    pub gaussian_gap: f64,
    /// (b) `sup_{|x| >= 2} |omega| |x|^{N+2} / t`.
    pub spacetime_constant: f64,
    /// (c) discrete L1 norm of omega over the box.
    pub l1_norm: f64,
    /// (d) `t^{(N+1)/2} max_axis sup |centered-difference omega - d Gamma|`.
    pub deriv_gaussian_gap: f64,
}

/// Evaluate the far-field estimate diagnostics at the given times.
pub fn check_omega_estimates(
    dk: &DiscreteKernel,
    grid: &Arc<Grid>,
    times: &[f64],
) -> Result<Vec<OmegaEstimateRow>> {
    for w in times.windows(2) {
        if w[1] <= w[0] {
            return Err(NldError::Config("times must be increasing".into()));
        }
    }
    let dim = grid.dim();
    let nf = dim as f64;
    let alpha = dk.alpha;
    let h = grid.spacing();
    let p = grid.points_per_axis();
    let strides = grid.strides();
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let w = omega_spectral(dk, grid, t)?;
        let gam = gamma_alpha(grid, t, alpha)?;
        let mut gap = 0.0f64;
        let mut ct = 0.0f64;
        let mut l1 = NeumaierSum::new();
        for flat in 0..grid.node_count() {
            let idx = grid.unflatten(flat);
            let r2 = grid.radius_sq(&idx);
            let wv = w.field.values[flat];
            gap = gap.max((wv - gam.values[flat]).abs());
            if r2 >= 4.0 {
                ct = ct.max(wv.abs() * r2.powf((nf + 2.0) / 2.0) / t);
            }
            l1.add(wv.abs());
        }
        let mut dgap = 0.0f64;
        for axis in 0..dim {
            let dg = gamma_alpha_deriv(grid, t, alpha, axis);
            for flat in 0..grid.node_count() {
                let idx = grid.unflatten(flat);
                if idx[axis] == 0 || idx[axis] + 1 >= p {
                    continue;
                }
                let diff = (w.field.values[flat + strides[axis]]
                    - w.field.values[flat - strides[axis]])
                    / (2.0 * h);
                dgap = dgap.max((diff - dg.values[flat]).abs());
            }
        }
        rows.push(OmegaEstimateRow {
            t,
            gaussian_gap: t.powf(nf / 2.0) * gap,
            spacetime_constant: ct,
            l1_norm: l1.value() * grid.cell_volume(),
            deriv_gaussian_gap: t.powf((nf + 1.0) / 2.0) * dgap,
        });
    }
    Ok(rows)
}
