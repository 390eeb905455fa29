//! Theorem-verification harness: conservation drift, the mass-decay law,
//! outer/inner/global error functionals, and the elliptic and parabolic
//! barrier inequality checks.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{NldError, Result};
use crate::evolution::MetricsSeries;
use crate::fundsol::omega_spectral;
use crate::kernel::{convolve, DiscreteKernel};
use crate::lattice::{DomainMask, Field, Grid, NodeClass};
use crate::quad::unit_sphere_area;
use crate::stationary::StationaryProfile;

/// `Int U_alpha(xi) |xi|^{2-N} d xi = 2 alpha area(S^{N-1}) (4 pi alpha)^{-N/2}`;
/// reduces to `(pi alpha)^{-1/2}` for N = 3.
pub fn gaussian_inverse_moment(alpha: f64, dim: usize) -> f64 {
    2.0 * alpha
        * unit_sphere_area(dim)
        * (4.0 * std::f64::consts::PI * alpha).powf(-(dim as f64) / 2.0)
}

/// Predicted mass-decay prefactor `K = C* M* Int U_alpha |xi|^{2-N}`.
/// A pure function of (C*, M*, alpha); nothing here is fitted.
pub fn k_predicted(cstar: f64, mstar: f64, alpha: f64, dim: usize) -> f64 {
    cstar * mstar * gaussian_inverse_moment(alpha, dim)
}

/// Relative drift of the conserved phi-weighted mass over the series.
pub fn conservation_drift(series: &MetricsSeries) -> Result<f64> {
    let rows: Vec<(f64, f64)> = series
        .rows
        .iter()
        .filter_map(|r| r.weighted_mass.map(|w| (r.t, w)))
        .collect();
    if rows.len() < 2 {
        return Err(NldError::Degenerate(
            "conservation drift needs at least two rows with a weighted mass".into(),
        ));
    }
    let w0 = rows[0].1;
    if w0 == 0.0 {
        return Err(NldError::Degenerate("initial weighted mass is zero".into()));
    }
    Ok(rows
        .iter()
        .map(|(_, w)| (w - w0).abs() / w0.abs())
        .fold(0.0, f64::max))
}

/// Result of fitting `M(t) - M* ~ K t^s` on the last decade of the series.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MassDecayFit {
    pub slope: f64,
    pub k_measured: f64,
    pub k_predicted: f64,
}

pub fn mass_decay_fit(
    series: &MetricsSeries,
    mstar: f64,
    cstar: f64,
    alpha: f64,
    dim: usize,
) -> Result<MassDecayFit> {
    let t_hi = series
        .rows
        .last()
        .ok_or_else(|| NldError::Degenerate("empty metrics series".into()))?
        .t;
    let noise = match conservation_drift(series) {
        Ok(d) => d * mstar.abs(),
        Err(_) => 1e-12 * mstar.abs(),
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in &series.rows {
        if r.t >= t_hi / 10.0 && r.t > 0.0 {
            let excess = r.mass - mstar;
            if excess <= 10.0 * noise {
                return Err(NldError::Signal(format!(
                    "M(t) - M* = {excess:.3e} at t = {} is within 10x the conservation noise \
                     {noise:.3e}; run longer or use data with larger asymptotic mass",
                    r.t
                )));
            }
            xs.push(r.t.ln());
            ys.push(excess.ln());
        }
    }
    if xs.len() < 4 {
        return Err(NldError::Range(
            "mass-decay fit needs at least 4 rows in the last decade".into(),
        ));
    }
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    Ok(MassDecayFit {
        slope,
        k_measured: intercept.exp(),
        k_predicted: k_predicted(cstar, mstar, alpha, dim),
    })
}

fn gamma_at(t: f64, alpha: f64, dim: usize, r2: f64) -> f64 {
    let nf = dim as f64;
    (4.0 * std::f64::consts::PI * alpha * t).powf(-nf / 2.0) * (-r2 / (4.0 * alpha * t)).exp()
}

/// Far-field error `sup_{|x|^2 >= delta t, non-pad} t^{N/2} |u - M* Gamma|`.
pub fn outer_error(
    u: &Field,
    mask: &DomainMask,
    t: f64,
    mstar: f64,
    alpha: f64,
    delta: f64,
) -> Result<f64> {
    if !(t > 0.0 && delta > 0.0) {
        return Err(NldError::Domain(
            "outer_error needs t > 0, delta > 0".into(),
        ));
    }
    let grid = &u.grid;
    let dim = grid.dim();
    let scale = t.powf(dim as f64 / 2.0);
    let mut sup = f64::NEG_INFINITY;
    let mut seen = false;
    for flat in 0..grid.node_count() {
        if mask.class[flat] == NodeClass::OuterPad {
            continue;
        }
        let idx = grid.unflatten(flat);
        let r2 = grid.radius_sq(&idx);
        if r2 < delta * t {
            continue;
        }
        seen = true;
        let gap = (u.values[flat] - mstar * gamma_at(t, alpha, dim, r2)).abs();
        sup = sup.max(scale * gap);
    }
    if !seen {
        return Err(NldError::Range(format!(
            "outer region |x|^2 >= {:.3} is empty on this box",
            delta * t
        )));
    }
    Ok(sup)
}

/// Near-field error `sup over exterior nodes with |x|^2 < delta t of
/// t^{N/2} |u - M* phi Gamma|`.
pub fn inner_error(
    u: &Field,
    mask: &DomainMask,
    t: f64,
    mstar: f64,
    phi: &Field,
    alpha: f64,
    delta: f64,
) -> Result<f64> {
    if !(t > 0.0 && delta > 0.0) {
        return Err(NldError::Domain(
            "inner_error needs t > 0, delta > 0".into(),
        ));
    }
    u.same_grid(phi)?;
    let grid = &u.grid;
    let dim = grid.dim();
    let scale = t.powf(dim as f64 / 2.0);
    let mut sup = f64::NEG_INFINITY;
    let mut seen = false;
    for flat in 0..grid.node_count() {
        if mask.class[flat] != NodeClass::Exterior {
            continue;
        }
        let idx = grid.unflatten(flat);
        let r2 = grid.radius_sq(&idx);
        if r2 >= delta * t {
            continue;
        }
        seen = true;
        let ansatz = mstar * phi.values[flat] * gamma_at(t, alpha, dim, r2);
        sup = sup.max(scale * (u.values[flat] - ansatz).abs());
    }
    if !seen {
        return Err(NldError::Range(format!(
            "inner region |x|^2 < {:.3} holds no exterior nodes",
            delta * t
        )));
    }
    Ok(sup)
}

/// Unified error `sup over non-pad nodes of t^{N/2} |u - M* phi Gamma|`.
pub fn global_error(
    u: &Field,
    mask: &DomainMask,
    t: f64,
    mstar: f64,
    phi: &Field,
    alpha: f64,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(NldError::Domain("global_error needs t > 0".into()));
    }
    u.same_grid(phi)?;
    let grid = &u.grid;
    let dim = grid.dim();
    let scale = t.powf(dim as f64 / 2.0);
    let mut sup = 0.0f64;
    for flat in 0..grid.node_count() {
        if mask.class[flat] == NodeClass::OuterPad {
            continue;
        }
        let idx = grid.unflatten(flat);
        let r2 = grid.radius_sq(&idx);
        let ansatz = mstar * phi.values[flat] * gamma_at(t, alpha, dim, r2);
        sup = sup.max(scale * (u.values[flat] - ansatz).abs());
    }
    Ok(sup)
}

/// Compact-set constant check: the relative sup deviation of
/// `t^{N/2} u` from `M* (4 pi alpha)^{-N/2} phi` over `|x| <= radius`.
pub fn compact_set_deviation(
    u: &Field,
    mask: &DomainMask,
    t: f64,
    mstar: f64,
    phi: &Field,
    alpha: f64,
    radius: f64,
) -> Result<f64> {
    let grid = &u.grid;
    let dim = grid.dim();
    let scale = t.powf(dim as f64 / 2.0);
    let limit = mstar * (4.0 * std::f64::consts::PI * alpha).powf(-(dim as f64) / 2.0);
    let mut sup = f64::NEG_INFINITY;
    let mut seen = false;
    for flat in 0..grid.node_count() {
        if mask.class[flat] != NodeClass::Exterior {
            continue;
        }
        let idx = grid.unflatten(flat);
        if grid.radius_sq(&idx) > radius * radius {
            continue;
        }
        seen = true;
        let gap = (scale * u.values[flat] - limit * phi.values[flat]).abs();
        sup = sup.max(gap / limit);
    }
    if !seen {
        return Err(NldError::Range(format!(
            "no exterior nodes inside |x| <= {radius}"
        )));
    }
    Ok(sup)
}

// ---------------------------------------------------------------------------
// Elliptic barrier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EllipticBarrier {
    pub gamma: f64,
    /// Smallest b in the bracket for which every sampled margin is
    /// nonnegative.
    pub b: f64,
    pub worst_margin: f64,
    /// Per-sample-radius worst margin at the returned b.
    pub margins: Vec<(f64, f64)>,
}

/// Margins of `L z <= -2 alpha gamma (|x|^2 + b)^{-(gamma+1)} (N - 2 - 2
/// gamma)` for `z = (|x|^2 + b)^{-gamma}`, sampled near the given radii.
fn elliptic_margins(
    dk: &DiscreteKernel,
    grid: &Arc<Grid>,
    gamma: f64,
    b: f64,
    sample_radii: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let alpha = dk.alpha;
    let dim = grid.dim();
    let nf = dim as f64;
    let z = Field::from_fn(grid, |x| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        (r2 + b).powf(-gamma)
    });
    let kz = convolve(dk, &z)?;
    let h = grid.spacing();
    let mut out = Vec::with_capacity(sample_radii.len());
    for &r in sample_radii {
        let mut worst = f64::INFINITY;
        let mut seen = false;
        for flat in 0..grid.node_count() {
            let idx = grid.unflatten(flat);
            let r2 = grid.radius_sq(&idx);
            if (r2.sqrt() - r).abs() > 0.5 * h {
                continue;
            }
            // The stencil must stay in the box for Lz to be meaningful.
            if ((grid.face_layers(&idx)) as f64) * h < dk.support_radius {
                continue;
            }
            seen = true;
            let lz = kz.values[flat] - z.values[flat];
            let rhs =
                -2.0 * alpha * gamma * (r2 + b).powf(-(gamma + 1.0)) * (nf - 2.0 - 2.0 * gamma);
            worst = worst.min(rhs - lz);
        }
        if !seen {
            return Err(NldError::Range(format!(
                "no resolvable nodes near sample radius {r}"
            )));
        }
        out.push((r, worst));
    }
    Ok(out)
}

/// Search the smallest `b` in `[1, 1e6]` making the elliptic barrier margins
/// nonnegative at every sampled radius.
pub fn check_elliptic_barrier(
    dk: &DiscreteKernel,
    grid: &Arc<Grid>,
    gamma: f64,
    sample_radii: &[f64],
) -> Result<EllipticBarrier> {
    let dim = grid.dim();
    if !(gamma > 0.0 && gamma <= (dim as f64 - 2.0) / 2.0) {
        return Err(NldError::Domain(format!(
            "gamma must lie in (0, (N-2)/2] (got {gamma})"
        )));
    }
    let min_margin = |b: f64| -> Result<(f64, Vec<(f64, f64)>)> {
        let margins = elliptic_margins(dk, grid, gamma, b, sample_radii)?;
        let worst = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        Ok((worst, margins))
    };
    // Bracket by doubling.
    let mut lo = 1.0f64;
    let (w1, m1) = min_margin(lo)?;
    if w1 >= 0.0 {
        return Ok(EllipticBarrier {
            gamma,
            b: lo,
            worst_margin: w1,
            margins: m1,
        });
    }
    let mut hi = 2.0f64;
    loop {
        let (w, _) = min_margin(hi)?;
        if w >= 0.0 {
            break;
        }
        hi *= 2.0;
        if hi > 1e6 {
            let (_, margins) = min_margin(1e6)?;
            return Err(NldError::Numerical(format!(
                "no b <= 1e6 yields nonnegative elliptic margins for gamma = {gamma}; \
                 margin profile at b = 1e6: {margins:?} (suggests a discretization problem)"
            )));
        }
    }
    // Bisect to ~0.5% relative.
    while hi / lo > 1.005 {
        let mid = (lo * hi).sqrt();
        let (w, _) = min_margin(mid)?;
        if w >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (worst, margins) = min_margin(hi)?;
    Ok(EllipticBarrier {
        gamma,
        b: hi,
        worst_margin: worst,
        margins,
    })
}

// ---------------------------------------------------------------------------
// Parabolic barrier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BarrierParams {
    pub kappa: f64,
    pub gamma: f64,
    pub b: f64,
    pub kplus: f64,
    /// Radius of a ball around the origin contained in the hole.
    pub inner_radius: f64,
}

/// Margin summary for one (delta, t) pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ParabolicMarginRow {
    pub delta: f64,
    pub t: f64,
    pub nodes: usize,
    /// min over the region of `D_t v+ - L v+` at K = kplus and 10 kplus.
    pub min_plus_k1: f64,
    pub min_plus_k10: f64,
    /// max over the region of `D_t v- - L v-` at the same two K values.
    pub max_minus_k1: f64,
    pub max_minus_k10: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParabolicBarrier {
    pub params: BarrierParams,
    pub times: Vec<f64>,
    /// Largest candidate delta whose nonempty regions carry nonnegative
    /// supersolution margins at both kplus and 10 kplus; 0 when none.
    pub delta_star: f64,
    /// Largest candidate passing at kplus alone / at 10 kplus alone.
    pub delta_star_k1_only: f64,
    pub delta_star_k10_only: f64,
    pub rows: Vec<ParabolicMarginRow>,
    /// Supersolution margin at a fixed probe node/time for K = kplus and
    /// 10 kplus (the threshold mechanism is K-independent, so the margin
    /// must not deteriorate with K).
    pub probe_margin_k1: f64,
    pub probe_margin_k10: f64,
}

/// Sampled check of the parabolic barrier inequalities on
/// `R^2 <= |x|^2 <= delta t`, scanning a candidate grid for the largest
/// working delta.
pub fn check_parabolic_barrier(
    profile: &StationaryProfile,
    dk: &DiscreteKernel,
    mask: &DomainMask,
    params: BarrierParams,
    times: &[f64],
    delta_candidates: &[f64],
    tolerance: f64,
) -> Result<ParabolicBarrier> {
    let grid = Arc::clone(&mask.grid);
    let dim = grid.dim();
    let nf = dim as f64;
    if !(params.kappa > 0.0 && params.kappa < 1.0f64.min(nf - 2.0)) {
        return Err(NldError::Domain(format!(
            "kappa must lie in (0, min(1, N-2)) (got {})",
            params.kappa
        )));
    }
    if !(params.gamma > 0.0 && params.gamma < (nf - 2.0 - params.kappa) / 2.0) {
        return Err(NldError::Domain(format!(
            "gamma must lie in (0, (N-2-kappa)/2) (got {})",
            params.gamma
        )));
    }
    if params.kplus < 1.0 {
        return Err(NldError::Domain("kplus must be >= 1".into()));
    }
    // B(0, R) must sit inside the hole.
    for flat in 0..grid.node_count() {
        let idx = grid.unflatten(flat);
        if grid.radius_sq(&idx) < params.inner_radius * params.inner_radius
            && mask.class[flat] != NodeClass::Hole
        {
            return Err(NldError::Geometry(format!(
                "B(0, {}) is not contained in the hole",
                params.inner_radius
            )));
        }
    }
    let p_exp = (nf + params.kappa) / 2.0;

    // t-independent z pieces.
    let z = Field::from_fn(&grid, |x| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        (r2 + params.b).powf(-params.gamma)
    });
    let kz = convolve(dk, &z)?;

    // Per-time fields: base = D_t(phi omega) - L(phi omega) and the z-part
    // so margins are linear in K:
    //   margin_plus(K)  = base + K * zpart
    //   margin_minus(K) = base - K * zpart
    //   zpart = -p t^{-p-1} z - t^{-p} L z
    let mut bases: Vec<Field> = Vec::with_capacity(times.len());
    let mut zparts: Vec<Field> = Vec::with_capacity(times.len());
    for &t in times {
        if !(t > 0.0) {
            return Err(NldError::Domain("barrier times must be positive".into()));
        }
        let dt_fd = 1e-3 * t;
        let w_plus = omega_spectral(dk, &grid, t + dt_fd)?;
        let w_minus = omega_spectral(dk, &grid, t - dt_fd)?;
        let w = omega_spectral(dk, &grid, t)?;
        let mut phi_omega = Field::zeros(&grid);
        for i in 0..phi_omega.values.len() {
            phi_omega.values[i] = profile.phi.values[i] * w.field.values[i];
        }
        let k_phi_omega = convolve(dk, &phi_omega)?;
        let mut base = Field::zeros(&grid);
        let mut zpart = Field::zeros(&grid);
        let tp = t.powf(-p_exp);
        let tp1 = p_exp * t.powf(-p_exp - 1.0);
        for i in 0..base.values.len() {
            let fd = profile.phi.values[i] * (w_plus.field.values[i] - w_minus.field.values[i])
                / (2.0 * dt_fd);
            let l_phi_omega = k_phi_omega.values[i] - phi_omega.values[i];
            base.values[i] = fd - l_phi_omega;
            let lz = kz.values[i] - z.values[i];
            zpart.values[i] = -tp1 * z.values[i] - tp * lz;
        }
        bases.push(base);
        zparts.push(zpart);
    }

    // Region scans per delta candidate.
    let r2_of = |flat: usize| grid.radius_sq(&grid.unflatten(flat));
    let mut rows = Vec::new();
    let mut delta_star = 0.0f64;
    let mut delta_star_k1 = 0.0f64;
    let mut delta_star_k10 = 0.0f64;
    let mut candidates = delta_candidates.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &delta in &candidates {
        let mut all_ok = true;
        let mut k1_ok = true;
        let mut k10_ok = true;
        let mut any_nonempty = false;
        for (ti, &t) in times.iter().enumerate() {
            let r_hi_sq = delta * t;
            let mut row = ParabolicMarginRow {
                delta,
                t,
                nodes: 0,
                min_plus_k1: f64::INFINITY,
                min_plus_k10: f64::INFINITY,
                max_minus_k1: f64::NEG_INFINITY,
                max_minus_k10: f64::NEG_INFINITY,
            };
            for flat in 0..grid.node_count() {
                if mask.class[flat] != NodeClass::Exterior {
                    continue;
                }
                let r2 = r2_of(flat);
                if r2 < params.inner_radius * params.inner_radius || r2 > r_hi_sq {
                    continue;
                }
                row.nodes += 1;
                let b = bases[ti].values[flat];
                let zp = zparts[ti].values[flat];
                let k1 = params.kplus;
                let k10 = 10.0 * params.kplus;
                row.min_plus_k1 = row.min_plus_k1.min(b + k1 * zp);
                row.min_plus_k10 = row.min_plus_k10.min(b + k10 * zp);
                row.max_minus_k1 = row.max_minus_k1.max(b - k1 * zp);
                row.max_minus_k10 = row.max_minus_k10.max(b - k10 * zp);
            }
            if row.nodes > 0 {
                any_nonempty = true;
                if row.min_plus_k1 < -tolerance {
                    k1_ok = false;
                }
                if row.min_plus_k10 < -tolerance {
                    k10_ok = false;
                }
                if row.min_plus_k1 < -tolerance || row.min_plus_k10 < -tolerance {
                    all_ok = false;
                }
                rows.push(row);
            }
        }
        if any_nonempty && all_ok {
            delta_star = delta_star.max(delta);
        }
        if any_nonempty && k1_ok {
            delta_star_k1 = delta_star_k1.max(delta);
        }
        if any_nonempty && k10_ok {
            delta_star_k10 = delta_star_k10.max(delta);
        }
    }

    // Probe: the node nearest |x| = inner_radius + one spacing at the
    // largest time, where the threshold mechanism is cleanest.
    let probe_r = params.inner_radius + grid.spacing();
    let mut probe_flat = None;
    let mut best = f64::INFINITY;
    for flat in 0..grid.node_count() {
        if mask.class[flat] != NodeClass::Exterior {
            continue;
        }
        let d = (r2_of(flat).sqrt() - probe_r).abs();
        if d < best {
            best = d;
            probe_flat = Some(flat);
        }
    }
    let (probe_margin_k1, probe_margin_k10) = match probe_flat {
        Some(flat) => {
            let ti = times.len() - 1;
            let b = bases[ti].values[flat];
            let zp = zparts[ti].values[flat];
            (b + params.kplus * zp, b + 10.0 * params.kplus * zp)
        }
        None => (f64::NAN, f64::NAN),
    };

    Ok(ParabolicBarrier {
        params,
        times: times.to_vec(),
        delta_star,
        delta_star_k1_only: delta_star_k1,
        delta_star_k10_only: delta_star_k10,
        rows,
        probe_margin_k1,
        probe_margin_k10,
    })
}

// ---------------------------------------------------------------------------
// Report type
// ---------------------------------------------------------------------------

/// Everything the final report assembles. Predicted quantities are computed
/// only from (alpha, C*, M*); nothing predicted is fitted.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsReport {
    pub conservation_drift: f64,
    pub mstar: f64,
    pub mass_slope: f64,
    pub mass_prefactor_measured: f64,
    pub mass_prefactor_predicted: f64,
    pub outer_errors: Vec<(f64, f64)>,
    pub inner_errors: Vec<(f64, f64)>,
    pub global_errors: Vec<(f64, f64)>,
    pub compact_constant_measured: f64,
    pub compact_constant_predicted: f64,
    pub elliptic: Vec<EllipticBarrier>,
    pub parabolic: Option<ParabolicBarrier>,
}
