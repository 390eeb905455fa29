//! The stationary harmonic profile of the exterior domain: the
//! expanding-ball monotone scheme for phi, its complement psi = 1 - phi,
//! asymptotic-constant estimators, nonlocal energy/capacity, lost mass, and
//! bounded-component eigenmodes.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{NldError, Result};
use crate::kernel::{convolve, DiscreteKernel};
use crate::lattice::{
    radial_profile, weighted_mass, DomainMask, Field, NeumaierSum, NodeClass, RadialBin,
};
use crate::quad::unit_sphere_area;

/// Iteration cap per stage.
pub const STAGE_ITERATION_CAP: usize = 200_000;

/// Default sup-change tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Asymptotic-constant estimates read off the converged profile.
#[derive(Debug, Clone, Copy)]
pub struct CstarEstimates {
    /// 1/r-extrapolated least-squares fit of psi * r^{N-2} over radial bins.
    pub cstar_fit: f64,
    /// Limit of the radial-derivative surface integral of psi.
    pub flux_mu: f64,
    /// `flux_mu / ((2 - N) * area(S^{N-1}))`.
    pub cstar_flux: f64,
    /// Log-log slope of the radial mean of psi; `None` flags no decay
    /// (psi identically zero).
    pub decay_slope_psi: Option<f64>,
}

/// Record of one solve stage.
#[derive(Debug, Clone, Copy)]
pub struct StageRecord {
    /// Ball radius for expanding-ball stages; the largest ball radius for
    /// far-field refinement stages.
    pub radius: f64,
    /// Far-field constant used for the outer clamp (0 = clamp to one).
    pub clamp_cstar: f64,
    pub iterations: usize,
    /// Whether the end-of-stage profile sits below the previous stage's
    /// profile at every node (exact comparison). Ball stages must all be
    /// true; refinement stages after the first approach from below.
    pub below_previous: bool,
    /// Monotone direction of the in-stage iteration.
    pub nonincreasing: bool,
}

/// Converged stationary profile with diagnostics.
#[derive(Debug, Clone)]
pub struct StationaryProfile {
    pub phi: Field,
    pub psi: Field,
    /// sup over exterior nodes inside the largest ball of |K phi - phi|.
    pub residual: f64,
    pub ball_radii_used: Vec<f64>,
    pub stages: Vec<StageRecord>,
    pub hole_circumradius: f64,
    /// Largest solved ball radius.
    pub outer_radius: f64,
    pub estimates: Option<CstarEstimates>,
}

impl StationaryProfile {
    /// Convenience accessor; NaN when the fit range was infeasible.
    pub fn cstar_fit(&self) -> f64 {
        self.estimates.map(|e| e.cstar_fit).unwrap_or(f64::NAN)
    }

    pub fn cstar_flux(&self) -> f64 {
        self.estimates.map(|e| e.cstar_flux).unwrap_or(f64::NAN)
    }
}

/// First eigenpair of a bounded component.
#[derive(Debug, Clone)]
pub struct ComponentMode {
    pub component_id: u32,
    /// Decay rate `1 - rho`, rho the dominant eigenvalue of the restricted
    /// convolution.
    pub lambda1: f64,
    /// Nonnegative, sup-normalized eigenmode supported on the component.
    pub mode: Field,
}

// ---------------------------------------------------------------------------
// solve_phi
// ---------------------------------------------------------------------------

struct StageSolver<'a> {
    dk: &'a DiscreteKernel,
    flat_deltas: Vec<isize>,
    /// Active (iterated) nodes: exterior, unbounded component, inside ball.
    active: Vec<usize>,
    values: Vec<f64>,
    tol: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Direction {
    /// Iterates must not increase at any node (exact check).
    Down,
    /// No sign constraint (mixed sub/supersolution starts).
    Free,
}

impl<'a> StageSolver<'a> {
    fn new(
        dk: &'a DiscreteKernel,
        grid: &crate::lattice::Grid,
        active: Vec<usize>,
        values: Vec<f64>,
        tol: f64,
    ) -> Self {
        let strides = grid.strides();
        let flat_deltas = dk
            .offsets()
            .iter()
            .map(|o| {
                (0..grid.dim())
                    .map(|d| o[d] as isize * strides[d] as isize)
                    .sum()
            })
            .collect();
        StageSolver {
            dk,
            flat_deltas,
            active,
            values,
            tol,
        }
    }

    /// One Jacobi sweep over the active nodes: `new_j = min(1, K values)`.
    /// Active-node stencils never leave the box (ball radius <= extent minus
    /// support), so the flat-delta fast path is always valid.
    fn sweep(&self, out: &mut [f64]) {
        let weights = self.dk.weights();
        let deltas = &self.flat_deltas[..];
        let vals = &self.values[..];
        const CHUNK: usize = 2048;
        out.par_chunks_mut(CHUNK)
            .zip(self.active.par_chunks(CHUNK))
            .for_each(|(os, flats)| {
                for (o, &flat) in os.iter_mut().zip(flats) {
                    let mut acc = 0.0f64;
                    for (&w, &dl) in weights.iter().zip(deltas) {
                        acc += w * vals[(flat as isize + dl) as usize];
                    }
                    *o = acc.min(1.0);
                }
            });
    }

    /// Iterate to sup-change < tol with verified geometric extrapolation.
    /// In `Down` mode every iterate is checked to be pointwise nonincreasing
    /// in exact floating-point comparison; in `Free` mode the iteration is
    /// plain Jacobi. Returns the iteration count.
    fn converge(&mut self, direction: Direction, cap: usize) -> Result<usize> {
        let going_down = direction == Direction::Down;
        let n = self.active.len();
        if n == 0 {
            return Ok(0);
        }
        let mut next = vec![0.0f64; n];
        // Signed last step per node, for extrapolation along the slow mode.
        let mut last_step: Vec<f64> = vec![0.0; n];
        let mut history: Vec<f64> = Vec::new();
        let mut extrapolation_scale = 0.9f64;
        let mut iters = 0usize;

        loop {
            self.sweep(&mut next);
            iters += 1;
            if iters > cap {
                let tail: Vec<f64> = history.iter().rev().take(8).rev().copied().collect();
                return Err(NldError::Convergence {
                    what: "stationary-profile stage".into(),
                    iterations: iters,
                    history: tail,
                });
            }
            let mut sup_change = 0.0f64;
            for (j, &flat) in self.active.iter().enumerate() {
                let old = self.values[flat];
                let new = next[j];
                if going_down && new > old {
                    return Err(NldError::Numerical(format!(
                        "monotone iteration violated at node {flat}: {old} -> {new}"
                    )));
                }
                let step = new - old;
                sup_change = sup_change.max(step.abs());
                last_step[j] = step;
                self.values[flat] = new;
            }
            history.push(sup_change);
            if sup_change < self.tol {
                return Ok(iters);
            }

            // Periodically jump along the dominant geometric mode. The
            // jump is kept only if one confirming sweep shows it landed on
            // the right side: still monotone (Down) or with a reduced
            // residual (Free).
            let window = 12;
            if history.len() >= 2 * window {
                let d_now = history[history.len() - 1];
                let d_then = history[history.len() - 1 - window];
                if d_now > 0.0 && d_then > 0.0 && d_now < d_then {
                    let q = (d_now / d_then).powf(1.0 / window as f64);
                    if q > 0.3 && q < 0.999_999 {
                        let gain = extrapolation_scale * q / (1.0 - q);
                        let mut saved = self.values.clone();
                        for (j, &flat) in self.active.iter().enumerate() {
                            self.values[flat] =
                                (self.values[flat] + gain * last_step[j]).clamp(0.0, 1.0);
                        }
                        self.sweep(&mut next);
                        let valid = if going_down {
                            self.active
                                .iter()
                                .enumerate()
                                .all(|(j, &flat)| next[j] <= self.values[flat])
                        } else {
                            let mut sup = 0.0f64;
                            for (j, &flat) in self.active.iter().enumerate() {
                                sup = sup.max((next[j] - self.values[flat]).abs());
                            }
                            sup <= d_now
                        };
                        if valid {
                            iters += 1;
                            let mut sup = 0.0f64;
                            for (j, &flat) in self.active.iter().enumerate() {
                                let step = next[j] - self.values[flat];
                                sup = sup.max(step.abs());
                                last_step[j] = step;
                                self.values[flat] = next[j];
                            }
                            history.clear();
                            history.push(sup);
                            extrapolation_scale = (extrapolation_scale * 1.3).min(0.95);
                            if sup < self.tol {
                                return Ok(iters);
                            }
                        } else {
                            // Overshot the fixed point: revert, halve the jump.
                            std::mem::swap(&mut self.values, &mut saved);
                            extrapolation_scale *= 0.5;
                            history.clear();
                        }
                    }
                }
            }
        }
    }
}

fn is_active(
    mask: &DomainMask,
    unbounded: Option<u32>,
    flat: usize,
    r2: f64,
    ball_sq: f64,
) -> bool {
    mask.class[flat] == NodeClass::Exterior
        && r2 < ball_sq
        && match unbounded {
            Some(id) => mask.component_id[flat] == id,
            None => true,
        }
}

/// Solve the stationary problem by the expanding-ball monotone scheme, then
/// sharpen the artificial outer boundary with a self-consistent far-field
/// clamp `phi = 1 - C / |x|^{N-2}` (the constant re-estimated from the flux
/// until stable; without it the hard clamp at radius n biases psi by the
/// annulus factor `1 - (r/n)^{N-2}`).
///
/// On bounded components (not connected to infinity) phi is set to zero
/// directly. Requires the mask's component labels when holes are present.
pub fn solve_phi(
    dk: &DiscreteKernel,
    mask: &DomainMask,
    tol: f64,
    radii: &[f64],
) -> Result<StationaryProfile> {
    let grid = Arc::clone(&mask.grid);
    if !(tol > 0.0) {
        return Err(NldError::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if radii.is_empty() {
        return Err(NldError::Config("at least one ball radius required".into()));
    }
    for w in radii.windows(2) {
        if w[1] <= w[0] {
            return Err(NldError::Config(
                "ball radii must be strictly increasing".into(),
            ));
        }
    }
    let outer_limit = grid.extent() - dk.support_radius;
    let n_max = *radii.last().unwrap();
    if n_max > outer_limit + 1e-12 {
        return Err(NldError::Config(format!(
            "largest ball radius {n_max} exceeds extent - support = {outer_limit}"
        )));
    }
    let hole_count = mask.count(NodeClass::Hole);
    let dim = grid.dim();

    // No holes: the profile is identically one.
    if hole_count == 0 {
        let phi = Field::constant(&grid, 1.0);
        let conv = convolve(dk, &phi)?;
        let mut residual = 0.0f64;
        for flat in 0..grid.node_count() {
            let idx = grid.unflatten(flat);
            if grid.radius_sq(&idx) < n_max * n_max {
                residual = residual.max((conv.values[flat] - 1.0).abs());
            }
        }
        return Ok(StationaryProfile {
            psi: Field::zeros(&grid),
            phi,
            residual,
            ball_radii_used: radii.to_vec(),
            stages: Vec::new(),
            hole_circumradius: 0.0,
            outer_radius: n_max,
            estimates: Some(CstarEstimates {
                cstar_fit: 0.0,
                flux_mu: 0.0,
                cstar_flux: 0.0,
                decay_slope_psi: None,
            }),
        });
    }

    if mask.components.is_empty() {
        return Err(NldError::Config(
            "mask has holes but no component labels; run components() first".into(),
        ));
    }
    let unbounded = mask.unbounded_component_id;

    // Per-node |x|^2, reused by every stage.
    let r2: Vec<f64> = (0..grid.node_count())
        .map(|flat| grid.radius_sq(&grid.unflatten(flat)))
        .collect();

    // Initial field: 1 outside holes; 0 on holes and bounded components.
    let mut values = vec![1.0f64; grid.node_count()];
    for flat in 0..grid.node_count() {
        let pinned_zero = mask.class[flat] == NodeClass::Hole
            || match unbounded {
                Some(id) => mask.component_id[flat] != id,
                None => false,
            };
        if pinned_zero {
            values[flat] = 0.0;
        }
    }

    let mut stages: Vec<StageRecord> = Vec::new();
    let mut prev_stage_field: Option<Vec<f64>> = None;

    // Expanding-ball stages: clamp to one outside B(0, n).
    for &radius in radii {
        let ball_sq = radius * radius;
        let active: Vec<usize> = (0..grid.node_count())
            .filter(|&flat| is_active(mask, unbounded, flat, r2[flat], ball_sq))
            .collect();
        let mut solver = StageSolver::new(dk, &grid, active, values, tol);
        let iters = solver.converge(Direction::Down, STAGE_ITERATION_CAP)?;
        values = solver.values;
        let below = match &prev_stage_field {
            None => true,
            Some(prev) => values.iter().zip(prev).all(|(a, b)| a <= b),
        };
        stages.push(StageRecord {
            radius,
            clamp_cstar: 0.0,
            iterations: iters,
            below_previous: below,
            nonincreasing: true,
        });
        prev_stage_field = Some(values.clone());
    }

    // Far-field refinement stages.
    let circum = hole_circumradius(mask, &r2);
    let ball_sq = n_max * n_max;
    let refine_tols = [tol.max(1e-6), tol.max(1e-8), tol];
    let mut clamp_c_prev = 0.0f64;
    for &rtol in refine_tols.iter() {
        let psi_now = psi_of(&grid, &values);
        let c_est = match flux_cstar_for_refinement(&psi_now, circum, dk.support_radius, n_max, dim)
        {
            Some(c) if c.is_finite() && c > 0.0 => c,
            _ => break, // estimator infeasible at this scale
        };
        if (c_est - clamp_c_prev).abs() <= 1e-3 * c_est {
            break; // clamp already self-consistent
        }
        let exp = (dim as i32) - 2;
        for flat in 0..grid.node_count() {
            if mask.class[flat] == NodeClass::Hole {
                continue;
            }
            if let Some(id) = unbounded {
                if mask.component_id[flat] != id {
                    continue;
                }
            }
            if r2[flat] >= ball_sq {
                let r = r2[flat].sqrt();
                values[flat] = (1.0 - c_est / r.powi(exp)).clamp(0.0, 1.0);
            }
        }
        // The first clamp drop keeps a supersolution (iterates descend
        // exactly); later clamp updates mix sub- and supersolution regions,
        // so those stages run unconstrained.
        let direction = if clamp_c_prev == 0.0 {
            Direction::Down
        } else {
            Direction::Free
        };
        let nonincreasing = direction == Direction::Down;
        let active: Vec<usize> = (0..grid.node_count())
            .filter(|&flat| is_active(mask, unbounded, flat, r2[flat], ball_sq))
            .collect();
        let mut solver = StageSolver::new(dk, &grid, active, values, rtol);
        let iters = solver.converge(direction, STAGE_ITERATION_CAP)?;
        values = solver.values;
        let below = match &prev_stage_field {
            None => true,
            Some(prev) => values.iter().zip(prev).all(|(a, b)| a <= b),
        };
        stages.push(StageRecord {
            radius: n_max,
            clamp_cstar: c_est,
            iterations: iters,
            below_previous: below,
            nonincreasing,
        });
        prev_stage_field = Some(values.clone());
        clamp_c_prev = c_est;
    }

    // Final residual over exterior nodes inside the largest ball.
    let mut phi = Field::zeros(&grid);
    phi.values = values;
    let conv = convolve(dk, &phi)?;
    let mut residual = 0.0f64;
    for flat in 0..grid.node_count() {
        if is_active(mask, unbounded, flat, r2[flat], ball_sq) {
            residual = residual.max((conv.values[flat] - phi.values[flat]).abs());
        }
    }
    if residual > tol {
        return Err(NldError::Convergence {
            what: format!("stationary residual {residual:.3e} above tolerance {tol:.3e}"),
            iterations: stages.iter().map(|s| s.iterations).sum(),
            history: vec![residual],
        });
    }

    let psi = psi_of(&grid, &phi.values);
    let mut profile = StationaryProfile {
        phi,
        psi,
        residual,
        ball_radii_used: radii.to_vec(),
        stages,
        hole_circumradius: circum,
        outer_radius: n_max,
        estimates: None,
    };
    // Default fit range; skipped when the grid cannot support it.
    let r_lo = 2.0 * circum;
    let r_hi = 0.85 * n_max;
    if r_hi > r_lo {
        if let Ok((cstar_fit, flux_mu, cstar_flux)) = estimate_cstar(&profile, (r_lo, r_hi)) {
            let slope = psi_decay_slope(&profile, (r_lo, r_hi)).ok().flatten();
            profile.estimates = Some(CstarEstimates {
                cstar_fit,
                flux_mu,
                cstar_flux,
                decay_slope_psi: slope,
            });
        }
    }
    Ok(profile)
}

fn psi_of(grid: &Arc<crate::lattice::Grid>, phi: &[f64]) -> Field {
    let mut psi = Field::zeros(grid);
    for (p, &v) in psi.values.iter_mut().zip(phi) {
        *p = 1.0 - v;
    }
    psi
}

fn hole_circumradius(mask: &DomainMask, r2: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (flat, c) in mask.class.iter().enumerate() {
        if *c == NodeClass::Hole {
            worst = worst.max(r2[flat]);
        }
    }
    worst.sqrt()
}

/// Flux-based far-field constant used by the refinement stages; `None` when
/// the radial range cannot support the fit.
fn flux_cstar_for_refinement(
    psi: &Field,
    circum: f64,
    support: f64,
    n_max: f64,
    dim: usize,
) -> Option<f64> {
    let r_lo = (2.0 * circum).max(circum + 2.0 * support);
    let r_hi = 0.85 * n_max;
    if r_hi <= r_lo {
        return None;
    }
    let bins = radial_profile(psi, 2.0 * psi.grid.spacing()).ok()?;
    flux_fit(&bins, r_lo, r_hi, dim)
        .map(|(mu, _)| mu / ((2 - dim as i32) as f64 * unit_sphere_area(dim)))
}

/// Least-squares line fit y = a + b x; returns (a, b).
fn line_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return None;
    }
    let b = (n * sxy - sx * sy) / det;
    let a = (sy - b * sx) / n;
    Some((a, b))
}

/// Shell-flux values `area * r^{N-1} * d psi/dr` from binned means,
/// extrapolated linearly in 1/r; returns (mu, fitted 1/r coefficient).
fn flux_fit(bins: &[RadialBin], r_lo: f64, r_hi: f64, dim: usize) -> Option<(f64, f64)> {
    let area = unit_sphere_area(dim);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for w in bins.windows(3) {
        let r = w[1].r_mid;
        if r < r_lo || r > r_hi {
            continue;
        }
        let dr = w[2].r_mid - w[0].r_mid;
        if dr <= 0.0 {
            continue;
        }
        let dpsi = (w[2].mean - w[0].mean) / dr;
        xs.push(1.0 / r);
        ys.push(area * r.powi(dim as i32 - 1) * dpsi);
    }
    if xs.len() < 4 {
        return None;
    }
    line_fit(&xs, &ys)
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

/// Two independent estimates of the asymptotic constant:
/// `(cstar_fit, flux_mu, cstar_flux)`.
pub fn estimate_cstar(
    profile: &StationaryProfile,
    fit_range: (f64, f64),
) -> Result<(f64, f64, f64)> {
    let (r_lo, r_hi) = fit_range;
    let dim = profile.psi.grid.dim();
    if r_hi > profile.outer_radius + 1e-9 {
        return Err(NldError::Range(format!(
            "fit range upper bound {r_hi} exceeds the largest solved ball radius {}",
            profile.outer_radius
        )));
    }
    if r_lo < 2.0 * profile.hole_circumradius - 1e-9 {
        return Err(NldError::Range(format!(
            "fit range lower bound {r_lo} is below twice the hole circumradius {}",
            2.0 * profile.hole_circumradius
        )));
    }
    let bins = radial_profile(&profile.psi, 2.0 * profile.psi.grid.spacing())?;
    let in_range: Vec<&RadialBin> = bins
        .iter()
        .filter(|b| b.r_mid >= r_lo && b.r_mid <= r_hi)
        .collect();
    if in_range.len() < 4 {
        return Err(NldError::Range(format!(
            "fit range [{r_lo}, {r_hi}] holds only {} radial bins (need >= 4)",
            in_range.len()
        )));
    }
    // psi * r^{N-2} against 1/r; the constant term is the fit estimate.
    let exp = dim as i32 - 2;
    let xs: Vec<f64> = in_range.iter().map(|b| 1.0 / b.r_mid).collect();
    let ys: Vec<f64> = in_range
        .iter()
        .map(|b| b.mean * b.r_mid.powi(exp))
        .collect();
    let (cstar_fit, _) =
        line_fit(&xs, &ys).ok_or_else(|| NldError::Range("degenerate fit".into()))?;
    let (flux_mu, _) = flux_fit(&bins, r_lo, r_hi, dim)
        .ok_or_else(|| NldError::Range("flux fit range too small".into()))?;
    let cstar_flux = flux_mu / ((2 - dim as i32) as f64 * unit_sphere_area(dim));
    Ok((cstar_fit, flux_mu, cstar_flux))
}

/// Log-log slope of the radial mean of psi over the fit range; `None` when
/// psi carries no decay signal (no holes).
pub fn psi_decay_slope(profile: &StationaryProfile, fit_range: (f64, f64)) -> Result<Option<f64>> {
    let (r_lo, r_hi) = fit_range;
    if profile.psi.sup_norm() < 1e-14 {
        return Ok(None);
    }
    let bins = radial_profile(&profile.psi, 2.0 * profile.psi.grid.spacing())?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in &bins {
        if b.r_mid >= r_lo && b.r_mid <= r_hi && b.mean > 0.0 {
            xs.push(b.r_mid.ln());
            ys.push(b.mean.ln());
        }
    }
    if xs.len() < 4 {
        return Err(NldError::Range(format!(
            "fit range [{r_lo}, {r_hi}] holds only {} usable bins",
            xs.len()
        )));
    }
    Ok(line_fit(&xs, &ys).map(|(_, slope)| slope))
}

/// Log-log slope of the radial max of |Delta_h psi| over the fit range,
/// with the standard 2N+1-point second-difference stencil.
pub fn laplacian_decay_check(profile: &StationaryProfile, fit_range: (f64, f64)) -> Result<f64> {
    let grid = &profile.psi.grid;
    let field = discrete_laplacian_abs(&profile.psi);
    let bins = radial_profile(&field, 2.0 * grid.spacing())?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in &bins {
        if b.r_mid >= fit_range.0 && b.r_mid <= fit_range.1 && b.max > 0.0 {
            xs.push(b.r_mid.ln());
            ys.push(b.max.ln());
        }
    }
    if xs.len() < 4 {
        return Err(NldError::Range("laplacian fit range too small".into()));
    }
    line_fit(&xs, &ys)
        .map(|(_, slope)| slope)
        .ok_or_else(|| NldError::Range("degenerate laplacian fit".into()))
}

/// |Delta_h f| with the 2N+1-point stencil; zero on the outermost layer.
pub fn discrete_laplacian_abs(f: &Field) -> Field {
    let grid = &f.grid;
    let p = grid.points_per_axis();
    let dim = grid.dim();
    let h2 = grid.spacing() * grid.spacing();
    let strides = grid.strides();
    let mut lap = Field::zeros(grid);
    for flat in 0..grid.node_count() {
        let idx = grid.unflatten(flat);
        if (0..dim).any(|d| idx[d] == 0 || idx[d] + 1 >= p) {
            continue;
        }
        let mut acc = -2.0 * dim as f64 * f.values[flat];
        for d in 0..dim {
            acc += f.values[flat + strides[d]] + f.values[flat - strides[d]];
        }
        lap.values[flat] = (acc / h2).abs();
    }
    lap
}

// ---------------------------------------------------------------------------
// Energy / capacity / lost mass
// ---------------------------------------------------------------------------

/// Nonlocal Dirichlet energy on the box:
/// `(h^N / 2) sum_i sum_o w_o (f_i - f_{i+o})^2` over in-box pairs.
/// Each unordered pair is visited once through the positive offset half, so
/// the value is exactly nonnegative and exactly zero for constants.
pub fn nonlocal_energy(f: &Field, dk: &DiscreteKernel, mask: &DomainMask) -> Result<f64> {
    if f.grid.as_ref() != dk.grid().as_ref() || f.grid.as_ref() != mask.grid.as_ref() {
        return Err(NldError::GridMismatch(
            "energy requires field, kernel, and mask on one grid".into(),
        ));
    }
    let grid = &f.grid;
    let p = grid.points_per_axis() as i64;
    let dim = grid.dim();
    let pos: Vec<([i32; 3], f64)> = dk
        .offsets()
        .iter()
        .zip(dk.weights())
        .filter(|(o, _)| **o > [0, 0, 0])
        .map(|(o, &w)| (*o, w))
        .collect();
    let mut sum = NeumaierSum::new();
    for flat in 0..grid.node_count() {
        let idx = grid.unflatten(flat);
        for (o, w) in &pos {
            let mut ok = true;
            let mut nf: i64 = 0;
            for d in 0..dim {
                let ni = idx[d] as i64 + o[d] as i64;
                if ni < 0 || ni >= p {
                    ok = false;
                    break;
                }
                nf = nf * p + ni;
            }
            if ok {
                let dfi = f.values[flat] - f.values[nf as usize];
                sum.add(w * dfi * dfi);
            }
        }
    }
    Ok(sum.value() * grid.cell_volume())
}

/// Energy of psi extended by one on the holes: an upper-bound style estimate
/// of the nonlocal capacity of the hole set (psi is not proved to attain the
/// infimum).
pub fn capacity_estimate(
    profile: &StationaryProfile,
    dk: &DiscreteKernel,
    mask: &DomainMask,
) -> Result<f64> {
    let mut tilde = profile.psi.clone();
    for (v, c) in tilde.values.iter_mut().zip(&mask.class) {
        if *c == NodeClass::Hole {
            *v = 1.0;
        }
    }
    nonlocal_energy(&tilde, dk, mask)
}

/// `h^N sum (1 - phi) u0`: the mass that the holes will eventually absorb.
pub fn lost_mass(u0: &Field, profile: &StationaryProfile) -> Result<f64> {
    if u0.min() < 0.0 {
        return Err(NldError::Data("lost_mass requires nonnegative data".into()));
    }
    weighted_mass(u0, &profile.psi)
}

// ---------------------------------------------------------------------------
// Bounded components
// ---------------------------------------------------------------------------

/// Dominant eigenpair of the convolution restricted to a bounded component,
/// by power iteration with Rayleigh-quotient convergence.
pub fn bounded_component_mode(
    dk: &DiscreteKernel,
    mask: &DomainMask,
    component_id: u32,
) -> Result<ComponentMode> {
    let info = mask
        .components
        .iter()
        .find(|c| c.id == component_id)
        .ok_or_else(|| NldError::Config(format!("no component with id {component_id}")))?;
    if info.unbounded {
        return Err(NldError::Config(format!(
            "component {component_id} is connected to infinity; eigenmodes apply to bounded \
             components only"
        )));
    }
    let grid = &mask.grid;
    let in_comp: Vec<bool> = (0..grid.node_count())
        .map(|i| mask.class[i] != NodeClass::Hole && mask.component_id[i] == component_id)
        .collect();
    let mut f = Field::zeros(grid);
    for (v, &inside) in f.values.iter_mut().zip(&in_comp) {
        if inside {
            *v = 1.0;
        }
    }
    let mut rho_prev = f64::NAN;
    for it in 0..10_000 {
        let kf = convolve(dk, &f)?;
        // Rayleigh quotient over the component (the restricted operator is
        // symmetric).
        let mut num = NeumaierSum::new();
        let mut den = NeumaierSum::new();
        for i in 0..f.values.len() {
            if in_comp[i] {
                num.add(f.values[i] * kf.values[i]);
                den.add(f.values[i] * f.values[i]);
            }
        }
        let rho = num.value() / den.value();
        let mut sup = 0.0f64;
        for i in 0..f.values.len() {
            f.values[i] = if in_comp[i] { kf.values[i] } else { 0.0 };
            sup = sup.max(f.values[i].abs());
        }
        if sup == 0.0 {
            return Err(NldError::Convergence {
                what: "power iteration collapsed to zero".into(),
                iterations: it,
                history: vec![],
            });
        }
        for v in f.values.iter_mut() {
            *v /= sup;
        }
        if (rho - rho_prev).abs() <= 1e-13 * rho.abs() {
            if !(0.0 < rho && rho < 1.0) {
                return Err(NldError::Numerical(format!(
                    "dominant value {rho} outside (0, 1); component is not substochastic"
                )));
            }
            return Ok(ComponentMode {
                component_id,
                lambda1: 1.0 - rho,
                mode: f,
            });
        }
        rho_prev = rho;
    }
    Err(NldError::Convergence {
        what: "bounded-component power iteration".into(),
        iterations: 10_000,
        history: vec![rho_prev],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{discretize, make_kernel, KernelFamily};
    use crate::lattice::{components, rasterize, Grid, HolePrimitive, HoleSet};

    fn ball_setup() -> (Arc<Grid>, Arc<DiscreteKernel>, Arc<DomainMask>) {
        let grid = Arc::new(Grid::build(3, 33, 7.0).unwrap());
        let spec = make_kernel(KernelFamily::SmoothBump, 1.0, 3).unwrap();
        let dk = Arc::new(discretize(&spec, &grid).unwrap());
        let holes = HoleSet {
            primitives: vec![HolePrimitive::Ball {
                center: vec![0.0, 0.0, 0.0],
                radius: 1.5,
            }],
        };
        let mut mask = rasterize(&holes, &grid, 1.0).unwrap();
        components(&mut mask, 1.0).unwrap();
        (grid, dk, Arc::new(mask))
    }

    #[test]
    fn empty_holes_give_identity_profile() {
        let grid = Arc::new(Grid::build(3, 17, 3.5).unwrap());
        let spec = make_kernel(KernelFamily::SmoothBump, 1.0, 3).unwrap();
        let dk = discretize(&spec, &grid).unwrap();
        let mut mask = rasterize(&HoleSet::empty(), &grid, 1.0).unwrap();
        components(&mut mask, 1.0).unwrap();
        let prof = solve_phi(&dk, &mask, 1e-10, &[2.4]).unwrap();
        assert!(prof.phi.values.iter().all(|&v| v == 1.0));
        assert!(prof.psi.values.iter().all(|&v| v == 0.0));
        assert_eq!(prof.estimates.unwrap().cstar_fit, 0.0);
    }

    #[test]
    fn ball_hole_profile_invariants() {
        let (grid, dk, mask) = ball_setup();
        let prof = solve_phi(&dk, &mask, 1e-10, &[4.0, 6.0]).unwrap();
        assert!(prof.residual <= 1e-10, "residual {}", prof.residual);
        for (flat, &v) in prof.phi.values.iter().enumerate() {
            assert!((0.0..=1.0).contains(&v));
            if mask.class[flat] == NodeClass::Hole {
                assert_eq!(v, 0.0);
            }
        }
        // Ball stages are monotone and each sits below the previous.
        assert!(prof.stages[0].nonincreasing && prof.stages[0].below_previous);
        assert!(prof.stages[1].nonincreasing && prof.stages[1].below_previous);
        // The decay bound (|x|^2 + 1)^{-1/2}: some finite K works.
        let mut k_needed = 0.0f64;
        for flat in 0..grid.node_count() {
            let idx = grid.unflatten(flat);
            let r2 = grid.radius_sq(&idx);
            if mask.class[flat] == NodeClass::Exterior && r2 < 36.0 {
                let bound = (r2 + 1.0).powf(-0.5);
                k_needed = k_needed.max(prof.psi.values[flat] / bound);
            }
        }
        assert!(k_needed.is_finite() && k_needed > 0.0);
        // psi radial mean nonincreasing beyond circumradius + support.
        let bins = radial_profile(&prof.psi, 2.0 * grid.spacing()).unwrap();
        let start = prof.hole_circumradius + dk.support_radius;
        let usable: Vec<_> = bins
            .iter()
            .filter(|b| b.r_mid >= start && b.r_mid <= prof.outer_radius)
            .collect();
        for w in usable.windows(2) {
            assert!(
                w[1].mean <= w[0].mean + 1e-10,
                "psi mean rises at r = {}",
                w[1].r_mid
            );
        }
    }

    #[test]
    fn successive_ball_radii_decrease_pointwise() {
        let (_, dk, mask) = ball_setup();
        let p4 = solve_phi(&dk, &mask, 1e-10, &[4.0]).unwrap();
        let p6 = solve_phi(&dk, &mask, 1e-10, &[4.0, 6.0]).unwrap();
        // Compare the pure ball-stage portion: rerun p6's stages without the
        // tail refinement by checking its recorded flags instead; the
        // end-to-end field comparison needs matching clamps, so compare the
        // stage records.
        assert!(p6.stages.iter().take(2).all(|s| s.below_previous));
        // And the first-stage result of p6 equals p4's first stage in
        // spirit: both monotone nonincreasing with the same radius.
        assert_eq!(p4.stages[0].radius, 4.0);
        assert_eq!(p6.stages[0].radius, 4.0);
    }

    #[test]
    fn energy_constant_zero_and_nonnegative() {
        let (grid, dk, mask) = ball_setup();
        let c = Field::constant(&grid, 1.37);
        assert_eq!(nonlocal_energy(&c, &dk, &mask).unwrap(), 0.0);
        let f = Field::from_fn(&grid, |x| (x[0] - 0.5 * x[1]).sin());
        assert!(nonlocal_energy(&f, &dk, &mask).unwrap() >= 0.0);
    }

    #[test]
    fn energy_matches_double_loop_oracle() {
        let grid = Arc::new(Grid::custom(3, 12, 2.0).unwrap());
        let spec = make_kernel(KernelFamily::SmoothBump, 0.8, 3).unwrap();
        let dk = discretize(&spec, &grid).unwrap();
        let mask = DomainMask::from_classes(&grid, |_| NodeClass::Exterior);
        let f = Field::from_fn(&grid, |x| (2.0 * x[0]).sin() + x[1] * x[2]);
        let fast = nonlocal_energy(&f, &dk, &mask).unwrap();
        // Brute force over all ordered in-box pairs, halved.
        let p = 12i64;
        let mut acc = 0.0f64;
        for flat in 0..grid.node_count() {
            let idx = grid.unflatten(flat);
            for (o, &w) in dk.offsets().iter().zip(dk.weights()) {
                if *o == [0, 0, 0] {
                    continue;
                }
                let ni: Vec<i64> = (0..3).map(|d| idx[d] as i64 + o[d] as i64).collect();
                if ni.iter().all(|&v| v >= 0 && v < p) {
                    let nf = ((ni[0] * p + ni[1]) * p + ni[2]) as usize;
                    let d = f.values[flat] - f.values[nf];
                    acc += 0.5 * w * d * d;
                }
            }
        }
        let oracle = acc * grid.cell_volume();
        assert!((fast - oracle).abs() / oracle < 1e-10, "{fast} vs {oracle}");
    }

    #[test]
    fn capacity_zero_without_holes_and_monotone_in_hole() {
        let grid = Arc::new(Grid::build(3, 33, 7.5).unwrap());
        let spec = make_kernel(KernelFamily::SmoothBump, 1.0, 3).unwrap();
        let dk = discretize(&spec, &grid).unwrap();
        let mut empty = rasterize(&HoleSet::empty(), &grid, 1.0).unwrap();
        components(&mut empty, 1.0).unwrap();
        let prof = solve_phi(&dk, &empty, 1e-10, &[6.0]).unwrap();
        assert_eq!(capacity_estimate(&prof, &dk, &empty).unwrap(), 0.0);

        let mut caps = Vec::new();
        for radius in [1.5, 2.5] {
            let holes = HoleSet {
                primitives: vec![HolePrimitive::Ball {
                    center: vec![0.0, 0.0, 0.0],
                    radius,
                }],
            };
            let mut mask = rasterize(&holes, &grid, 1.0).unwrap();
            components(&mut mask, 1.0).unwrap();
            let prof = solve_phi(&dk, &mask, 1e-9, &[6.0]).unwrap();
            caps.push(capacity_estimate(&prof, &dk, &mask).unwrap());
        }
        assert!(
            caps[1] > caps[0],
            "capacity should grow with the hole: {caps:?}"
        );
    }

    #[test]
    fn lost_mass_cases() {
        let (grid, dk, mask) = ball_setup();
        let prof = solve_phi(&dk, &mask, 1e-10, &[6.0]).unwrap();
        assert!(matches!(
            lost_mass(&Field::constant(&grid, -0.1), &prof),
            Err(NldError::Data(_))
        ));
        // Data far from the hole loses little.
        let mut far = Field::from_fn(&grid, |x| {
            let d2 = (x[0] - 4.5) * (x[0] - 4.5) + x[1] * x[1] + x[2] * x[2];
            (-6.0 * d2).exp()
        });
        mask.zero_holes(&mut far);
        let lost = lost_mass(&far, &prof).unwrap();
        let total = crate::lattice::integrate(&far);
        assert!(lost < 0.45 * total, "lost {lost} of {total}");
        assert!(lost >= 0.0 && lost <= total);
    }

    #[test]
    fn laplacian_stencil_known_function_oracles() {
        let grid = Arc::new(Grid::build(3, 33, 8.0).unwrap());
        // Constant field: the stencil vanishes identically.
        let c = Field::constant(&grid, 2.5);
        let lap = discrete_laplacian_abs(&c);
        assert_eq!(lap.sup_norm(), 0.0);
        // 1/|x| is harmonic away from the origin: the discrete Laplacian is
        // pure truncation error and its radial max decays fast.
        let f = Field::from_fn(&grid, |x| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r < 0.5 {
                0.0
            } else {
                1.0 / r
            }
        });
        let lap = Field {
            grid: Arc::clone(&grid),
            values: discrete_laplacian_abs(&f).values,
            time_tag: None,
        };
        let bins = radial_profile(&lap, 1.0).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for b in &bins {
            if b.r_mid >= 2.0 && b.r_mid <= 7.0 && b.max > 0.0 {
                xs.push(b.r_mid.ln());
                ys.push(b.max.ln());
            }
        }
        let (_, slope) = line_fit(&xs, &ys).unwrap();
        assert!(slope <= -3.0, "stencil sanity slope {slope}");
    }

    #[test]
    fn capacity_stable_under_refinement() {
        let mut caps = Vec::new();
        for points in [33usize, 49] {
            let grid = Arc::new(Grid::build(3, points, 7.0).unwrap());
            let spec = make_kernel(KernelFamily::SmoothBump, 1.0, 3).unwrap();
            let dk = discretize(&spec, &grid).unwrap();
            let holes = HoleSet {
                primitives: vec![HolePrimitive::Ball {
                    center: vec![0.0, 0.0, 0.0],
                    radius: 1.5,
                }],
            };
            let mut mask = rasterize(&holes, &grid, 1.0).unwrap();
            components(&mut mask, 1.0).unwrap();
            let prof = solve_phi(&dk, &mask, 1e-9, &[6.0]).unwrap();
            caps.push(capacity_estimate(&prof, &dk, &mask).unwrap());
        }
        let rel = (caps[1] - caps[0]).abs() / caps[0];
        assert!(
            rel < 0.10,
            "capacity moved {rel:.3} under refinement: {caps:?}"
        );
    }

    #[test]
    fn bounded_component_mode_basics() {
        // Hollow cube: cavity half-width 1.4 inside a wall out to 2.2.
        let grid = Arc::new(Grid::custom(3, 31, 4.5).unwrap());
        let spec = make_kernel(KernelFamily::SmoothBump, 0.65, 3).unwrap();
        let dk = discretize(&spec, &grid).unwrap();
        let mut mask = DomainMask::from_classes(&grid, |x| {
            let linf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if linf > 1.4 && linf < 2.2 {
                NodeClass::Hole
            } else if linf >= 4.0 {
                NodeClass::OuterPad
            } else {
                NodeClass::Exterior
            }
        });
        components(&mut mask, 0.65).unwrap();
        let bounded: Vec<_> = mask.components.iter().filter(|c| !c.unbounded).collect();
        assert_eq!(bounded.len(), 1);
        let id = bounded[0].id;
        let mode = bounded_component_mode(&dk, &mask, id).unwrap();
        assert!(mode.lambda1 > 0.0 && mode.lambda1 <= 1.0);
        assert!((mode.mode.sup_norm() - 1.0).abs() < 1e-12);
        assert!(mode.mode.values.iter().all(|&v| v >= 0.0));
        // Asking for the unbounded component is an error.
        let unb = mask.unbounded_component_id.unwrap();
        assert!(bounded_component_mode(&dk, &mask, unb).is_err());
    }
}
