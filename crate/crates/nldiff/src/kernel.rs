//! Admissible convolution kernels J: radial profiles, diffusivity, lattice
//! discretization, spectra, convolution, and convolution powers.
//!
//! The production `convolve` is a direct fixed-order stencil sum. With
//! nonnegative weights that sum to exactly 1 this preserves nonnegativity,
//! pointwise order, and the monotone iteration structure bit-for-bit, which
//! the stationary solver and the structure-preserving integrator rely on.
//! The zero-padded spectral route backs convolution powers and the
//! fundamental-solution module, where supports outgrow any fixed stencil.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{NldError, Result};
use crate::fft;
use crate::lattice::{DomainMask, Field, Grid, NodeClass};
use crate::quad;

/// Default node cap for dense-oracle assembly.
pub const ORACLE_NODE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// `c * exp(-1/(1 - (|z|/r)^2))` inside the support; smooth.
    SmoothBump,
    /// `c * (1 - (|z|/r)^2)^4` inside the support; C^3 at the boundary.
    PolynomialCompact,
}

impl KernelFamily {
    pub fn parse(s: &str) -> Result<KernelFamily> {
        match s {
            "smooth_bump" => Ok(KernelFamily::SmoothBump),
            "polynomial_compact" => Ok(KernelFamily::PolynomialCompact),
            other => Err(NldError::Config(format!(
                "unknown kernel.family `{other}` (expected smooth_bump or polynomial_compact)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::SmoothBump => "smooth_bump",
            KernelFamily::PolynomialCompact => "polynomial_compact",
        }
    }

    /// Unnormalized radial profile as a function of s = rho / r in [0, 1).
    fn profile(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 0.0;
        }
        match self {
            KernelFamily::SmoothBump => (-1.0 / (1.0 - s * s)).exp(),
            KernelFamily::PolynomialCompact => {
                let t = 1.0 - s * s;
                t * t * t * t
            }
        }
    }
}

/// A continuous admissible kernel: radially symmetric, nonnegative,
/// compactly supported, unit integral, positive at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub support_radius: f64,
    pub dimension: usize,
    /// Multiplier making the total integral 1.
    pub normalization: f64,
}

impl KernelSpec {
    /// J(z) for |z| = rho.
    pub fn value(&self, rho: f64) -> f64 {
        self.normalization * self.family.profile(rho / self.support_radius)
    }
}

const QUAD_TOL: f64 = 1e-12;

/// Build a kernel spec and compute its normalization by adaptive quadrature.
pub fn make_kernel(
    family: KernelFamily,
    support_radius: f64,
    dimension: usize,
) -> Result<KernelSpec> {
    if dimension < 3 {
        return Err(NldError::UnsupportedDimension { dim: dimension });
    }
    if !(support_radius > 0.0) {
        return Err(NldError::Config(format!(
            "kernel.radius must be positive (got {support_radius})"
        )));
    }
    let mass = quad::radial_moment(
        |rho| family.profile(rho / support_radius),
        support_radius,
        dimension,
        0,
        QUAD_TOL,
    )?;
    Ok(KernelSpec {
        family,
        support_radius,
        dimension,
        normalization: 1.0 / mass,
    })
}

/// Diffusivity `alpha = (1/2N) Int |z|^2 J(z) dz` by adaptive radial
/// quadrature.
pub fn diffusivity(spec: &KernelSpec) -> Result<f64> {
    let second = quad::radial_moment(
        |rho| spec.value(rho),
        spec.support_radius,
        spec.dimension,
        2,
        QUAD_TOL,
    )?;
    Ok(second / (2.0 * spec.dimension as f64))
}

/// Lattice samples of a kernel: offsets, exactly-unit-mass weights, and the
/// discrete spectrum on the padded grid.
#[derive(Debug, Clone)]
pub struct DiscreteKernel {
    grid: Arc<Grid>,
    pub dimension: usize,
    pub spacing: f64,
    pub support_radius: f64,
    /// Continuum diffusivity of the kernel this was sampled from.
    pub alpha: f64,
    /// All offsets with nonzero weight (center included), lexicographic.
    offsets: Vec<[i32; 3]>,
    weights: Vec<f64>,
    /// Flat index deltas matching `offsets` on this grid.
    flat_deltas: Vec<isize>,
    /// max |o_d| over offsets.
    reach: usize,
    padded: [usize; 3],
    spectrum: Vec<Complex64>,
}

/// Renormalize weights so the compensated sum (the crate's canonical
/// reduction, see [`NeumaierSum`]) is exactly 1.0. The center weight is set
/// to the complement of the rest, which is Sterbenz-exact when the rest lies
/// in [0.5, 2]; the adjustment keeps the offset-negation symmetry because
/// the center is its own negation.
fn normalize_exact(offsets: &[[i32; 3]], weights: &mut [f64]) -> Result<()> {
    let center = offsets
        .iter()
        .position(|o| *o == [0, 0, 0])
        .expect("center offset present");
    let compensated = |w: &[f64]| -> f64 {
        let mut s = crate::lattice::NeumaierSum::new();
        for &v in w {
            s.add(v);
        }
        s.value()
    };
    let s = compensated(weights);
    if !(s > 0.0) {
        return Err(NldError::Numerical("kernel weights sum to zero".into()));
    }
    for w in weights.iter_mut() {
        *w /= s;
    }
    for _ in 0..8 {
        let mut rest = crate::lattice::NeumaierSum::new();
        for (i, &w) in weights.iter().enumerate() {
            if i != center {
                rest.add(w);
            }
        }
        let c = 1.0 - rest.value();
        if c < 0.0 {
            return Err(NldError::Numerical(
                "weight renormalization drove the center weight negative".into(),
            ));
        }
        weights[center] = c;
        if compensated(weights) == 1.0 {
            return Ok(());
        }
    }
    Err(NldError::Numerical(
        "weight sum failed to reach exactly 1.0".into(),
    ))
}

/// Sample a kernel spec on a grid. Requires `h < support_radius / 2` so the
/// stencil sees at least ~5 nodes across the support per axis.
pub fn discretize(spec: &KernelSpec, grid: &Arc<Grid>) -> Result<DiscreteKernel> {
    let h = grid.spacing();
    let r = spec.support_radius;
    if h >= r / 2.0 {
        return Err(NldError::Resolution(format!(
            "kernel support under-resolved: spacing {h} must be < support/2 = {}",
            r / 2.0
        )));
    }
    let mut offsets = vec![[0i32, 0, 0]];
    offsets.extend(crate::lattice::offsets_within(grid.dim(), h, r));
    offsets.sort_unstable();
    let mut weights: Vec<f64> = offsets
        .iter()
        .map(|o| {
            let n2 = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64;
            spec.value(n2.sqrt() * h) * grid.cell_volume()
        })
        .collect();
    normalize_exact(&offsets, &mut weights)?;
    let alpha = diffusivity(spec)?;
    Ok(DiscreteKernel::from_parts(
        grid,
        spec.dimension,
        r,
        alpha,
        offsets,
        weights,
    ))
}

impl DiscreteKernel {
    fn from_parts(
        grid: &Arc<Grid>,
        dimension: usize,
        support_radius: f64,
        alpha: f64,
        offsets: Vec<[i32; 3]>,
        weights: Vec<f64>,
    ) -> DiscreteKernel {
        let strides = grid.strides();
        let flat_deltas = offsets
            .iter()
            .map(|o| {
                (0..grid.dim())
                    .map(|d| o[d] as isize * strides[d] as isize)
                    .sum()
            })
            .collect();
        let reach = offsets
            .iter()
            .map(|o| o.iter().map(|v| v.unsigned_abs() as usize).max().unwrap())
            .max()
            .unwrap_or(0);
        let padded = fft::padded_dims(grid, 2 * reach);
        let spectrum = fft::stencil_spectrum(&offsets, &weights, grid.dim(), &padded);
        DiscreteKernel {
            grid: Arc::clone(grid),
            dimension,
            spacing: grid.spacing(),
            support_radius,
            alpha,
            offsets,
            weights,
            flat_deltas,
            reach,
            padded,
            spectrum,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Compensated weight sum; exactly 1.0 after renormalization.
    pub fn weight_sum(&self) -> f64 {
        let mut s = crate::lattice::NeumaierSum::new();
        for &v in &self.weights {
            s.add(v);
        }
        s.value()
    }

    pub fn reach(&self) -> usize {
        self.reach
    }

    pub fn padded_dims(&self) -> &[usize; 3] {
        &self.padded
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    pub fn weight_at(&self, offset: &[i32; 3]) -> f64 {
        match self.offsets.binary_search(offset) {
            Ok(i) => self.weights[i],
            Err(_) => 0.0,
        }
    }

    /// The kernel as a density field centered at the origin node.
    pub fn as_density_field(&self) -> Field {
        let mut f = Field::zeros(&self.grid);
        let center = (self.grid.points_per_axis() - 1) / 2;
        let vol = self.grid.cell_volume();
        for (o, &w) in self.offsets.iter().zip(&self.weights) {
            let mut idx = [0usize; 3];
            for d in 0..self.grid.dim() {
                idx[d] = (center as i64 + o[d] as i64) as usize;
            }
            f.values[self.grid.flatten(&idx[..self.grid.dim()])] = w / vol;
        }
        f
    }

    fn check_grid(&self, f: &Field) -> Result<()> {
        if f.grid.as_ref() != self.grid.as_ref() {
            return Err(NldError::GridMismatch(
                "field grid does not match the kernel's grid".into(),
            ));
        }
        Ok(())
    }
}

/// Direct-stencil convolution with zero extension outside the box.
///
/// The per-node sum runs over the kernel's fixed offset order, so the result
/// is deterministic for any thread count and is monotone in the input field.
pub fn convolve(dk: &DiscreteKernel, f: &Field) -> Result<Field> {
    let mut out = Field::zeros(&f.grid);
    convolve_into(dk, f, &mut out)?;
    Ok(out)
}

/// `convolve` writing into a caller-provided output field.
pub fn convolve_into(dk: &DiscreteKernel, f: &Field, out: &mut Field) -> Result<()> {
    dk.check_grid(f)?;
    dk.check_grid(out)?;
    let grid = &f.grid;
    let p = grid.points_per_axis();
    let dim = grid.dim();
    let reach = dk.reach;
    let vals = &f.values[..];
    let weights = &dk.weights[..];
    let deltas = &dk.flat_deltas[..];
    let offsets = &dk.offsets[..];
    let outer_stride: usize = p.pow((dim - 1) as u32);

    out.values
        .par_chunks_mut(outer_stride)
        .enumerate()
        .for_each(|(i0, slab)| {
            let axis0_interior = i0 >= reach && i0 + reach < p;
            for (rest, o) in slab.iter_mut().enumerate() {
                let flat = i0 * outer_stride + rest;
                // Interior fast path: no bounds checks.
                let mut interior = axis0_interior;
                if interior && dim >= 2 {
                    let mut r = rest;
                    for _ in 1..dim {
                        let i = r % p;
                        r /= p;
                        if i < reach || i + reach >= p {
                            interior = false;
                            break;
                        }
                    }
                }
                let mut acc = 0.0f64;
                if interior {
                    for (&w, &dl) in weights.iter().zip(deltas) {
                        acc += w * vals[(flat as isize + dl) as usize];
                    }
                } else {
                    let idx = grid.unflatten(flat);
                    for (o, &w) in offsets.iter().zip(weights) {
                        let mut ok = true;
                        let mut nf = 0usize;
                        for d in 0..dim {
                            let ni = idx[d] as i64 + o[d] as i64;
                            if ni < 0 || ni >= p as i64 {
                                ok = false;
                                break;
                            }
                            nf = nf * p + ni as usize;
                        }
                        if ok {
                            acc += w * vals[nf];
                        }
                    }
                }
                *o = acc;
            }
        });
    out.time_tag = f.time_tag;
    Ok(())
}

/// Spectral convolution on the zero-padded grid. Numerically equivalent to
/// [`convolve`] up to FFT roundoff; used for cross-validation and wherever a
/// large effective support makes the stencil route impractical.
pub fn convolve_spectral(dk: &DiscreteKernel, f: &Field) -> Result<Field> {
    dk.check_grid(f)?;
    let dim = f.grid.dim();
    let mut data = fft::embed(f, &dk.padded);
    fft::fft_nd(&mut data, &dk.padded[..dim], false);
    for (v, s) in data.iter_mut().zip(&dk.spectrum) {
        *v *= s;
    }
    fft::fft_nd(&mut data, &dk.padded[..dim], true);
    let total: f64 = dk.padded[..dim].iter().product::<usize>() as f64;
    for v in data.iter_mut() {
        *v /= total;
    }
    let (out, _) = fft::extract(&data, &f.grid, &dk.padded);
    Ok(out)
}

/// n-fold self-convolution of the kernel, computed on the padded spectrum.
pub fn convolution_power(dk: &DiscreteKernel, n: usize) -> Result<DiscreteKernel> {
    if n == 0 {
        return Err(NldError::Domain("convolution power requires n >= 1".into()));
    }
    if n == 1 {
        return Ok(dk.clone());
    }
    let dim = dk.grid.dim();
    let new_reach = n * dk.reach;
    let q = dk.padded[0];
    if 2 * new_reach + 1 > q {
        return Err(NldError::Resolution(format!(
            "support of J^(*{n}) spans {} nodes but the padded grid holds only {q}; \
             use a larger box or fewer powers",
            2 * new_reach + 1
        )));
    }
    // Pointwise spectrum power, then back to an offset stencil.
    let mut data: Vec<Complex64> = dk.spectrum.iter().map(|s| s.powu(n as u32)).collect();
    fft::fft_nd(&mut data, &dk.padded[..dim], true);
    let total: f64 = dk.padded[..dim].iter().product::<usize>() as f64;
    let m = new_reach as i32;
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let range = |d: usize| -> std::ops::RangeInclusive<i32> {
        if d < dim {
            -m..=m
        } else {
            0..=0
        }
    };
    let max_r2 = ((n as f64) * dk.support_radius / dk.spacing).powi(2);
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let o = [i, j, k];
                let n2 = (i * i + j * j + k * k) as f64;
                if n2 > max_r2 {
                    continue;
                }
                let mut flat = 0usize;
                for d in 0..dim {
                    let qd = dk.padded[d] as i64;
                    let wrapped = ((o[d] as i64 % qd) + qd) % qd;
                    flat = flat * dk.padded[d] + wrapped as usize;
                }
                // Clamp FFT noise; true weights are nonnegative.
                let w = (data[flat].re / total).max(0.0);
                if w > 0.0 || o == [0, 0, 0] {
                    offsets.push(o);
                    weights.push(w);
                }
            }
        }
    }
    normalize_exact(&offsets, &mut weights)?;
    Ok(DiscreteKernel::from_parts(
        &dk.grid,
        dk.dimension,
        n as f64 * dk.support_radius,
        n as f64 * dk.alpha,
        offsets,
        weights,
    ))
}

/// Dense generator for the masked semi-discrete system: rows act as
/// `convolve - identity` on non-hole nodes and vanish on hole nodes.
/// Oracle use only; refuses more than `cap` nodes.
pub fn assemble_dense(dk: &DiscreteKernel, mask: &DomainMask, cap: usize) -> Result<DMatrix<f64>> {
    let grid = &mask.grid;
    if grid.as_ref() != dk.grid.as_ref() {
        return Err(NldError::GridMismatch(
            "mask grid does not match the kernel's grid".into(),
        ));
    }
    let n = grid.node_count();
    if n > cap {
        return Err(NldError::OracleScale { nodes: n, cap });
    }
    let p = grid.points_per_axis();
    let dim = grid.dim();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for row in 0..n {
        if mask.class[row] == NodeClass::Hole {
            continue;
        }
        let idx = grid.unflatten(row);
        for (o, &w) in dk.offsets.iter().zip(&dk.weights) {
            let mut ok = true;
            let mut col = 0usize;
            for d in 0..dim {
                let ni = idx[d] as i64 + o[d] as i64;
                if ni < 0 || ni >= p as i64 {
                    ok = false;
                    break;
                }
                col = col * p + ni as usize;
            }
            if ok {
                a[(row, col)] += w;
            }
        }
        a[(row, row)] -= 1.0;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice;

    fn grid(points: usize, extent: f64) -> Arc<Grid> {
        Arc::new(Grid::custom(3, points, extent).unwrap())
    }

    fn bump(r: f64) -> KernelSpec {
        make_kernel(KernelFamily::SmoothBump, r, 3).unwrap()
    }

    #[test]
    fn normalization_unit_integral() {
        for family in [KernelFamily::SmoothBump, KernelFamily::PolynomialCompact] {
            let spec = make_kernel(family, 1.0, 3).unwrap();
            // Independent rule: composite Simpson on the radial integrand.
            let mass = quad::unit_sphere_area(3)
                * quad::simpson(|r| r * r * spec.value(r), 0.0, 1.0, 4096);
            assert!((mass - 1.0).abs() < 1e-10, "{family:?}: {mass}");
            assert!(spec.value(0.0) > 0.0);
            assert_eq!(spec.value(1.0), 0.0);
            assert_eq!(spec.value(1.7), 0.0);
        }
    }

    #[test]
    fn rejects_low_dimension_and_bad_radius() {
        assert!(matches!(
            make_kernel(KernelFamily::SmoothBump, 1.0, 2),
            Err(NldError::UnsupportedDimension { dim: 2 })
        ));
        assert!(make_kernel(KernelFamily::SmoothBump, 0.0, 3).is_err());
    }

    #[test]
    fn diffusivity_positive_and_scales_quadratically() {
        let a1 = diffusivity(&bump(1.0)).unwrap();
        let a2 = diffusivity(&bump(2.0)).unwrap();
        assert!(a1 > 0.0);
        assert!((a2 / a1 - 4.0).abs() < 1e-9, "ratio {}", a2 / a1);
    }

    #[test]
    fn diffusivity_agrees_with_second_quadrature() {
        let spec = bump(1.0);
        let alpha = diffusivity(&spec).unwrap();
        let second = quad::unit_sphere_area(3)
            * quad::simpson(|r| r.powi(4) * spec.value(r), 0.0, 1.0, 1 << 14);
        let alpha2 = second / 6.0;
        assert!((alpha - alpha2).abs() / alpha < 1e-8, "{alpha} vs {alpha2}");
    }

    #[test]
    fn discretize_exact_invariants() {
        let g = grid(17, 3.5);
        let dk = discretize(&bump(1.0), &g).unwrap();
        assert_eq!(dk.weight_sum(), 1.0);
        assert_eq!(dk.spectrum()[0], Complex64::new(1.0, 0.0));
        for (o, &w) in dk.offsets().iter().zip(dk.weights()) {
            assert!(w >= 0.0);
            let neg = [-o[0], -o[1], -o[2]];
            assert_eq!(w, dk.weight_at(&neg), "asymmetry at {o:?}");
        }
    }

    #[test]
    fn discretize_underresolved() {
        let g = grid(9, 4.0); // h = 1.0 >= r/2
        assert!(matches!(
            discretize(&bump(1.0), &g),
            Err(NldError::Resolution(_))
        ));
    }

    #[test]
    fn convolve_constant_and_delta() {
        let g = grid(17, 3.5);
        let dk = discretize(&bump(1.0), &g).unwrap();
        let c = Field::constant(&g, 2.75);
        let out = convolve(&dk, &c).unwrap();
        // Interior nodes one reach from the boundary keep the constant.
        let p = 17;
        for i in dk.reach()..p - dk.reach() {
            let flat = g.flatten(&[i, 8, 8]);
            assert!((out.values[flat] - 2.75).abs() <= 4.0 * f64::EPSILON * 2.75);
        }
        // A discrete delta reproduces the kernel weights exactly.
        let mut delta = Field::zeros(&g);
        delta.values[g.flatten(&[8, 8, 8])] = 1.0;
        let out = convolve(&dk, &delta).unwrap();
        for (o, &w) in dk.offsets().iter().zip(dk.weights()) {
            let idx = [
                (8 + o[0]) as usize,
                (8 + o[1]) as usize,
                (8 + o[2]) as usize,
            ];
            assert_eq!(out.values[g.flatten(&idx)], w);
        }
    }

    // Brute-force double-loop oracle on a small grid.
    #[test]
    fn convolve_matches_double_loop() {
        let g = grid(16, 3.0);
        let dk = discretize(&bump(1.0), &g).unwrap();
        let f = Field::from_fn(&g, |x| {
            (1.3 * x[0]).sin() * (0.7 * x[1] + 0.2).cos() + 0.1 * x[2] * x[2]
        });
        let fast = convolve(&dk, &f).unwrap();
        let p = 16usize;
        let mut worst = 0.0f64;
        for flat in 0..g.node_count() {
            let idx = g.unflatten(flat);
            let mut acc = 0.0;
            for (o, &w) in dk.offsets().iter().zip(dk.weights()) {
                let ni: Vec<i64> = (0..3).map(|d| idx[d] as i64 + o[d] as i64).collect();
                if ni.iter().all(|&v| v >= 0 && v < p as i64) {
                    let nf = ((ni[0] * p as i64 + ni[1]) * p as i64 + ni[2]) as usize;
                    acc += w * f.values[nf];
                }
            }
            worst = worst.max((acc - fast.values[flat]).abs());
        }
        assert!(worst / fast.sup_norm() < 1e-12, "worst {worst}");
    }

    #[test]
    fn convolve_spectral_matches_direct() {
        let g = grid(16, 3.0);
        let dk = discretize(&bump(1.0), &g).unwrap();
        let f = Field::from_fn(&g, |x| (x[0] * x[1] - x[2]).tanh() + 0.5);
        let a = convolve(&dk, &f).unwrap();
        let b = convolve_spectral(&dk, &f).unwrap();
        let mut worst = 0.0f64;
        for (x, y) in a.values.iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
        assert!(worst / a.sup_norm() < 1e-12, "worst {worst}");
    }

    #[test]
    fn convolve_structure_preservation() {
        let g = grid(15, 3.0);
        let dk = discretize(&bump(1.0), &g).unwrap();
        let f = Field::from_fn(&g, |x| (x[0] + 1.1).abs() * (2.0 - x[1]).max(0.0));
        let out = convolve(&dk, &f).unwrap();
        // Nonnegativity is exact for nonnegative input.
        assert!(out.values.iter().all(|&v| v >= 0.0));
        // Sup norm does not grow (up to a few ulps of headroom).
        assert!(out.sup_norm() <= f.sup_norm() * (1.0 + 4.0 * f64::EPSILON));
        // Linearity.
        let gfield = Field::from_fn(&g, |x| (0.4 * x[2]).cos());
        let a = 1.7;
        let b = -0.6;
        let mut combo = Field::zeros(&g);
        for i in 0..combo.values.len() {
            combo.values[i] = a * f.values[i] + b * gfield.values[i];
        }
        let lhs = convolve(&dk, &combo).unwrap();
        let cf = convolve(&dk, &f).unwrap();
        let cg = convolve(&dk, &gfield).unwrap();
        let mut worst = 0.0f64;
        for i in 0..lhs.values.len() {
            worst = worst.max((lhs.values[i] - (a * cf.values[i] + b * cg.values[i])).abs());
        }
        assert!(worst < 1e-12 * (1.0 + lhs.sup_norm()));
    }

    #[test]
    fn convolve_mass_leakage_bound() {
        let g = grid(17, 3.5);
        let dk = discretize(&bump(1.0), &g).unwrap();
        let f = Field::from_fn(&g, |x| 1.0 / (1.0 + x.iter().map(|v| v * v).sum::<f64>()));
        let out = convolve(&dk, &f).unwrap();
        let before = lattice::integrate(&f);
        let after = lattice::integrate(&out);
        // Leakage is bounded by sup|f| times the volume of the one-support
        // outer shell.
        let l = g.extent();
        let shell = (2.0 * l).powi(3) - (2.0 * (l - 1.0)).powi(3);
        assert!((before - after).abs() <= f.sup_norm() * shell);
        assert!(after <= before);
    }

    #[test]
    fn power_identity_and_mass() {
        let g = grid(17, 3.0);
        let dk = discretize(&bump(0.8), &g).unwrap();
        let p1 = convolution_power(&dk, 1).unwrap();
        assert_eq!(p1.weights(), dk.weights());
        for n in [2usize, 3] {
            let pn = convolution_power(&dk, n).unwrap();
            assert!((pn.weight_sum() - 1.0).abs() < 1e-12);
            assert_eq!(pn.weight_sum(), 1.0); // renormalized exactly
            assert!((pn.alpha - n as f64 * dk.alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn power_two_matches_direct_convolution() {
        let g = grid(16, 2.4);
        let dk = discretize(&bump(0.7), &g).unwrap();
        let p2 = convolution_power(&dk, 2).unwrap();
        let kfield = dk.as_density_field();
        let conv = convolve(&dk, &kfield).unwrap();
        let vol = g.cell_volume();
        let center = (16 - 1) / 2; // even grid: density field centered here
        let mut worst = 0.0f64;
        for (o, &w) in p2.offsets().iter().zip(p2.weights()) {
            let idx = [
                (center as i64 + o[0] as i64) as usize,
                (center as i64 + o[1] as i64) as usize,
                (center as i64 + o[2] as i64) as usize,
            ];
            let direct = conv.values[g.flatten(&idx)] * vol;
            worst = worst.max((w - direct).abs());
        }
        assert!(worst < 1e-12, "worst {worst}");
    }

    #[test]
    fn power_mass_exact_up_to_box_limit() {
        // Mass multiplicativity: every representable power keeps exactly
        // unit mass; powers whose support outgrows the padding refuse.
        let g = Arc::new(Grid::custom(3, 65, 14.0).unwrap());
        let dk = discretize(&bump(1.0), &g).unwrap();
        for n in [2usize, 4, 8, 16] {
            let pn = convolution_power(&dk, n).unwrap();
            assert_eq!(pn.weight_sum(), 1.0, "n = {n}");
        }
        assert!(matches!(
            convolution_power(&dk, 64),
            Err(NldError::Resolution(_))
        ));
    }

    #[test]
    fn power_support_exceeds_box() {
        let g = grid(17, 3.5);
        let dk = discretize(&bump(1.0), &g).unwrap();
        let err = convolution_power(&dk, 50);
        assert!(matches!(err, Err(NldError::Resolution(_))));
    }

    #[test]
    fn dense_oracle_matches_convolve_path() {
        let g = grid(9, 1.6);
        let dk = discretize(&bump(0.9), &g).unwrap();
        let holes = crate::lattice::HoleSet {
            primitives: vec![crate::lattice::HolePrimitive::Ball {
                center: vec![0.0, 0.0, 0.0],
                radius: 0.4,
            }],
        };
        // Oracle-scale mask: skip the production margin rule.
        let mask = DomainMask::from_classes(&g, |x| {
            if holes.contains(x) {
                NodeClass::Hole
            } else {
                NodeClass::Exterior
            }
        });
        let a = assemble_dense(&dk, &mask, ORACLE_NODE_CAP).unwrap();

        // K-part (A + I on non-hole rows) is symmetric.
        for r in 0..a.nrows() {
            if mask.class[r] == NodeClass::Hole {
                continue;
            }
            for c in 0..a.ncols() {
                if mask.class[c] == NodeClass::Hole {
                    continue;
                }
                let kr = a[(r, c)] + if r == c { 1.0 } else { 0.0 };
                let kc = a[(c, r)] + if r == c { 1.0 } else { 0.0 };
                assert!((kr - kc).abs() < 1e-15);
            }
        }

        // Row sums: 0 at interior nodes, <= 0 near the box edge.
        for r in 0..a.nrows() {
            if mask.class[r] == NodeClass::Hole {
                continue;
            }
            let sum: f64 = a.row(r).iter().sum();
            let idx = g.unflatten(r);
            if g.face_layers(&idx) >= dk.reach() {
                assert!(sum.abs() < 1e-13, "interior row {r} sums to {sum}");
            } else {
                assert!(sum <= 1e-13, "edge row {r} sums to {sum}");
            }
        }

        // Action matches mask(convolve - id) on a random-ish field.
        let f = Field::from_fn(&g, |x| (x[0] * 2.1).sin() + (x[1] - x[2]).cos());
        let conv = convolve(&dk, &f).unwrap();
        let v = nalgebra::DVector::from_column_slice(&f.values);
        let av = &a * v;
        for i in 0..g.node_count() {
            let want = if mask.class[i] == NodeClass::Hole {
                0.0
            } else {
                conv.values[i] - f.values[i]
            };
            assert!((av[i] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn dense_oracle_cap() {
        let g = grid(17, 3.5);
        let dk = discretize(&bump(1.0), &g).unwrap();
        let mask = DomainMask::from_classes(&g, |_| NodeClass::Exterior);
        assert!(matches!(
            assemble_dense(&dk, &mask, 4096),
            Err(NldError::OracleScale { .. })
        ));
    }
}
