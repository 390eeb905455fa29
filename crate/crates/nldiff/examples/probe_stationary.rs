//! Solves the stationary profile on a mid-size grid and prints the
//! estimator diagnostics (residual, stage records, C* by fit and by flux,
//! decay slopes). Handy when tuning grids.

use std::sync::Arc;
use std::time::Instant;

use nldiff::kernel::{diffusivity, discretize, make_kernel, KernelFamily};
use nldiff::lattice::{components, rasterize, Grid, HolePrimitive, HoleSet};
use nldiff::stationary::{estimate_cstar, laplacian_decay_check, psi_decay_slope, solve_phi};

fn main() {
    let t0 = Instant::now();
    let grid = Arc::new(Grid::build(3, 65, 12.0).unwrap());
    let spec = make_kernel(KernelFamily::SmoothBump, 1.0, 3).unwrap();
    println!("alpha = {:.8}", diffusivity(&spec).unwrap());
    let dk = Arc::new(discretize(&spec, &grid).unwrap());
    let holes = HoleSet {
        primitives: vec![HolePrimitive::Ball {
            center: vec![0.0, 0.0, 0.0],
            radius: 2.0,
        }],
    };
    let mut mask = rasterize(&holes, &grid, 1.0).unwrap();
    components(&mut mask, 1.0).unwrap();
    println!("setup {:?}", t0.elapsed());

    let t1 = Instant::now();
    let prof = solve_phi(&dk, &mask, 1e-10, &[6.0, 11.0]).unwrap();
    println!("solve {:?}; residual {:.3e}", t1.elapsed(), prof.residual);
    for st in &prof.stages {
        println!(
            "  stage r={} C={:.4} iters={} below_prev={} down={}",
            st.radius, st.clamp_cstar, st.iterations, st.below_previous, st.nonincreasing
        );
    }
    let (fit, mu, flux) = estimate_cstar(&prof, (4.0, 9.5)).unwrap();
    println!(
        "cstar_fit = {fit:.5}, flux_mu = {mu:.5}, cstar_flux = {flux:.5}, rel gap {:.3}%",
        100.0 * (fit - flux).abs() / fit
    );
    let slope = psi_decay_slope(&prof, (4.0, 9.5)).unwrap();
    println!("psi decay slope = {:?}", slope);
    let lap = laplacian_decay_check(&prof, (4.0, 9.5)).unwrap();
    println!("laplacian decay slope = {lap:.3}");
}
