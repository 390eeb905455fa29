//! Property-based invariants for the lattice operators and the on-disk
//! snapshot format.

use std::sync::Arc;

use proptest::prelude::*;

use nldiff::kernel::{convolve, discretize, make_kernel, KernelFamily};
use nldiff::lattice::{integrate, weighted_mass, Field, Grid};
use nldiff::snapshot::{read_snapshot, write_snapshot};

fn small_grid() -> Arc<Grid> {
    Arc::new(Grid::custom(3, 11, 2.0).unwrap())
}

fn field_strategy(grid: Arc<Grid>, lo: f64, hi: f64) -> impl Strategy<Value = Field> {
    let n = grid.node_count();
    proptest::collection::vec(lo..hi, n).prop_map(move |values| Field {
        grid: Arc::clone(&grid),
        values,
        time_tag: None,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn convolve_linear_and_bounded(
        f in field_strategy(small_grid(), -3.0, 3.0),
        g in field_strategy(small_grid(), -3.0, 3.0),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let grid = f.grid.clone();
        let spec = make_kernel(KernelFamily::SmoothBump, 0.9, 3).unwrap();
        let dk = discretize(&spec, &grid).unwrap();
        let mut combo = Field::zeros(&grid);
        for i in 0..combo.values.len() {
            combo.values[i] = a * f.values[i] + b * g.values[i];
        }
        let lhs = convolve(&dk, &combo).unwrap();
        let cf = convolve(&dk, &f).unwrap();
        let cg = convolve(&dk, &g).unwrap();
        let scale = 1.0 + lhs.sup_norm();
        for i in 0..lhs.values.len() {
            let rhs = a * cf.values[i] + b * cg.values[i];
            prop_assert!((lhs.values[i] - rhs).abs() <= 1e-12 * scale);
        }
        // Sup norm never grows (beyond rounding headroom).
        prop_assert!(cf.sup_norm() <= f.sup_norm() * (1.0 + 4.0 * f64::EPSILON));
    }

    #[test]
    fn convolve_preserves_nonnegativity_exactly(
        f in field_strategy(small_grid(), 0.0, 5.0),
    ) {
        let grid = f.grid.clone();
        let spec = make_kernel(KernelFamily::SmoothBump, 0.9, 3).unwrap();
        let dk = discretize(&spec, &grid).unwrap();
        let out = convolve(&dk, &f).unwrap();
        prop_assert!(out.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn weighted_mass_symmetric_and_consistent(
        u in field_strategy(small_grid(), -1.0, 1.0),
        w in field_strategy(small_grid(), -1.0, 1.0),
    ) {
        let ab = weighted_mass(&u, &w).unwrap();
        let ba = weighted_mass(&w, &u).unwrap();
        prop_assert_eq!(ab, ba);
        let one = Field::constant(&u.grid, 1.0);
        let wm = weighted_mass(&u, &one).unwrap();
        let int = integrate(&u);
        prop_assert!((wm - int).abs() <= 1e-13 * (1.0 + int.abs()));
    }

    #[test]
    fn snapshot_roundtrip_bit_exact(
        f in field_strategy(small_grid(), -1e6, 1e6),
        t in proptest::option::of(-1e3f64..1e3),
    ) {
        let mut f = f;
        f.time_tag = t;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nldf");
        write_snapshot(&f, "field", &path).unwrap();
        let (g, name) = read_snapshot(&path).unwrap();
        prop_assert_eq!(name, "field");
        for (a, b) in f.values.iter().zip(&g.values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

// Exact rational-arithmetic oracle for the compensated weighted mass: every
// f64 is a dyadic rational, so the sum of products is computed exactly and
// compared against the Neumaier result.
#[test]
fn weighted_mass_matches_exact_rational_sum() {
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Signed, ToPrimitive, Zero};
    use rand::{Rng, SeedableRng};

    fn to_rational(x: f64) -> BigRational {
        // x = mantissa * 2^exp exactly.
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1i64 } else { 1 };
        let exp_bits = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, exp) = if exp_bits == 0 {
            (frac as i128, -1074i64)
        } else {
            ((frac | (1 << 52)) as i128, exp_bits - 1075)
        };
        let mant = BigInt::from(sign as i128 * mant);
        let two = BigInt::from(2);
        if exp >= 0 {
            BigRational::new(mant * two.pow(exp as u32), BigInt::one())
        } else {
            BigRational::new(mant, two.pow((-exp) as u32))
        }
    }

    let grid = Arc::new(Grid::custom(3, 16, 3.0).unwrap());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut u = Field::zeros(&grid);
    let mut w = Field::zeros(&grid);
    for i in 0..u.values.len() {
        u.values[i] = rng.gen::<f64>() * 2.0 - 1.0;
        w.values[i] = rng.gen::<f64>() * 2.0 - 1.0;
    }
    let fast = weighted_mass(&u, &w).unwrap();
    let mut exact = BigRational::zero();
    for (a, b) in u.values.iter().zip(&w.values) {
        exact += to_rational(*a) * to_rational(*b);
    }
    exact *= to_rational(grid.cell_volume());
    let exact_f = exact.to_f64().unwrap();
    let denom = exact.abs().to_f64().unwrap().max(1e-30);
    assert!(
        (fast - exact_f).abs() / denom < 1e-14,
        "fast {fast} vs exact {exact_f}"
    );
}
