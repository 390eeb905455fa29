//! Dense matrix exponential by scaling-and-squaring with the [13/13] Padé
//! approximant (Higham 2005). Oracle-grade accuracy for the modest operator
//! norms of the masked generator (||A|| <= 2).

use nalgebra::DMatrix;

// Padé-13 numerator coefficients b_0..b_13.
const B: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// theta_13 threshold for the [13/13] approximant.
const THETA_13: f64 = 5.371920351148152;

/// exp(M) for a square matrix.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "expm needs a square matrix");
    let norm = one_norm(m);
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as u32
    } else {
        0
    };
    let a = m / 2f64.powi(s as i32);

    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    // U = A (A6 (b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I)
    let u_inner = &a6 * (B[13] * &a6 + B[11] * &a4 + B[9] * &a2)
        + B[7] * &a6
        + B[5] * &a4
        + B[3] * &a2
        + B[1] * &id;
    let u = &a * u_inner;
    // V = A6 (b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
    let v = &a6 * (B[12] * &a6 + B[10] * &a4 + B[8] * &a2)
        + B[6] * &a6
        + B[4] * &a4
        + B[2] * &a2
        + B[0] * &id;

    // Solve (V - U) X = (V + U).
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut x = lhs
        .lu()
        .solve(&rhs)
        .expect("Pade denominator is singular; matrix norm out of range");
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_closed_forms() {
        // exp of a diagonal matrix.
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 0.5, 2.0]));
        let e = expm(&d);
        for (i, &lam) in [-1.0f64, 0.5, 2.0].iter().enumerate() {
            assert!((e[(i, i)] - lam.exp()).abs() < 1e-14);
        }
        // exp of a nilpotent matrix: [[0, 1], [0, 0]] -> [[1, 1], [0, 1]].
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&n);
        assert!((e[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((e[(0, 1)] - 1.0).abs() < 1e-15);
        assert!((e[(1, 0)]).abs() < 1e-15);
        // Rotation generator: exp([[0, -t], [t, 0]]) is a rotation by t.
        let t = 0.7f64;
        let r = expm(&DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]));
        assert!((r[(0, 0)] - t.cos()).abs() < 1e-14);
        assert!((r[(1, 0)] - t.sin()).abs() < 1e-14);
    }

    #[test]
    fn semigroup_property() {
        let n = 24;
        let mut a = DMatrix::<f64>::zeros(n, n);
        // A band matrix with norm around 2, like the masked generator.
        for i in 0..n {
            a[(i, i)] = -1.0;
            if i + 1 < n {
                a[(i, i + 1)] = 0.5;
                a[(i + 1, i)] = 0.5;
            }
        }
        let e1 = expm(&a.clone().scale(0.6));
        let e2 = expm(&a.clone().scale(1.1));
        let e3 = expm(&a.scale(1.7));
        let prod = &e1 * &e2;
        let diff = (&prod - &e3).abs().max();
        assert!(diff < 1e-13, "semigroup violation {diff}");
    }
}
