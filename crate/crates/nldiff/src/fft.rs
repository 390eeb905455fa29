//! Zero-padded spectral machinery shared by convolution powers and the
//! fundamental-solution module.
//!
//! Fields live on the P^N box; spectral work happens on a padded Q^N grid
//! (Q a 5-smooth size >= P + 2 * kernel reach) so circular convolution agrees
//! with zero-extension convolution on the box.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::lattice::{Field, Grid, NeumaierSum};

/// Smallest integer >= n whose prime factors are all in {2, 3, 5}.
pub fn next_smooth(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2usize, 3, 5] {
            while k % p == 0 {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

type PlanMap = Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>;

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<PlanMap> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = plans.lock().unwrap();
    map.entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

/// In-place unnormalized FFT along every axis of a row-major array with the
/// given dims (last axis fastest). The inverse is unnormalized as well;
/// callers divide by the total length.
pub fn fft_nd(data: &mut [Complex64], dims: &[usize], inverse: bool) {
    assert_eq!(data.len(), dims.iter().product::<usize>());
    let nd = dims.len();
    // Last axis: contiguous lines.
    {
        let fft = plan(dims[nd - 1], inverse);
        let scratch_len = fft.get_inplace_scratch_len();
        data.par_chunks_mut(dims[nd - 1]).for_each_init(
            || vec![Complex64::default(); scratch_len],
            |scratch, line| fft.process_with_scratch(line, scratch),
        );
    }
    // Remaining axes: gather strided lines into a scratch buffer.
    for axis in (0..nd - 1).rev() {
        let len = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let block = len * stride;
        let fft = plan(len, inverse);
        let scratch_len = fft.get_inplace_scratch_len();
        data.par_chunks_mut(block).take(outer).for_each_init(
            || {
                (
                    vec![Complex64::default(); len],
                    vec![Complex64::default(); scratch_len],
                )
            },
            |(line, scratch), chunk| {
                for s in 0..stride {
                    for (i, v) in line.iter_mut().enumerate() {
                        *v = chunk[i * stride + s];
                    }
                    fft.process_with_scratch(line, scratch);
                    for (i, v) in line.iter().enumerate() {
                        chunk[i * stride + s] = *v;
                    }
                }
            },
        );
    }
}

/// Padded dims for a grid and a kernel reach (in nodes). Unused axes get 1.
pub fn padded_dims(grid: &Grid, reach: usize) -> [usize; 3] {
    let q = next_smooth(grid.points_per_axis() + 2 * reach);
    let mut dims = [1usize; 3];
    for d in &mut dims[..grid.dim()] {
        *d = q;
    }
    dims
}

/// Padded index of box axis-index `i`: the box is embedded centered, so the
/// physical origin (box center node) sits at padded index 0 and negative
/// displacements wrap to the top. This keeps spectral objects (built around
/// frequency-space origin) aligned with the physical grid.
#[inline]
fn wrap(i: usize, center: usize, q: usize) -> usize {
    (i + q - (center % q)) % q
}

/// Embed a box field into the zero-padded complex array, centered.
pub fn embed(field: &Field, padded: &[usize; 3]) -> Vec<Complex64> {
    let grid = &field.grid;
    let p = grid.points_per_axis();
    let c = (p - 1) / 2;
    let total: usize = padded.iter().product();
    let mut out = vec![Complex64::default(); total];
    match grid.dim() {
        1 => {
            for i in 0..p {
                out[wrap(i, c, padded[0])].re = field.values[i];
            }
        }
        2 => {
            for i in 0..p {
                let pi = wrap(i, c, padded[0]) * padded[1];
                for j in 0..p {
                    out[pi + wrap(j, c, padded[1])].re = field.values[i * p + j];
                }
            }
        }
        _ => {
            for i in 0..p {
                let pi = wrap(i, c, padded[0]) * padded[1];
                for j in 0..p {
                    let pj = (pi + wrap(j, c, padded[1])) * padded[2];
                    let src = (i * p + j) * p;
                    for k in 0..p {
                        out[pj + wrap(k, c, padded[2])].re = field.values[src + k];
                    }
                }
            }
        }
    }
    out
}

/// Extract the (centered) box part of a padded complex array into a field;
/// returns the largest |imaginary part| seen inside the box.
pub fn extract(data: &[Complex64], grid: &Arc<Grid>, padded: &[usize; 3]) -> (Field, f64) {
    let p = grid.points_per_axis();
    let c = (p - 1) / 2;
    let mut f = Field::zeros(grid);
    let mut im_max = 0.0f64;
    match grid.dim() {
        1 => {
            for i in 0..p {
                let v = data[wrap(i, c, padded[0])];
                f.values[i] = v.re;
                im_max = im_max.max(v.im.abs());
            }
        }
        2 => {
            for i in 0..p {
                let pi = wrap(i, c, padded[0]) * padded[1];
                for j in 0..p {
                    let v = data[pi + wrap(j, c, padded[1])];
                    f.values[i * p + j] = v.re;
                    im_max = im_max.max(v.im.abs());
                }
            }
        }
        _ => {
            for i in 0..p {
                let pi = wrap(i, c, padded[0]) * padded[1];
                for j in 0..p {
                    let pj = (pi + wrap(j, c, padded[1])) * padded[2];
                    let dst = (i * p + j) * p;
                    for k in 0..p {
                        let v = data[pj + wrap(k, c, padded[2])];
                        f.values[dst + k] = v.re;
                        im_max = im_max.max(v.im.abs());
                    }
                }
            }
        }
    }
    (f, im_max)
}

/// Forward spectrum of a mass-weight stencil placed at wrapped offsets around
/// the padded-grid origin. The zero-frequency bin is pinned to exactly 1
/// afterwards (it equals the exact unit weight sum).
pub fn stencil_spectrum(
    offsets: &[[i32; 3]],
    weights: &[f64],
    dim: usize,
    padded: &[usize; 3],
) -> Vec<Complex64> {
    let total: usize = padded.iter().product();
    let mut data = vec![Complex64::default(); total];
    for (o, &w) in offsets.iter().zip(weights) {
        let mut flat = 0usize;
        for d in 0..dim {
            let q = padded[d] as i64;
            let wrapped = ((o[d] as i64 % q) + q) % q;
            flat = flat * padded[d] + wrapped as usize;
        }
        data[flat].re += w;
    }
    fft_nd(&mut data, &padded[..dim.max(1)], false);
    data[0] = Complex64::new(1.0, 0.0);
    data
}

/// Sum of the real parts over the whole padded array (compensated), used for
/// exact-integral diagnostics of spectral objects.
pub fn total_real(data: &[Complex64]) -> f64 {
    let mut s = NeumaierSum::new();
    for v in data {
        s.add(v.re);
    }
    s.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_sizes() {
        assert_eq!(next_smooth(135), 135);
        assert_eq!(next_smooth(129), 135);
        assert_eq!(next_smooth(7), 8);
        assert_eq!(next_smooth(1), 1);
    }

    // fft_nd against a naive DFT on a small 3-d array.
    #[test]
    fn matches_naive_dft() {
        let dims = [4usize, 3, 5];
        let n: usize = dims.iter().product();
        let mut data: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let orig = data.clone();
        fft_nd(&mut data, &dims, false);
        let tau = std::f64::consts::TAU;
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let mut acc = Complex64::default();
                    for i in 0..dims[0] {
                        for j in 0..dims[1] {
                            for k in 0..dims[2] {
                                let phase = -tau
                                    * (a as f64 * i as f64 / dims[0] as f64
                                        + b as f64 * j as f64 / dims[1] as f64
                                        + c as f64 * k as f64 / dims[2] as f64);
                                acc += orig[(i * dims[1] + j) * dims[2] + k]
                                    * Complex64::from_polar(1.0, phase);
                            }
                        }
                    }
                    let got = data[(a * dims[1] + b) * dims[2] + c];
                    assert!((acc - got).norm() < 1e-10, "mismatch at ({a},{b},{c})");
                }
            }
        }
    }

    #[test]
    fn roundtrip() {
        let dims = [8usize, 8, 8];
        let n: usize = dims.iter().product();
        let orig: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new((i as f64).sin(), 0.0))
            .collect();
        let mut data = orig.clone();
        fft_nd(&mut data, &dims, false);
        fft_nd(&mut data, &dims, true);
        for (a, b) in orig.iter().zip(&data) {
            assert!((a - b / n as f64).norm() < 1e-12);
        }
    }
}
