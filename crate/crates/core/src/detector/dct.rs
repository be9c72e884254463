//! Orthonormal 2-D DCT-II over square patches.

use std::f64::consts::PI;

/// `n x n` orthonormal DCT-II basis, row `k` holding frequency `k`.
pub fn dct_basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            b[k * n + i] = scale * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    b
}

fn separable(x: &[f64], n: usize, basis: &[f64], inverse: bool) -> Vec<f64> {
    assert_eq!(x.len(), n * n, "patch must be {n}x{n}");
    // forward: B X B^T, inverse: B^T X B
    let mut tmp = vec![0.0; n * n];
    let mut out = vec![0.0; n * n];
    super::tensor::gemm(n, n, n, basis, inverse, x, false, &mut tmp, 0.0);
    super::tensor::gemm(n, n, n, &tmp, false, basis, !inverse, &mut out, 0.0);
    out
}

pub fn dct2d(x: &[f64], n: usize) -> Vec<f64> {
    separable(x, n, &dct_basis(n), false)
}

pub fn idct2d(x: &[f64], n: usize) -> Vec<f64> {
    separable(x, n, &dct_basis(n), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_patch_has_only_dc() {
        let c = 0.37;
        let y = dct2d(&vec![c; 1024], 32);
        assert!((y[0] - 32.0 * c).abs() < 1e-12);
        assert!(y[1..].iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn inverse_and_energy(v in proptest::collection::vec(-1.0f64..1.0, 64)) {
            let y = dct2d(&v, 8);
            let back = idct2d(&y, 8);
            for (a, b) in v.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let e1: f64 = v.iter().map(|a| a * a).sum();
            let e2: f64 = y.iter().map(|a| a * a).sum();
            prop_assert!((e1 - e2).abs() < 1e-9 * (1.0 + e1));
        }
    }
}
