use crate::error::{Error, Result};

/// Dense NCHW tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "{} values for tensor {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    /// Values of one sample, `c * h * w` long.
    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.c * self.h * self.w;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.c * self.h * self.w;
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn expect_channels(&self, c: usize, what: &str) -> Result<()> {
        if self.c != c {
            return Err(Error::Shape(format!(
                "{what} expects {c} channels, got {}x{}x{}x{}",
                self.n, self.c, self.h, self.w
            )));
        }
        Ok(())
    }
}

/// A named weight or buffer together with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Updated by the optimizer. Running statistics are not.
    pub trainable: bool,
    /// Subject to L2 weight decay.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>, decay: bool) -> Self {
        let len = value.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; len],
            trainable: true,
            decay,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, shape, value, false)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Row-major matrix product `C = alpha * op(A) * op(B) + beta * C` where
/// `op(A)` is `m x k`, `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, 0.0);
                let r = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&r) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
