use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::detector::gemm;
use crate::error::{Error, Result};
use crate::Label;

pub const SMO_TOLERANCE: f64 = 1e-3;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    Rbf { gamma: f64 },
    Linear,
}

impl Kernel {
    pub fn kind(&self) -> KernelKind {
        match self {
            Kernel::Rbf { .. } => KernelKind::Rbf,
            Kernel::Linear => KernelKind::Linear,
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d).exp()
            }
        }
    }
}

/// `K[i][j] = k(a_i, b_j)` as an `a.rows x b.rows` row-major matrix.
pub fn kernel_matrix(kernel: &Kernel, a: &Matrix, b: &Matrix) -> Vec<f64> {
    let (n, m, d) = (a.rows, b.rows, a.cols);
    let mut k = vec![0.0; n * m];
    gemm(n, d, m, &a.data, false, &b.data, true, &mut k, 0.0);
    if let Kernel::Rbf { gamma } = *kernel {
        let norm = |x: &Matrix, i: usize| x.row(i).iter().map(|v| v * v).sum::<f64>();
        let na: Vec<f64> = (0..n).map(|i| norm(a, i)).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(b, j)).collect();
        for i in 0..n {
            for j in 0..m {
                let d2 = (na[i] + nb[j] - 2.0 * k[i * m + j]).max(0.0);
                k[i * m + j] = (-gamma * d2).exp();
            }
        }
    }
    k
}

/// Binary soft-margin SVM. `dual_coef[i]` is `alpha_i * y_i` of support
/// vector `i` with `y = +1` for fake; the decision value is
/// `sum dual_coef[i] k(sv_i, x) - rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    pub dims: usize,
    pub support_vectors: Matrix,
    pub dual_coef: Vec<f64>,
    pub rho: f64,
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dims {
            return Err(Error::Shape(format!(
                "SVM expects {} features, got {}",
                self.dims,
                x.len()
            )));
        }
        Ok((0..self.support_vectors.rows)
            .map(|i| self.dual_coef[i] * self.kernel.eval(self.support_vectors.row(i), x))
            .sum::<f64>()
            - self.rho)
    }

    pub fn decisions(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols != self.dims {
            return Err(Error::Shape(format!(
                "SVM expects {} features, got {}",
                self.dims, x.cols
            )));
        }
        if self.support_vectors.rows == 0 {
            return Ok(vec![-self.rho; x.rows]);
        }
        let k = kernel_matrix(&self.kernel, x, &self.support_vectors);
        let m = self.support_vectors.rows;
        Ok(k.chunks(m)
            .map(|row| {
                row.iter()
                    .zip(&self.dual_coef)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    - self.rho
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        Ok(Label::from_fake(self.decision(x)? > 0.0))
    }
}

/// Fits with fixed hyperparameters.
pub fn fit_svm_fixed(x: &Matrix, y: &[Label], kernel: Kernel, c: f64) -> Result<SvmModel> {
    if x.rows != y.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            x.rows,
            y.len()
        )));
    }
    let k = kernel_matrix(&kernel, x, x);
    let (alpha, rho) = solve(&k, y, c)?;
    let sv: Vec<usize> = (0..x.rows).filter(|&i| alpha[i] > 0.0).collect();
    let dual_coef = sv
        .iter()
        .map(|&i| if y[i].is_fake() { alpha[i] } else { -alpha[i] })
        .collect();
    Ok(SvmModel {
        kernel,
        c,
        dims: x.cols,
        support_vectors: x.select_rows(&sv),
        dual_coef,
        rho,
    })
}

/// SMO on a precomputed kernel matrix with second-order working set
/// selection. Returns `(alpha, rho)`.
pub(crate) fn solve(k: &[f64], labels: &[Label], c: f64) -> Result<(Vec<f64>, f64)> {
    let n = labels.len();
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("SVM C must be positive, got {c}")));
    }
    let fakes = labels.iter().filter(|l| l.is_fake()).count();
    if fakes == 0 || fakes == n {
        return Err(Error::Data("SVM training needs both classes".into()));
    }
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if l.is_fake() { 1.0 } else { -1.0 })
        .collect();
    let kd: Vec<f64> = (0..n).map(|i| k[i * n + i]).collect();
    let mut alpha = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let max_iter = (100 * n).max(10_000_000);

    let mut iter = 0;
    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            let v = -y[t] * g[t];
            let in_up = if y[t] > 0.0 {
                !upper(alpha[t])
            } else {
                !lower(alpha[t])
            };
            if in_up && v >= gmax {
                gmax = v;
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let in_low = if y[t] > 0.0 {
                !lower(alpha[t])
            } else {
                !upper(alpha[t])
            };
            if !in_low {
                continue;
            }
            let v = y[t] * g[t];
            gmax2 = gmax2.max(v);
            let b = gmax + v;
            if b > 0.0 {
                let a = kd[i] + kd[t] - 2.0 * k[i * n + t];
                let obj = -b * b / if a > 0.0 { a } else { TAU };
                if obj <= obj_min {
                    obj_min = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < SMO_TOLERANCE || j == usize::MAX {
            break;
        }
        iter += 1;
        if iter > max_iter {
            log::warn!("SMO stopped after {max_iter} iterations without converging");
            break;
        }

        let qij = y[i] * y[j] * k[i * n + j];
        let (ai, aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (kd[i] + kd[j] + 2.0 * qij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (kd[i] + kd[j] - 2.0 * qij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            g[t] += y[t] * (y[i] * k[i * n + t] * di + y[j] * k[j * n + t] * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * g[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 {
        sum_free / free as f64
    } else {
        (ub + lb) / 2.0
    };
    Ok((alpha, rho))
}
