use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::detector::gemm;
use crate::error::{Error, Result};

/// Principal axes of the training features. `components` holds `dims` unit
/// rows of length `mean.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub dims: usize,
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

/// Fits the top `dims` principal components of the centered data.
///
/// The eigenproblem is solved on whichever of the `N x N` Gram matrix or the
/// `D x D` covariance is smaller. If the centered data has rank below `dims`
/// the model keeps only the rank many components and logs a warning.
pub fn fit_pca(x: &Matrix, dims: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows, x.cols);
    if n < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 rows, got {n}")));
    }
    if dims == 0 || d == 0 {
        return Err(Error::Config(
            "PCA dims and feature length must be positive".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut xc = x.data.clone();
    for row in xc.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    let gram = n <= d;
    let k = if gram { n } else { d };
    let mut s = vec![0.0; k * k];
    if gram {
        gemm(n, d, n, &xc, false, &xc, true, &mut s, 0.0);
    } else {
        gemm(d, n, d, &xc, true, &xc, false, &mut s, 0.0);
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(k, k, &s));
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) || top.sqrt() <= 1e-12 * mean.iter().map(|m| m.abs()).fold(1.0, f64::max) {
        return Err(Error::Degenerate(
            "features are constant across rows".into(),
        ));
    }
    let tol = top * k as f64 * f64::EPSILON * 16.0;
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > tol)
        .count();
    let kept = dims.min(rank);
    if kept < dims {
        log::warn!("PCA reduced to rank {kept} dimensions (requested {dims})");
    }

    let mut components = vec![0.0; kept * d];
    let mut explained = Vec::with_capacity(kept);
    for (c, &i) in order.iter().take(kept).enumerate() {
        let lambda = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        let out = &mut components[c * d..(c + 1) * d];
        if gram {
            // axis = Xc^T v / sqrt(lambda)
            let scale = 1.0 / lambda.sqrt();
            for (r, row) in xc.chunks(d).enumerate() {
                let w = v[r] * scale;
                for (o, x) in out.iter_mut().zip(row) {
                    *o += w * x;
                }
            }
        } else {
            out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o = *x);
        }
        // fix the arbitrary eigenvector sign so fits are reproducible
        let pivot = out
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            out.iter_mut().for_each(|o| *o = -*o);
        }
        explained.push(lambda / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean,
        dims: kept,
        components,
        explained_variance: explained,
    })
}

impl PcaModel {
    pub fn feature_len(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.mean.len();
        &self.components[i * d..(i + 1) * d]
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "feature has {} values, PCA expects {}",
                x.len(),
                self.mean.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.dims)
            .map(|i| {
                self.component(i)
                    .iter()
                    .zip(&centered)
                    .map(|(c, v)| c * v)
                    .sum()
            })
            .collect())
    }

    pub fn transform_rows(&self, x: &Matrix) -> Result<Matrix> {
        let d = self.mean.len();
        if x.cols != d {
            return Err(Error::Shape(format!(
                "rows have {} values, PCA expects {d}",
                x.cols
            )));
        }
        let mut centered = x.data.clone();
        for row in centered.chunks_mut(d) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        let mut out = vec![0.0; x.rows * self.dims];
        gemm(
            x.rows,
            d,
            self.dims,
            &centered,
            false,
            &self.components,
            true,
            &mut out,
            0.0,
        );
        Matrix::new(x.rows, self.dims, out)
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims {
            return Err(Error::Shape(format!(
                "{} scores for {} components",
                z.len(),
                self.dims
            )));
        }
        let mut out = self.mean.clone();
        for (i, &s) in z.iter().enumerate() {
            out.iter_mut()
                .zip(self.component(i))
                .for_each(|(o, c)| *o += s * c);
        }
        Ok(out)
    }
}
