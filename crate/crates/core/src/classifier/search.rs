use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svm::{fit_svm_fixed, kernel_matrix, solve, Kernel, KernelKind, SvmModel};
use super::Matrix;
use crate::error::{Error, Result};
use crate::Label;

/// An RBF width, either fixed or `1 / feature_count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Value(f64),
    InverseDims,
}

impl Gamma {
    pub fn resolve(self, dims: usize) -> f64 {
        match self {
            Gamma::Value(g) => g,
            Gamma::InverseDims => 1.0 / dims.max(1) as f64,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Value(f64),
    Named(String),
}

impl Serialize for Gamma {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Gamma::Value(g) => GammaRepr::Value(g),
            Gamma::InverseDims => GammaRepr::Named("1/dims".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match GammaRepr::deserialize(d)? {
            GammaRepr::Value(g) => Ok(Gamma::Value(g)),
            GammaRepr::Named(s) if s == "1/dims" => Ok(Gamma::InverseDims),
            GammaRepr::Named(s) => Err(serde::de::Error::custom(format!(
                "gamma must be a number or \"1/dims\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSearchSpec {
    pub kernels: Vec<KernelKind>,
    pub c_grid: Vec<f64>,
    pub gamma_grid: Vec<Gamma>,
    pub folds: usize,
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        Self {
            kernels: vec![KernelKind::Rbf, KernelKind::Linear],
            c_grid: vec![0.1, 1.0, 10.0, 100.0],
            gamma_grid: vec![
                Gamma::Value(1e-4),
                Gamma::Value(1e-3),
                Gamma::Value(1e-2),
                Gamma::Value(1e-1),
                Gamma::InverseDims,
            ],
            folds: 5,
        }
    }
}

/// One hyperparameter combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub kernel: Kernel,
    pub c: f64,
}

impl GridSearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.c_grid.is_empty() {
            return Err(Error::Config(
                "grid search needs at least one kernel and one C".into(),
            ));
        }
        if self.kernels.contains(&KernelKind::Rbf) && self.gamma_grid.is_empty() {
            return Err(Error::Config(
                "rbf kernel needs a non-empty gamma grid".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs k >= 2, got {}",
                self.folds
            )));
        }
        if self.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Config("C values must be positive".into()));
        }
        if self
            .gamma_grid
            .iter()
            .any(|g| matches!(g, Gamma::Value(v) if !(*v > 0.0 && v.is_finite())))
        {
            return Err(Error::Config("gamma values must be positive".into()));
        }
        Ok(())
    }

    /// Grid points in report order; the linear kernel ignores gamma and
    /// appears once per C.
    pub fn points(&self, dims: usize) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for kind in &self.kernels {
            for &c in &self.c_grid {
                match kind {
                    KernelKind::Linear => out.push(GridPoint {
                        kernel: Kernel::Linear,
                        c,
                    }),
                    KernelKind::Rbf => out.extend(self.gamma_grid.iter().map(|g| GridPoint {
                        kernel: Kernel::Rbf {
                            gamma: g.resolve(dims),
                        },
                        c,
                    })),
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kernel: KernelKind,
    pub c: f64,
    pub gamma: Option<f64>,
    pub cv_accuracy: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub rows: Vec<ReportRow>,
    pub best: usize,
}

impl SearchReport {
    pub fn best_row(&self) -> &ReportRow {
        &self.rows[self.best]
    }
}

pub fn write_search_report<W: Write>(out: W, report: &SearchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing search report: {e}")))?;
    Ok(())
}

/// Fold id per row. Each class is shuffled with the seed and dealt round
/// robin, so every fold gets a near-equal share of both classes.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for class in [Label::Real, Label::Fake] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

fn sub_kernel(k: &[f64], n: usize, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &i in rows {
        out.extend(cols.iter().map(|&j| k[i * n + j]));
    }
    out
}

fn cv_accuracy(k: &[f64], labels: &[Label], folds: &[usize], nfolds: usize, c: f64) -> Result<f64> {
    let n = labels.len();
    let mut hits = 0;
    for f in 0..nfolds {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        let y: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
        let (alpha, rho) = solve(&sub_kernel(k, n, &train, &train), &y, c)?;
        let kt = sub_kernel(k, n, &test, &train);
        for (r, &t) in test.iter().enumerate() {
            let dec: f64 = (0..train.len())
                .filter(|&s| alpha[s] > 0.0)
                .map(|s| {
                    let sign = if y[s].is_fake() { 1.0 } else { -1.0 };
                    sign * alpha[s] * kt[r * train.len() + s]
                })
                .sum::<f64>()
                - rho;
            if (dec > 0.0) == labels[t].is_fake() {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Grid search by stratified k-fold accuracy, then a refit of the winner on
/// all rows. Ties go to the earliest grid point.
pub fn fit_svm(
    x: &Matrix,
    labels: &[Label],
    grid: &GridSearchSpec,
    seed: u64,
) -> Result<(SvmModel, SearchReport)> {
    grid.validate()?;
    if x.rows != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            x.rows,
            labels.len()
        )));
    }
    let fakes = labels.iter().filter(|l| l.is_fake()).count();
    if fakes == 0 || fakes == labels.len() {
        return Err(Error::Data("grid search needs both classes".into()));
    }
    if x.rows < 2 * grid.folds {
        return Err(Error::Data(format!(
            "{} rows is too few for {}-fold cross-validation",
            x.rows, grid.folds
        )));
    }
    let folds = stratified_folds(labels, grid.folds, seed);
    let points = grid.points(x.cols);
    let scores: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let k = kernel_matrix(&p.kernel, x, x);
            cv_accuracy(&k, labels, &folds, grid.folds, p.c)
        })
        .collect::<Result<_>>()?;
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, &s)| if s > scores[b] { i } else { b });
    let rows = points
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, (p, &s))| ReportRow {
            kernel: p.kernel.kind(),
            c: p.c,
            gamma: match p.kernel {
                Kernel::Rbf { gamma } => Some(gamma),
                Kernel::Linear => None,
            },
            cv_accuracy: s,
            selected: i == best,
        })
        .collect();
    let model = fit_svm_fixed(x, labels, points[best].kernel, points[best].c)?;
    Ok((model, SearchReport { rows, best }))
}
