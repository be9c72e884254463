use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctforensics::classifier::{fit_pca, fit_svm, fit_svm_fixed, GridSearchSpec, Kernel, Matrix};
use ctforensics::Label;

fn xor(n: usize, seed: u64) -> (Matrix, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let (sx, sy) = ([-1.0, 1.0][i % 2], [-1.0, 1.0][(i / 2) % 2]);
        rows.push(vec![
            sx + rng.random_range(-0.3..0.3),
            sy + rng.random_range(-0.3..0.3),
        ]);
        labels.push(Label::from_fake(sx * sy > 0.0));
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

#[test]
fn rbf_search_solves_xor() {
    let (x, y) = xor(80, 1);
    let (model, report) = fit_svm(&x, &y, &GridSearchSpec::default(), 5).unwrap();
    assert!(
        matches!(model.kernel, Kernel::Rbf { .. }),
        "{:?}",
        report.best_row()
    );
    let (tx, ty) = xor(200, 2);
    let hits = (0..tx.rows)
        .filter(|&i| model.predict(tx.row(i)).unwrap() == ty[i])
        .count();
    assert!(hits as f64 / 200.0 >= 0.95, "{hits} of 200");
}

#[test]
fn conflicting_duplicates_still_fit() {
    let mut rows = vec![vec![0.0, 0.0]; 10];
    let mut labels: Vec<Label> = (0..10).map(|i| Label::from_fake(i % 2 == 0)).collect();
    for i in 0..10 {
        rows.push(vec![3.0 + i as f64 * 0.1, 3.0]);
        labels.push(Label::Fake);
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let model = fit_svm_fixed(&x, &labels, Kernel::Linear, 1.0).unwrap();
    let alpha_max = model.dual_coef.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    assert!(alpha_max <= 1.0 + 1e-9);
    assert_eq!(model.predict(&[3.5, 3.0]).unwrap(), Label::Fake);
}

#[test]
fn row_order_does_not_change_the_fit() {
    let (x, y) = xor(40, 3);
    let a = fit_svm_fixed(&x, &y, Kernel::Rbf { gamma: 0.5 }, 10.0).unwrap();
    let order: Vec<usize> = (0..x.rows).rev().collect();
    let xr = x.select_rows(&order);
    let yr: Vec<Label> = order.iter().map(|&i| y[i]).collect();
    let b = fit_svm_fixed(&xr, &yr, Kernel::Rbf { gamma: 0.5 }, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let (da, db) = (a.decision(&p).unwrap(), b.decision(&p).unwrap());
        // both stop within the 1e-3 KKT tolerance, not at the exact optimum
        assert!((da - db).abs() < 1e-2, "{da} vs {db}");
        assert!(da.abs() < 1e-2 || da.signum() == db.signum());
    }
}

#[test]
fn reconstruction_error_falls_with_more_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            (0..12)
                .map(|j| rng.random_range(-1.0..1.0) * (12 - j) as f64)
                .collect()
        })
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let mut last = f64::INFINITY;
    for dims in 1..=12 {
        let pca = fit_pca(&x, dims).unwrap();
        let err: f64 = rows
            .iter()
            .map(|r| {
                let back = pca.reconstruct(&pca.transform(r).unwrap()).unwrap();
                r.iter()
                    .zip(&back)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum();
        assert!(err <= last + 1e-9, "dims {dims}: {err} > {last}");
        last = err;
    }
    assert!(last < 1e-12);
}

#[test]
fn explained_variance_is_sorted_and_components_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // wide data takes the Gram path
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..40).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let pca = fit_pca(&Matrix::from_rows(&rows).unwrap(), 5).unwrap();
    assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    for i in 0..pca.dims {
        for j in 0..pca.dims {
            let dot: f64 = pca
                .component(i)
                .iter()
                .zip(pca.component(j))
                .map(|(a, b)| a * b)
                .sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-9);
        }
    }
}
