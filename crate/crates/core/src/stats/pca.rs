use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{Result, StatsError};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// (rows, n_components) scores of the centered data.
    pub projected: Array2<f64>,
    /// Fraction of total variance captured by each kept component.
    pub explained_variance_ratio: Vec<f64>,
    /// (cols, n_components) unit loading vectors.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
}

/// Principal components from the eigendecomposition of the sample covariance.
///
/// Components come in descending eigenvalue order; each is signed so that its
/// largest-magnitude loading is positive.
pub fn pca_project(x: ArrayView2<'_, f64>, n_components: usize) -> Result<PcaProjection> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(StatsError::TooShort { needed: 2, got: n });
    }
    if n_components == 0 || n_components > (n - 1).min(d) {
        return Err(StatsError::InvalidArgument(format!(
            "n_components {n_components} outside 1..={}",
            (n - 1).min(d)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut components = Array2::<f64>::zeros((d, n_components));
    let mut ratios = Vec::with_capacity(n_components);
    for (k, &col) in order.iter().take(n_components).enumerate() {
        let v = eig.eigenvectors.column(col);
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .expect("d >= 1");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[[i, k]] = sign * v[i];
        }
        let ev = eig.eigenvalues[col].max(0.0);
        ratios.push(if total > 0.0 { ev / total } else { 0.0 });
    }
    Ok(PcaProjection {
        projected: centered.dot(&components),
        explained_variance_ratio: ratios,
        components,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn collinear_points_have_one_component() {
        let x = arr2(&[[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        let p = pca_project(x.view(), 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_variance_ratio[1].abs() < 1e-12);
    }

    #[test]
    fn isotropic_cloud_splits_evenly() {
        // square vertices: covariance is a multiple of the identity
        let x = arr2(&[[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]);
        let p = pca_project(x.view(), 2).unwrap();
        for r in &p.explained_variance_ratio {
            assert!((r - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn three_points_match_closed_form_eigensolver() {
        let x = arr2(&[[0.0, 0.0], [2.0, 1.0], [4.0, 5.0]]);
        // covariance by hand
        let mx = 2.0;
        let my = 2.0;
        let rows = [[0.0, 0.0], [2.0, 1.0], [4.0, 5.0]];
        let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
        for r in rows {
            a += (r[0] - mx) * (r[0] - mx) / 2.0;
            b += (r[0] - mx) * (r[1] - my) / 2.0;
            c += (r[1] - my) * (r[1] - my) / 2.0;
        }
        // eigenvalues of [[a, b], [b, c]]
        let tr = a + c;
        let disc = ((a - c) * (a - c) / 4.0 + b * b).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = tr / 2.0 - disc;
        // eigenvector for l1: (b, l1 - a)
        let norm = (b * b + (l1 - a) * (l1 - a)).sqrt();
        let mut v = [b / norm, (l1 - a) / norm];
        if v[0].abs() >= v[1].abs() && v[0] < 0.0 || v[1].abs() > v[0].abs() && v[1] < 0.0 {
            v = [-v[0], -v[1]];
        }
        let p = pca_project(x.view(), 1).unwrap();
        assert!((p.explained_variance_ratio[0] - l1 / (l1 + l2)).abs() < 1e-12);
        for (i, r) in rows.iter().enumerate() {
            let expected = (r[0] - mx) * v[0] + (r[1] - my) * v[1];
            assert!((p.projected[[i, 0]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn full_rank_projection_preserves_distances() {
        let x = arr2(&[
            [0.3, 1.0, -2.0],
            [1.5, -0.4, 0.2],
            [2.2, 0.9, 1.1],
            [-1.0, 0.0, 0.5],
            [0.0, 2.0, -0.7],
        ]);
        let p = pca_project(x.view(), 3).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d0 = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
                let d1 = (&p.projected.row(i) - &p.projected.row(j))
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt();
                assert!((d0 - d1).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn out_of_range_components() {
        let x = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!(pca_project(x.view(), 2).is_err());
        assert!(pca_project(x.view(), 0).is_err());
    }
}
