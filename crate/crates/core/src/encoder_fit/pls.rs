use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{FitError, Result};

pub const DEFAULT_COMPONENTS: usize = 25;
const TOLERANCE: f64 = 1e-9;
const MAX_ITER: usize = 500;

/// Linear map from patch features to neuron responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsEncoder {
    pub n_components: usize,
    pub x_mean: Array1<f64>,
    pub y_mean: Array1<f64>,
    /// (n_features, k)
    pub weights: Array2<f64>,
    /// (n_features, k)
    pub loadings: Array2<f64>,
    /// (n_targets, k)
    pub y_loadings: Array2<f64>,
    /// (n_features, k)
    pub rotations: Array2<f64>,
    /// (n_features, n_targets)
    pub coef: Array2<f64>,
}

impl PlsEncoder {
    pub fn n_features(&self) -> usize {
        self.x_mean.len()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        pls_predict(self, x)
    }
}

fn centered(a: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let mean = a
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(a.ncols()));
    (&a - &mean, mean)
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Fit a PLS2 regression with NIPALS on mean-centered, unscaled data.
///
/// Component extraction stops early once the Y residual or the X scores
/// vanish; the returned encoder records how many components were kept.
pub fn pls_fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    n_components: usize,
) -> Result<PlsEncoder> {
    let (n, p) = x.dim();
    let q = y.ncols();
    if y.nrows() != n {
        return Err(FitError::Invalid(format!(
            "X has {n} rows, Y has {}",
            y.nrows()
        )));
    }
    if n < 2 {
        return Err(FitError::Invalid(format!(
            "need at least 2 training rows, got {n}"
        )));
    }
    if n_components == 0 {
        return Err(FitError::Invalid("n_components must be >= 1".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(FitError::Invalid("non-finite training data".into()));
    }
    let limit = p.min(n - 1);
    let requested = n_components;
    let n_components = requested.min(limit);
    if n_components < requested {
        log::debug!("n_components {requested} clipped to {n_components} (features {p}, rows {n})");
    }

    let (mut xk, x_mean) = centered(x);
    let (mut yk, y_mean) = centered(y);
    let x_scale = frobenius(&xk);
    let y_scale = frobenius(&yk);

    let mut ws: Vec<Array1<f64>> = Vec::new();
    let mut ps: Vec<Array1<f64>> = Vec::new();
    let mut qs: Vec<Array1<f64>> = Vec::new();

    for _ in 0..n_components {
        if frobenius(&yk) <= 1e-12 * y_scale || y_scale == 0.0 {
            break;
        }
        // The NIPALS inner loop (w ∝ Xᵀu, t = Xw, c ∝ Yᵀt, u ∝ Yc) only
        // rescales w ← C Cᵀ w with C = XᵀY, so it runs on the p×q matrix C.
        // It starts from the first Y column that still covaries with X.
        let cross = xk.t().dot(&yk);
        let Some(start) = (0..q).find(|&j| cross.column(j).iter().any(|v| *v != 0.0)) else {
            break;
        };
        let mut w = cross.column(start).to_owned();
        w /= norm(&w);
        if q > 1 {
            for _ in 1..MAX_ITER {
                let next = cross.dot(&cross.t().dot(&w));
                let nn = norm(&next);
                if nn <= f64::MIN_POSITIVE {
                    break;
                }
                let next = next / nn;
                let delta = norm(&(&next - &w));
                w = next;
                if delta < TOLERANCE {
                    break;
                }
            }
        }
        let t = xk.dot(&w);
        let tt = t.dot(&t);
        if tt <= (1e-12 * x_scale).powi(2) {
            break;
        }
        let pk = xk.t().dot(&t) / tt;
        let qk = yk.t().dot(&t) / tt;
        let t_col = t.view().insert_axis(Axis(1));
        xk -= &t_col.dot(&pk.view().insert_axis(Axis(0)));
        yk -= &t_col.dot(&qk.view().insert_axis(Axis(0)));
        ws.push(w);
        ps.push(pk);
        qs.push(qk);
    }

    let k = ws.len();
    let stack = |cols: &[Array1<f64>], rows: usize| {
        let mut m = Array2::<f64>::zeros((rows, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            m.column_mut(j).assign(c);
        }
        m
    };
    let weights = stack(&ws, p);
    let loadings = stack(&ps, p);
    let y_loadings = stack(&qs, q);

    // rotations R = W (P^T W)^-1
    let rotations = if k == 0 {
        Array2::zeros((p, 0))
    } else {
        let ptw = loadings.t().dot(&weights);
        let m = DMatrix::from_fn(k, k, |i, j| ptw[[i, j]]);
        let inv = m
            .try_inverse()
            .ok_or_else(|| FitError::Numerical("singular P^T W in PLS rotations".into()))?;
        let inv = Array2::from_shape_fn((k, k), |(i, j)| inv[(i, j)]);
        weights.dot(&inv)
    };
    let coef = rotations.dot(&y_loadings.t());

    Ok(PlsEncoder {
        n_components: k,
        x_mean,
        y_mean,
        weights,
        loadings,
        y_loadings,
        rotations,
        coef,
    })
}

/// `(x - x_mean) · coef + y_mean`, row by row.
pub fn pls_predict(encoder: &PlsEncoder, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != encoder.n_features() {
        return Err(FitError::FeatureMismatch {
            expected: encoder.n_features(),
            got: x.ncols(),
        });
    }
    Ok((&x - &encoder.x_mean).dot(&encoder.coef) + &encoder.y_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    /// Ordinary least squares with intercept, solved through nalgebra's SVD.
    fn ols_fit_predict(x: &Array2<f64>, y: &Array2<f64>, x_new: &Array2<f64>) -> Array2<f64> {
        let (n, p) = x.dim();
        let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
        let target = DMatrix::from_fn(n, y.ncols(), |i, j| y[[i, j]]);
        let beta = design.svd(true, true).solve(&target, 1e-14).unwrap();
        let m = x_new.nrows();
        let new = DMatrix::from_fn(
            m,
            p + 1,
            |i, j| if j == 0 { 1.0 } else { x_new[[i, j - 1]] },
        );
        let out = new * beta;
        Array2::from_shape_fn((m, y.ncols()), |(i, j)| out[(i, j)])
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            / scale
    }

    #[test]
    fn exact_linear_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 40, 5);
        let w = randn(&mut rng, 5, 3);
        let y = x.dot(&w);
        let enc = pls_fit(x.view(), y.view(), 5).unwrap();
        let pred = enc.predict(x.view()).unwrap();
        let ols = ols_fit_predict(&x, &y, &x);
        assert!(max_rel_err(&pred, &ols) < 1e-6);
        assert!(max_rel_err(&pred, &y) < 1e-6);
        let x_new = randn(&mut rng, 7, 5);
        let pred_new = enc.predict(x_new.view()).unwrap();
        assert!(max_rel_err(&pred_new, &x_new.dot(&w)) < 1e-6);
    }

    #[test]
    fn constant_y() {
        let x = arr2(&[[1.0, 2.0], [3.0, 1.0], [0.5, 0.1], [2.0, 2.0]]);
        let y = Array2::from_elem((4, 2), 3.5);
        let enc = pls_fit(x.view(), y.view(), 2).unwrap();
        assert!(enc.coef.iter().all(|v| v.abs() < 1e-12));
        let pred = enc.predict(x.view()).unwrap();
        assert!(pred.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn zero_variance_column_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, 20, 3);
        let mut y = randn(&mut rng, 20, 2);
        y.column_mut(0).fill(-1.25);
        let enc = pls_fit(x.view(), y.view(), 3).unwrap();
        let pred = enc.predict(randn(&mut rng, 5, 3).view()).unwrap();
        assert!(pred.column(0).iter().all(|&v| v == -1.25));
    }

    #[test]
    fn univariate_slope() {
        let xs = [0.3, 1.1, 2.0, 2.2, 3.9, 5.0];
        let ys = [1.0, 1.7, 2.1, 3.5, 4.0, 6.2];
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
        let var: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
        let x = Array2::from_shape_vec((6, 1), xs.to_vec()).unwrap();
        let y = Array2::from_shape_vec((6, 1), ys.to_vec()).unwrap();
        let enc = pls_fit(x.view(), y.view(), 1).unwrap();
        assert!((enc.coef[[0, 0]] - cov / var).abs() < 1e-12);
    }

    #[test]
    fn mean_row_predicts_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 15, 6);
        let y = randn(&mut rng, 15, 4);
        let enc = pls_fit(x.view(), y.view(), 3).unwrap();
        let row = enc.x_mean.clone().insert_axis(Axis(0));
        let pred = enc.predict(row.view()).unwrap();
        for (a, b) in pred.row(0).iter().zip(&enc.y_mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 10, 3);
        let y = randn(&mut rng, 10, 2);
        let enc = pls_fit(x.view(), y.view(), 2).unwrap();
        let out = enc.predict(Array2::<f64>::zeros((0, 3)).view()).unwrap();
        assert_eq!(out.dim(), (0, 2));
        assert!(matches!(
            enc.predict(Array2::<f64>::zeros((1, 4)).view()),
            Err(FitError::FeatureMismatch {
                expected: 3,
                got: 4
            })
        ));
    }

    #[test]
    fn components_are_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, 4, 10);
        let y = randn(&mut rng, 4, 2);
        let enc = pls_fit(x.view(), y.view(), 25).unwrap();
        assert!(enc.n_components <= 3);
        assert!(pls_fit(x.view(), y.view(), 0).is_err());
        assert!(pls_fit(
            x.slice(ndarray::s![..1, ..]),
            y.slice(ndarray::s![..1, ..]),
            1
        )
        .is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, 30, 8);
        let y = randn(&mut rng, 30, 5);
        assert_eq!(
            pls_fit(x.view(), y.view(), 4).unwrap(),
            pls_fit(x.view(), y.view(), 4).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn full_rank_reproduces_least_squares(seed in any::<u64>(), n in 8usize..30, p in 1usize..6, q in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, n, p);
            let y = randn(&mut rng, n, q);
            let enc = pls_fit(x.view(), y.view(), p).unwrap();
            let pred = enc.predict(x.view()).unwrap();
            let ols = ols_fit_predict(&x, &y, &x);
            prop_assert!(max_rel_err(&pred, &ols) < 1e-6);
        }
    }
}
