use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Result, StatsError};

pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_REGULARIZATION: f64 = 1e-2;

/// A trained soft-margin linear classifier. Positive scores mean class A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub regularization: f64,
}

impl LinearSvmModel {
    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        if self.decision(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Hinge-loss + L2 solver using epoch-ordered subgradient steps of size
/// 1 / (lambda * t). The bias is carried as the weight of a constant unit
/// feature, so it is regularized together with the weights.
#[derive(Debug, Clone, Copy)]
pub struct LinearSvm {
    pub regularization: f64,
    pub epochs: usize,
}

impl Default for LinearSvm {
    fn default() -> Self {
        Self {
            regularization: DEFAULT_REGULARIZATION,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

impl LinearSvm {
    /// Train on the rows of `x` listed in `rows`, visiting them in that order each epoch.
    pub fn fit_rows(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[f64],
        rows: &[usize],
    ) -> LinearSvmModel {
        let lambda = self.regularization;
        let mut w = Array1::<f64>::zeros(x.ncols());
        let mut b = 0.0;
        let mut t = 0usize;
        for _ in 0..self.epochs {
            for &i in rows {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let xi = x.row(i);
                let y = labels[i];
                let margin = y * (w.dot(&xi) + b);
                let shrink = 1.0 - eta * lambda;
                w *= shrink;
                b *= shrink;
                if margin < 1.0 {
                    w.scaled_add(eta * y, &xi);
                    b += eta * y;
                }
            }
        }
        LinearSvmModel {
            weights: w.to_vec(),
            bias: b,
            regularization: lambda,
        }
    }

    pub fn fit(&self, x: ArrayView2<'_, f64>, labels: &[f64]) -> LinearSvmModel {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        self.fit_rows(x, labels, &rows)
    }
}

/// Leave-one-out accuracy of a linear SVM separating `a` (label +1) from `b` (label -1).
pub fn svm_loo_accuracy(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    regularization: f64,
) -> Result<f64> {
    svm_loo_accuracy_with(
        a,
        b,
        LinearSvm {
            regularization,
            ..LinearSvm::default()
        },
    )
}

pub(crate) fn svm_loo_accuracy_with(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    solver: LinearSvm,
) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(StatsError::DimMismatch(a.ncols(), b.ncols()));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(StatsError::TooShort {
            needed: 2,
            got: a.nrows().min(b.nrows()),
        });
    }
    if !(solver.regularization > 0.0) {
        return Err(StatsError::InvalidArgument(
            "regularization must be positive".into(),
        ));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let x = ndarray::concatenate(Axis(0), &[a, b]).expect("column counts checked");
    let labels: Vec<f64> = (0..x.nrows())
        .map(|i| if i < a.nrows() { 1.0 } else { -1.0 })
        .collect();
    let n = x.nrows();
    let mut correct = 0usize;
    let mut rows = Vec::with_capacity(n - 1);
    for held in 0..n {
        rows.clear();
        rows.extend((0..n).filter(|&i| i != held));
        let model = solver.fit_rows(x.view(), &labels, &rows);
        if model.predict(x.row(held)) == labels[held] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}
