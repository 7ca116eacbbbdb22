//! Concept extraction from predicted activities by nonnegative matrix
//! factorization.
//!
//! `A (patches x neurons) ~ W (patches x k) H (k x neurons)`. Columns of `W`
//! say how strongly each patch expresses a concept; rows of `H` give the
//! concept's neural signature.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder_fit::PatchIndex;

#[derive(Debug, thiserror::Error)]
pub enum ConceptError {
    #[error("negative entry {value} at ({row}, {col})")]
    Negative { row: usize, col: usize, value: f64 },
    #[error("non-finite input")]
    NonFinite,
    #[error("k = {k} outside 1..={max}")]
    BadRank { k: usize, max: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConceptError>;

pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBasis {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    pub k: usize,
    /// Squared Frobenius reconstruction error, starting with the initial factors.
    pub objective_history: Vec<f64>,
}

impl ConceptBasis {
    pub fn objective(&self) -> f64 {
        *self
            .objective_history
            .last()
            .expect("history starts with the initial objective")
    }
}

fn objective(a: ArrayView2<'_, f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let mut r = w.dot(h);
    r -= &a;
    r.iter().map(|v| v * v).sum()
}

fn floor_div(num: &mut Array2<f64>, den: &Array2<f64>) {
    num.zip_mut_with(den, |n, &d| *n /= d.max(f64::MIN_POSITIVE));
}

/// Lee-Seung multiplicative updates on `||A - WH||_F^2`.
///
/// Stops when the relative improvement drops below `tol` or after
/// `max_iter` sweeps. A sweep that would raise the objective (roundoff near
/// convergence) is discarded and ends the run.
pub fn nmf_factorize(
    a: ArrayView2<'_, f64>,
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<ConceptBasis> {
    let (n, m) = a.dim();
    let max = n.min(m);
    if k == 0 || k > max {
        return Err(ConceptError::BadRank { k, max });
    }
    if !(tol >= 0.0) {
        return Err(ConceptError::Invalid("tol must be >= 0".into()));
    }
    for ((row, col), &value) in a.indexed_iter() {
        if !value.is_finite() {
            return Err(ConceptError::NonFinite);
        }
        if value < 0.0 {
            return Err(ConceptError::Negative { row, col, value });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (a.mean().unwrap_or(0.0) / k as f64).sqrt();
    let mut w = Array2::from_shape_fn((n, k), |_| rng.random::<f64>() * scale);
    let mut h = Array2::from_shape_fn((k, m), |_| rng.random::<f64>() * scale);
    let mut history = vec![objective(a, &w, &h)];

    for _ in 0..max_iter {
        let prev = *history.last().expect("non-empty");
        if prev == 0.0 {
            break;
        }
        let mut h_new = &h * &w.t().dot(&a);
        floor_div(&mut h_new, &w.t().dot(&w).dot(&h));
        let mut w_new = &w * &a.dot(&h_new.t());
        floor_div(&mut w_new, &w.dot(&h_new.dot(&h_new.t())));
        let cur = objective(a, &w_new, &h_new);
        if cur > prev {
            break;
        }
        w = w_new;
        h = h_new;
        history.push(cur);
        if (prev - cur) <= tol * prev {
            break;
        }
    }
    Ok(ConceptBasis {
        w,
        h,
        k,
        objective_history: history,
    })
}

/// Shift a matrix by its minimum when any entry is negative. Returns the
/// shifted matrix and the amount added.
pub fn shift_nonnegative(a: ArrayView2<'_, f64>) -> (Array2<f64>, f64) {
    let min = a.iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        (a.mapv(|v| v - min), -min)
    } else {
        (a.to_owned(), 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptImportance {
    /// Share of reconstruction energy, `||W_j|| ||H_j|| / sum_l ||W_l|| ||H_l||`.
    pub shares: Vec<f64>,
    /// Set when every concept has zero energy; shares are then uniform.
    pub degenerate: bool,
}

pub fn concept_importance(basis: &ConceptBasis) -> ConceptImportance {
    // ||w h^T||_F = ||w|| ||h|| for a rank-one term
    let energy: Vec<f64> = (0..basis.k)
        .map(|j| {
            let wn = basis.w.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            let hn = basis.h.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            wn * hn
        })
        .collect();
    let total: f64 = energy.iter().sum();
    if total > 0.0 {
        ConceptImportance {
            shares: energy.iter().map(|e| e / total).collect(),
            degenerate: false,
        }
    } else {
        ConceptImportance {
            shares: vec![1.0 / basis.k as f64; basis.k],
            degenerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPatch {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPatchIndex {
    /// One list per concept, strongest first.
    pub concepts: Vec<Vec<TopPatch>>,
}

/// The `per_concept` patches with the largest weight on each concept; ties
/// go to the lower patch index.
pub fn top_patches(
    basis: &ConceptBasis,
    patch_index: &[PatchIndex],
    per_concept: usize,
) -> Result<TopPatchIndex> {
    if basis.w.nrows() != patch_index.len() {
        return Err(ConceptError::Invalid(format!(
            "W has {} rows but {} patches were given",
            basis.w.nrows(),
            patch_index.len()
        )));
    }
    let take = per_concept.min(patch_index.len());
    let concepts = basis
        .w
        .axis_iter(Axis(1))
        .map(|col| {
            let mut order: Vec<usize> = (0..col.len()).collect();
            order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
            order[..take]
                .iter()
                .map(|&i| TopPatch {
                    image_id: patch_index[i].image_id.clone(),
                    row: patch_index[i].row,
                    col: patch_index[i].col,
                    activation: col[i],
                })
                .collect()
        })
        .collect();
    Ok(TopPatchIndex { concepts })
}
