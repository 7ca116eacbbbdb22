use ndarray::{ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svm::{svm_loo_accuracy_with, LinearSvm};
use super::{t_test_one_sample, Result, StatsError, TTestResult};

pub const DEFAULT_REPEATS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistShiftResult {
    pub mean_accuracy: f64,
    pub accuracies: Vec<f64>,
    /// One-sample test of the accuracies against chance (0.5); absent for a single repeat.
    pub t_test: Option<TTestResult>,
}

/// Repeated leave-one-out linear discrimination between fresh equal-sized
/// subsamples of a reference set and a probe set.
///
/// Repeat `r` draws from a ChaCha8 stream `r` keyed by `seed`, so results do
/// not depend on how repeats are scheduled across threads.
pub fn dist_shift_test(
    reference: ArrayView2<'_, f64>,
    probe: ArrayView2<'_, f64>,
    sample_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<DistShiftResult> {
    if reference.ncols() != probe.ncols() {
        return Err(StatsError::DimMismatch(reference.ncols(), probe.ncols()));
    }
    if sample_size < 2 || reference.nrows() < sample_size || probe.nrows() < sample_size {
        return Err(StatsError::InvalidArgument(format!(
            "sample_size {sample_size} must be >= 2 and <= both set sizes ({}, {})",
            reference.nrows(),
            probe.nrows()
        )));
    }
    if repeats == 0 {
        return Err(StatsError::InvalidArgument("repeats must be >= 1".into()));
    }
    let solver = LinearSvm::default();
    let accuracies: Vec<f64> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut ref_idx = sample(&mut rng, reference.nrows(), sample_size).into_vec();
            let mut probe_idx = sample(&mut rng, probe.nrows(), sample_size).into_vec();
            ref_idx.sort_unstable();
            probe_idx.sort_unstable();
            let a = reference.select(Axis(0), &ref_idx);
            let b = probe.select(Axis(0), &probe_idx);
            svm_loo_accuracy_with(a.view(), b.view(), solver)
        })
        .collect::<Result<_>>()?;
    let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let t_test = if accuracies.len() >= 2 {
        Some(t_test_one_sample(&accuracies, 0.5)?)
    } else {
        log::warn!("a single repeat gives no t-test; reporting the mean only");
        None
    };
    Ok(DistShiftResult {
        mean_accuracy,
        accuracies,
        t_test,
    })
}
