use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pls::pls_fit;
use super::{DesignMatrix, FitError, Result};
use crate::recordings::BinCeilings;
use crate::stats::{median, spearman};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    UndefinedCeiling,
    NonPositiveCeiling,
    UndefinedCorrelation,
}

/// A neuron left out of one image's median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub image_id: String,
    pub neuron: usize,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFitResult {
    pub layer_id: String,
    /// Images with at least one scorable neuron.
    pub per_image_score: BTreeMap<String, f64>,
    /// Mean of `per_image_score`; `None` when no image is scorable.
    pub score: Option<f64>,
    pub n_components: usize,
    pub n_patches: usize,
    /// Per-image scores above 1 are kept as-is and counted here.
    pub n_above_ceiling: usize,
    pub exclusions: Vec<Exclusion>,
}

/// Held-out predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPrediction {
    pub image_id: String,
    /// (n_patches_in_image, n_neurons)
    pub predicted: Array2<f64>,
    pub truth: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub result: LayerFitResult,
    pub folds: Vec<FoldPrediction>,
}

/// Median over neurons of Spearman(pred, truth) / ceiling for one image.
pub fn image_score(
    image_id: &str,
    predicted: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, f64>,
    ceilings: &[Option<f64>],
    exclusions: &mut Vec<Exclusion>,
) -> Option<f64> {
    let mut values = Vec::with_capacity(ceilings.len());
    for (neuron, ceiling) in ceilings.iter().enumerate() {
        let reason = match ceiling {
            None => Some(ExclusionReason::UndefinedCeiling),
            Some(c) if *c <= 0.0 => Some(ExclusionReason::NonPositiveCeiling),
            Some(c) => {
                let p = predicted.column(neuron).to_vec();
                let t = truth.column(neuron).to_vec();
                match spearman(&p, &t) {
                    Ok(r) => {
                        values.push(r / c);
                        None
                    }
                    Err(_) => Some(ExclusionReason::UndefinedCorrelation),
                }
            }
        };
        if let Some(reason) = reason {
            exclusions.push(Exclusion {
                image_id: image_id.to_string(),
                neuron,
                reason,
            });
        }
    }
    median(&values)
}

fn ceilings_for<'a>(
    ceilings: &'a BinCeilings,
    image_id: &str,
    n_neurons: usize,
) -> Result<&'a [Option<f64>]> {
    let c = ceilings
        .image_ceilings(image_id)
        .ok_or_else(|| FitError::MissingCeiling(image_id.to_string()))?;
    if c.len() != n_neurons {
        return Err(FitError::Invalid(format!(
            "image {image_id}: {} ceilings for {n_neurons} neurons",
            c.len()
        )));
    }
    Ok(c)
}

/// Aggregate held-out predictions into a layer result.
pub fn score_folds(
    layer_id: &str,
    folds: &[FoldPrediction],
    ceilings: &BinCeilings,
    n_components: usize,
) -> Result<LayerFitResult> {
    let mut exclusions = Vec::new();
    let mut per_image_score = BTreeMap::new();
    let mut n_patches = 0;
    for f in folds {
        n_patches += f.truth.nrows();
        let c = ceilings_for(ceilings, &f.image_id, f.truth.ncols())?;
        if let Some(s) = image_score(
            &f.image_id,
            f.predicted.view(),
            f.truth.view(),
            c,
            &mut exclusions,
        ) {
            per_image_score.insert(f.image_id.clone(), s);
        }
    }
    for e in &exclusions {
        log::info!(
            "layer {layer_id}: image {} neuron {} excluded ({:?})",
            e.image_id,
            e.neuron,
            e.reason
        );
    }
    let score = if per_image_score.is_empty() {
        log::warn!("layer {layer_id}: no image had a scorable neuron");
        None
    } else {
        Some(per_image_score.values().sum::<f64>() / per_image_score.len() as f64)
    };
    let n_above_ceiling = per_image_score.values().filter(|&&s| s > 1.0).count();
    Ok(LayerFitResult {
        layer_id: layer_id.to_string(),
        per_image_score,
        score,
        n_components,
        n_patches,
        n_above_ceiling,
        exclusions,
    })
}

/// Leave-one-image-out fits, returning the held-out predictions with the score.
pub fn cross_validate(
    dm: &DesignMatrix,
    ceilings: &BinCeilings,
    n_components: usize,
) -> Result<CrossValidation> {
    let cv = run_folds(dm, ceilings, n_components)?;
    if cv.result.n_components < n_components {
        log::warn!(
            "layer {}: n_components {n_components} clipped to {}",
            dm.layer_id,
            cv.result.n_components
        );
    }
    Ok(cv)
}

fn run_folds(
    dm: &DesignMatrix,
    ceilings: &BinCeilings,
    n_components: usize,
) -> Result<CrossValidation> {
    let groups = dm.image_groups();
    if groups.len() < 2 {
        return Err(FitError::TooFewImages(groups.len()));
    }
    let folds: Vec<(FoldPrediction, usize)> = groups
        .par_iter()
        .map(|(image_id, held)| {
            let train: Vec<usize> = groups
                .iter()
                .filter(|(id, _)| id != image_id)
                .flat_map(|(_, rows)| rows.iter().copied())
                .collect();
            let enc = pls_fit(
                dm.x.select(Axis(0), &train).view(),
                dm.y.select(Axis(0), &train).view(),
                n_components,
            )?;
            let predicted = enc.predict(dm.x.select(Axis(0), held).view())?;
            Ok((
                FoldPrediction {
                    image_id: image_id.clone(),
                    predicted,
                    truth: dm.y.select(Axis(0), held),
                },
                enc.n_components,
            ))
        })
        .collect::<Result<_>>()?;
    let used = folds.iter().map(|(_, k)| *k).max().unwrap_or(0);
    let folds: Vec<FoldPrediction> = folds.into_iter().map(|(f, _)| f).collect();
    let result = score_folds(&dm.layer_id, &folds, ceilings, used)?;
    Ok(CrossValidation { result, folds })
}

/// Ceiling-normalized predictivity of one layer under leave-one-image-out PLS.
pub fn layer_score(
    dm: &DesignMatrix,
    ceilings: &BinCeilings,
    n_components: usize,
) -> Result<LayerFitResult> {
    cross_validate(dm, ceilings, n_components).map(|cv| cv.result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreEntry {
    pub layer_id: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainScore {
    pub model_id: String,
    /// `None` only when no layer produced a score.
    pub best_layer: Option<String>,
    pub score: Option<f64>,
    /// In input order.
    pub per_layer: Vec<LayerScoreEntry>,
}

/// Best layer score; ties keep the first layer.
pub fn brain_score(model_id: &str, per_layer: &[LayerFitResult]) -> Result<BrainScore> {
    if per_layer.is_empty() {
        return Err(FitError::NoLayers);
    }
    let mut best: Option<(&str, f64)> = None;
    for l in per_layer {
        if let Some(s) = l.score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((&l.layer_id, s));
            }
        }
    }
    Ok(BrainScore {
        model_id: model_id.to_string(),
        best_layer: best.map(|(l, _)| l.to_string()),
        score: best.map(|(_, s)| s),
        per_layer: per_layer
            .iter()
            .map(|l| LayerScoreEntry {
                layer_id: l.layer_id.clone(),
                score: l.score,
            })
            .collect(),
    })
}

/// Distribution of layer scores after shuffling each image's true responses
/// across its patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullBand {
    pub scores: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl NullBand {
    pub fn contains(&self, v: f64) -> bool {
        (self.lower..=self.upper).contains(&v)
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% band of the permutation null for one layer.
///
/// Each permutation shuffles the response rows within every image, then
/// repeats the whole leave-one-image-out fit. Shuffling only the held-out
/// responses would miss the correlation between folds that share training
/// images, and the band would come out too narrow.
pub fn permutation_null(
    dm: &DesignMatrix,
    ceilings: &BinCeilings,
    n_components: usize,
    n_perm: usize,
    seed: u64,
) -> Result<NullBand> {
    if n_perm == 0 {
        return Err(FitError::Invalid("n_perm must be >= 1".into()));
    }
    let groups = dm.image_groups();
    let mut scores: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut order: Vec<usize> = (0..dm.y.nrows()).collect();
            for (_, rows) in &groups {
                let mut shuffled = rows.clone();
                shuffled.shuffle(&mut rng);
                for (&dst, &src) in rows.iter().zip(&shuffled) {
                    order[dst] = src;
                }
            }
            let permuted = DesignMatrix::new(
                dm.layer_id.clone(),
                dm.x.clone(),
                dm.y.select(Axis(0), &order),
                dm.patch_index.clone(),
            )?;
            Ok(run_folds(&permuted, ceilings, n_components)?.result.score)
        })
        .collect::<Result<Vec<Option<f64>>>>()?
        .into_iter()
        .flatten()
        .collect();
    if scores.is_empty() {
        return Err(FitError::Invalid("no permutation produced a score".into()));
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    scores.shrink_to_fit();
    Ok(NullBand {
        lower: quantile(&sorted, 0.025),
        upper: quantile(&sorted, 0.975),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_fit::PatchIndex;
    use crate::recordings::TimeBin;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn ceilings(images: &[String], n_neurons: usize, value: f64) -> BinCeilings {
        BinCeilings {
            bin: TimeBin::new(50.0, 90.0).unwrap(),
            image_ids: images.to_vec(),
            ceilings: vec![vec![Some(value); n_neurons]; images.len()],
            mean: Some(value),
        }
    }

    /// Linear readout of random features onto duplicated neuron pairs.
    fn linear_dataset(
        seed: u64,
        n_images: usize,
        patches: usize,
        noise: f64,
    ) -> (DesignMatrix, BinCeilings) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 6;
        let n_rows = n_images * patches;
        let x = Array2::from_shape_fn((n_rows, p), |_| {
            Uniform::new(0.0, 1.0).unwrap().sample(&mut rng)
        });
        let w = Array2::from_shape_fn((p, 3), |_| StandardNormal.sample(&mut rng));
        let base = x.dot(&w);
        let mut y = ndarray::concatenate(Axis(1), &[base.view(), base.view()]).unwrap();
        y.mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + noise * z
        });
        let images: Vec<String> = (0..n_images).map(|i| format!("img{i}")).collect();
        let index = (0..n_rows)
            .map(|r| PatchIndex {
                image_id: images[r / patches].clone(),
                row: (r % patches) / 4,
                col: r % 4,
            })
            .collect();
        let dm = DesignMatrix::new("layer", x, y, index).unwrap();
        (dm, ceilings(&images, 6, 1.0))
    }

    #[test]
    fn noiseless_linear_readout() {
        let (dm, c) = linear_dataset(1, 5, 16, 0.0);
        let r = layer_score(&dm, &c, 6).unwrap();
        assert!(r.score.unwrap() >= 0.99);
        assert_eq!(r.per_image_score.len(), 5);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let images: Vec<String> = vec!["a".into(), "b".into()];
        let truth = Array2::from_shape_fn((9, 2), |(i, j)| ((i * 7 + j * 3) % 9) as f64);
        let folds: Vec<FoldPrediction> = images
            .iter()
            .map(|id| FoldPrediction {
                image_id: id.clone(),
                predicted: truth.clone(),
                truth: truth.clone(),
            })
            .collect();
        let r = score_folds("l", &folds, &ceilings(&images, 2, 1.0), 1).unwrap();
        assert_eq!(r.score, Some(1.0));
    }

    #[test]
    fn single_image_is_rejected() {
        let (dm, c) = linear_dataset(2, 1, 16, 0.0);
        let err = layer_score(&dm, &c, 3).unwrap_err();
        assert_eq!(err.to_string(), "need ≥ 2 images, got 1");
    }

    #[test]
    fn constant_truth_is_excluded() {
        let images: Vec<String> = vec!["a".into()];
        let mut truth = Array2::from_shape_fn((5, 2), |(i, _)| i as f64);
        truth.column_mut(1).fill(2.0);
        let folds = vec![FoldPrediction {
            image_id: "a".into(),
            predicted: truth.clone() + 0.5,
            truth,
        }];
        let r = score_folds("l", &folds, &ceilings(&images, 2, 1.0), 1).unwrap();
        assert_eq!(r.score, Some(1.0));
        assert_eq!(r.exclusions.len(), 1);
        assert_eq!(
            r.exclusions[0].reason,
            ExclusionReason::UndefinedCorrelation
        );
    }

    #[test]
    fn unscorable_layer_has_no_score() {
        let images: Vec<String> = vec!["a".into()];
        let folds = vec![FoldPrediction {
            image_id: "a".into(),
            predicted: Array2::zeros((1, 2)),
            truth: Array2::zeros((1, 2)),
        }];
        let r = score_folds("l", &folds, &ceilings(&images, 2, 1.0), 1).unwrap();
        assert_eq!(r.score, None);
    }

    #[test]
    fn ceiling_scaling() {
        let (dm, c) = linear_dataset(3, 4, 16, 0.5);
        let cv = cross_validate(&dm, &c, 4).unwrap();
        let base = cv.result.score.unwrap();
        for k in [0.5, 2.0, 3.7] {
            let scaled = score_folds("layer", &cv.folds, &c.scaled(k), 4).unwrap();
            assert!((scaled.score.unwrap() - base / k).abs() < 1e-12 * base.abs().max(1.0));
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let (dm, c) = linear_dataset(4, 4, 16, 0.8);
        let cv = cross_validate(&dm, &c, 3).unwrap();
        let warped: Vec<FoldPrediction> = cv
            .folds
            .iter()
            .map(|f| FoldPrediction {
                predicted: f.predicted.mapv(|v| (0.7 * v).exp() + 3.0 * v),
                ..f.clone()
            })
            .collect();
        let r = score_folds("layer", &warped, &c, 3).unwrap();
        assert_eq!(r.score, cv.result.score);
    }

    fn with_random_features(dm: &DesignMatrix, seed: u64) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn(dm.x.dim(), |_| {
            Uniform::new(0.0f64, 1.0).unwrap().sample(&mut rng)
        });
        DesignMatrix::new("random", x, dm.y.clone(), dm.patch_index.clone()).unwrap()
    }

    #[test]
    fn real_layer_beats_null_band() {
        let (dm, c) = linear_dataset(5, 6, 16, 0.5);
        let cv = cross_validate(&dm, &c, 4).unwrap();
        let band = permutation_null(&dm, &c, 4, 200, 7).unwrap();
        assert_eq!(band.scores.len(), 200);
        assert!(band.scores.iter().sum::<f64>().abs() / 200.0 < 0.05);
        assert!(cv.result.score.unwrap() > band.upper);
    }

    #[test]
    fn null_band_covers_unrelated_layers() {
        // unrelated features must land inside the band about 95% of the time
        let (dm, c) = linear_dataset(8, 6, 16, 0.5);
        let inside = (0..40)
            .filter(|&s| {
                let random = with_random_features(&dm, 100 + s);
                let score = layer_score(&random, &c, 4).unwrap().score.unwrap();
                permutation_null(&random, &c, 4, 100, s)
                    .unwrap()
                    .contains(score)
            })
            .count();
        assert!(inside >= 34, "{inside}/40 inside");
    }

    #[test]
    fn null_band_is_deterministic() {
        let (dm, c) = linear_dataset(3, 4, 9, 0.5);
        let a = permutation_null(&dm, &c, 2, 20, 1).unwrap();
        assert_eq!(a, permutation_null(&dm, &c, 2, 20, 1).unwrap());
    }

    fn fit(layer: &str, score: Option<f64>) -> LayerFitResult {
        LayerFitResult {
            layer_id: layer.into(),
            per_image_score: BTreeMap::new(),
            score,
            n_components: 1,
            n_patches: 0,
            n_above_ceiling: 0,
            exclusions: vec![],
        }
    }

    #[test]
    fn brain_score_argmax() {
        let layers = [
            fit("a", Some(0.3)),
            fit("b", Some(0.5)),
            fit("c", Some(0.4)),
        ];
        let b = brain_score("m", &layers).unwrap();
        assert_eq!((b.score, b.best_layer.as_deref()), (Some(0.5), Some("b")));
        let tie = brain_score("m", &[fit("a", Some(0.5)), fit("b", Some(0.5))]).unwrap();
        assert_eq!(tie.best_layer.as_deref(), Some("a"));
        let single = brain_score("m", &[fit("x", Some(0.2))]).unwrap();
        assert_eq!(single.score, Some(0.2));
        assert_eq!(
            brain_score("m", &[]).unwrap_err().to_string(),
            "no layers scored"
        );
        let none = brain_score("m", &[fit("a", None)]).unwrap();
        assert_eq!(none.score, None);
    }

    proptest! {
        #[test]
        fn appending_never_lowers(scores in prop::collection::vec(prop::option::of(-1.0f64..1.5), 1..10), extra in prop::option::of(-1.0f64..1.5)) {
            let mut layers: Vec<LayerFitResult> = scores.iter().enumerate().map(|(i, s)| fit(&format!("l{i}"), *s)).collect();
            let before = brain_score("m", &layers).unwrap().score;
            layers.push(fit("extra", extra));
            let after = brain_score("m", &layers).unwrap().score;
            if let Some(b) = before {
                prop_assert!(after.unwrap() >= b);
            }
        }
    }
}
