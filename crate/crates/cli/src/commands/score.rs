//! `ceiling`, `fit` and `score`: bin, ceiling, best bin, patchify, fit.

use anyhow::{Context, Result};
use clap::Args;
use itfit::encoder_fit::{
    brain_score, build_design_matrix, cross_validate, permutation_null, CrossValidation,
    DesignMatrix, NullBand, PatchGrid,
};
use itfit::recordings::{
    build_spatial_maps, ceilings_over_bins, load_recording, make_bins, median_ceiling,
    select_best_bin, BinCeilings, NoiseCeilingTable, RecordingSet, SpatialActivityMap, TimeBin,
};
use itfit::tensorio::{load_activations, ActivationTensor, DatasetManifest, EntryKind};
use serde::Serialize;
use serde_json::{json, Value};

use super::{csv_writer, load_manifest, write_json};
use crate::{InputError, RunConfig};

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    /// Only fit this model
    #[arg(long)]
    pub model: Option<String>,
}

/// Pick the recording named by `--subject`, or the only one present.
pub fn select_recording(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<RecordingSet> {
    let entries: Vec<_> = manifest.entries_of(EntryKind::Recording).collect();
    if entries.is_empty() {
        return Err(InputError(format!(
            "no recording entries in {}",
            cfg.manifest()?.display()
        ))
        .into());
    }
    let chosen = match &cfg.subject {
        Some(s) => entries
            .iter()
            .find(|e| e.metadata.get("subject_id") == Some(s))
            .ok_or_else(|| InputError(format!("no recording for subject {s:?}")))?,
        None if entries.len() == 1 => &entries[0],
        None => {
            let subjects: Vec<_> = entries
                .iter()
                .filter_map(|e| e.metadata.get("subject_id"))
                .collect();
            return Err(InputError(format!(
                "{} recordings present ({subjects:?}); pick one with --subject",
                entries.len()
            ))
            .into());
        }
    };
    Ok(load_recording(manifest, chosen)?)
}

/// Activation layers grouped by model then layer, in manifest order.
pub type ModelLayers = Vec<(String, Vec<(String, Vec<ActivationTensor>)>)>;

pub fn group_layers(acts: Vec<ActivationTensor>) -> ModelLayers {
    let mut out: ModelLayers = Vec::new();
    for a in acts {
        let mi = match out.iter().position(|(m, _)| *m == a.model_id) {
            Some(i) => i,
            None => {
                out.push((a.model_id.clone(), Vec::new()));
                out.len() - 1
            }
        };
        let layers = &mut out[mi].1;
        match layers.iter_mut().find(|(l, _)| *l == a.layer_id) {
            Some((_, v)) => v.push(a),
            None => layers.push((a.layer_id.clone(), vec![a])),
        }
    }
    out
}

pub struct Prepared {
    pub recording: RecordingSet,
    pub table: NoiseCeilingTable,
    pub best_bin: TimeBin,
    pub maps: Vec<SpatialActivityMap>,
    pub grid: PatchGrid,
}

impl Prepared {
    pub fn ceilings(&self) -> &BinCeilings {
        self.table
            .for_bin(&self.best_bin)
            .expect("best bin comes from the table")
    }
}

pub fn prepare(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Prepared> {
    let recording = select_recording(manifest, cfg)?;
    let bins = make_bins(cfg.bin_start, cfg.bin_end, cfg.bin_width)?;
    let table = ceilings_over_bins(&recording, &bins)?;
    let best_bin = select_best_bin(&table)?;
    let maps = build_spatial_maps(&recording, best_bin)?;
    let grid = cfg.grid.unwrap_or_else(|| {
        PatchGrid::default_for_fixation(recording.grid_rows, recording.grid_cols)
    });
    Ok(Prepared {
        recording,
        table,
        best_bin,
        maps,
        grid,
    })
}

pub fn load_models(manifest: &DatasetManifest, only: Option<&str>) -> Result<ModelLayers> {
    let mut models = group_layers(load_activations(manifest)?);
    if let Some(m) = only {
        models.retain(|(id, _)| id == m);
        if models.is_empty() {
            return Err(InputError(format!("no activations for model {m:?}")).into());
        }
    }
    if models.is_empty() {
        return Err(InputError("no activation entries".into()).into());
    }
    Ok(models)
}

pub fn design_matrix(
    prep: &Prepared,
    layer: &[ActivationTensor],
    cfg: &RunConfig,
) -> Result<DesignMatrix> {
    build_design_matrix(layer, &prep.maps, prep.grid, cfg.pooling)
        .with_context(|| format!("building design matrix for layer {}", layer[0].layer_id))
}

pub fn run_ceiling(cfg: &RunConfig) -> Result<Value> {
    let manifest = load_manifest(cfg)?;
    let recording = select_recording(&manifest, cfg)?;
    let bins = make_bins(cfg.bin_start, cfg.bin_end, cfg.bin_width)?;
    let table = ceilings_over_bins(&recording, &bins)?;
    let best = select_best_bin(&table)?;

    let mut w = csv_writer(&cfg.out.join("ceilings.csv"))?;
    w.write_record([
        "bin_start_ms",
        "bin_end_ms",
        "image_id",
        "neuron",
        "ceiling",
    ])?;
    for b in &table.bins {
        for (img, row) in b.image_ids.iter().zip(&b.ceilings) {
            for (n, c) in row.iter().enumerate() {
                let c = c.map_or(String::new(), |v| v.to_string());
                w.write_record([
                    b.bin.start_ms.to_string(),
                    b.bin.end_ms.to_string(),
                    img.clone(),
                    n.to_string(),
                    c,
                ])?;
            }
        }
    }
    w.flush()?;
    let summary = json!({
        "subject_id": recording.subject_id,
        "region": recording.region,
        "n_neurons": table.n_neurons,
        "best_bin": best,
        "bins": table.bins.iter().map(|b| json!({
            "bin": b.bin,
            "mean_ceiling": b.mean,
            "median_ceiling": median_ceiling(b),
        })).collect::<Vec<_>>(),
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(json!({}))
}

#[derive(Debug, Serialize)]
struct ModelSummary {
    model_id: String,
    best_layer: Option<String>,
    score: Option<f64>,
    n_components: Option<usize>,
    grid: String,
    n_patches: Option<usize>,
    n_above_ceiling: Option<usize>,
    null_band: Option<NullBandSummary>,
    per_layer: Vec<LayerSummary>,
}

#[derive(Debug, Serialize)]
struct LayerSummary {
    layer_id: String,
    score: Option<f64>,
    n_components: usize,
    n_patches: usize,
    n_above_ceiling: usize,
    n_exclusions: usize,
}

#[derive(Debug, Serialize)]
struct NullBandSummary {
    lower: f64,
    upper: f64,
    permutations: usize,
    score_inside: bool,
}

fn null_summary(band: &NullBand, score: f64) -> NullBandSummary {
    NullBandSummary {
        lower: band.lower,
        upper: band.upper,
        permutations: band.scores.len(),
        score_inside: band.contains(score),
    }
}

/// `fit` writes per-layer results; `score` adds the per-model summary with
/// a permutation null band for the best layer.
pub fn run_fit(cfg: &RunConfig, args: &ScoreArgs, summarize: bool) -> Result<Value> {
    let manifest = load_manifest(cfg)?;
    let prep = prepare(&manifest, cfg)?;
    let models = load_models(&manifest, args.model.as_deref())?;

    let mut fitted: Vec<(String, Vec<(DesignMatrix, CrossValidation)>)> = Vec::new();
    for (model_id, layers) in &models {
        let mut cvs = Vec::new();
        for (layer_id, tensors) in layers {
            let dm = design_matrix(&prep, tensors, cfg)?;
            let cv = cross_validate(&dm, prep.ceilings(), cfg.components)
                .with_context(|| format!("fitting {model_id}/{layer_id}"))?;
            log::info!("{model_id}/{layer_id}: score {:?}", cv.result.score);
            cvs.push((dm, cv));
        }
        fitted.push((model_id.clone(), cvs));
    }

    let mut w = csv_writer(&cfg.out.join("scores.csv"))?;
    w.write_record(["model_id", "layer_id", "image_id", "score"])?;
    for (model_id, cvs) in &fitted {
        for (_, cv) in cvs {
            for img in &prep.recording.image_ids {
                let s = cv
                    .result
                    .per_image_score
                    .get(img)
                    .map_or(String::new(), |v| v.to_string());
                w.write_record([model_id, &cv.result.layer_id, img, &s])?;
            }
        }
    }
    w.flush()?;

    let layers: Vec<Value> = fitted
        .iter()
        .flat_map(|(m, cvs)| {
            cvs.iter()
                .map(move |(_, cv)| json!({ "model_id": m, "result": cv.result }))
        })
        .collect();
    write_json(&cfg.out.join("layers.json"), &layers)?;

    if summarize {
        let mut summaries = Vec::new();
        for (model_id, cvs) in &fitted {
            let results: Vec<_> = cvs.iter().map(|(_, c)| c.result.clone()).collect();
            let bs = brain_score(model_id, &results)?;
            let best = cvs
                .iter()
                .find(|(_, c)| Some(&c.result.layer_id) == bs.best_layer.as_ref());
            let null_band = match (best, bs.score) {
                (Some((dm, _)), Some(score)) => Some(null_summary(
                    &permutation_null(
                        dm,
                        prep.ceilings(),
                        cfg.components,
                        cfg.permutations,
                        cfg.seed,
                    )?,
                    score,
                )),
                _ => None,
            };
            let best = best.map(|(_, c)| c);
            if let Some(cv) = best.filter(|c| c.result.n_above_ceiling > 0) {
                log::warn!(
                    "{model_id}/{}: {} image scores exceed the noise ceiling",
                    cv.result.layer_id,
                    cv.result.n_above_ceiling
                );
            }
            summaries.push(ModelSummary {
                model_id: model_id.clone(),
                best_layer: bs.best_layer.clone(),
                score: bs.score,
                n_components: best.map(|c| c.result.n_components),
                grid: prep.grid.to_string(),
                n_patches: best.map(|c| c.result.n_patches),
                n_above_ceiling: best.map(|c| c.result.n_above_ceiling),
                null_band,
                per_layer: results
                    .iter()
                    .map(|r| LayerSummary {
                        layer_id: r.layer_id.clone(),
                        score: r.score,
                        n_components: r.n_components,
                        n_patches: r.n_patches,
                        n_above_ceiling: r.n_above_ceiling,
                        n_exclusions: r.exclusions.len(),
                    })
                    .collect(),
            });
        }
        let summary = json!({
            "subject_id": prep.recording.subject_id,
            "region": prep.recording.region,
            "best_bin": prep.best_bin,
            "mean_ceiling": prep.ceilings().mean,
            "grid": prep.grid.to_string(),
            "n_images": prep.maps.len(),
            "models": summaries,
        });
        write_json(&cfg.out.join("summary.json"), &summary)?;
    }
    Ok(serde_json::to_value(args)?)
}
