//! `craft`: concepts from NMF of the best layer's predicted activities.

use anyhow::{Context, Result};
use clap::Args;
use itfit::concepts::{
    concept_importance, nmf_factorize, shift_nonnegative, top_patches, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use itfit::encoder_fit::{brain_score, cross_validate, pls_fit};
use serde::Serialize;
use serde_json::{json, Value};

use super::score::{design_matrix, load_models, prepare};
use super::{csv_writer, load_manifest, write_json};
use crate::{InputError, RunConfig};

#[derive(Debug, Clone, Args, Serialize)]
pub struct CraftArgs {
    /// Model to decompose [default: the only model in the manifest]
    #[arg(long)]
    pub model: Option<String>,
    /// Layer to decompose [default: best cross-validated layer]
    #[arg(long)]
    pub layer: Option<String>,
    /// Patches listed per concept
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Also write concept_heat.csv with every patch's concept weights
    #[arg(long)]
    pub heat_csv: bool,
}

pub fn run(cfg: &RunConfig, args: &CraftArgs) -> Result<Value> {
    let manifest = load_manifest(cfg)?;
    let prep = prepare(&manifest, cfg)?;
    let models = load_models(&manifest, args.model.as_deref())?;
    if models.len() > 1 {
        let ids: Vec<_> = models.iter().map(|(m, _)| m.as_str()).collect();
        return Err(InputError(format!("several models ({ids:?}); pick one with --model")).into());
    }
    let (model_id, layers) = &models[0];

    let layer_id = match &args.layer {
        Some(l) => l.clone(),
        None => {
            let results = layers
                .iter()
                .map(|(_, t)| {
                    Ok(cross_validate(
                        &design_matrix(&prep, t, cfg)?,
                        prep.ceilings(),
                        cfg.components,
                    )?
                    .result)
                })
                .collect::<Result<Vec<_>>>()?;
            brain_score(model_id, &results)?
                .best_layer
                .context("no layer produced a score")?
        }
    };
    let tensors = &layers
        .iter()
        .find(|(l, _)| *l == layer_id)
        .ok_or_else(|| InputError(format!("model {model_id} has no layer {layer_id}")))?
        .1;
    let dm = design_matrix(&prep, tensors, cfg)?;
    let encoder = pls_fit(dm.x.view(), dm.y.view(), cfg.components)?;
    let predicted = encoder.predict(dm.x.view())?;
    let (a, shift) = shift_nonnegative(predicted.view());
    let basis = nmf_factorize(a.view(), cfg.k, DEFAULT_MAX_ITER, DEFAULT_TOL, cfg.seed)?;
    let importance = concept_importance(&basis);
    let tops = top_patches(&basis, &dm.patch_index, args.top)?;

    let concepts: Vec<Value> = importance
        .shares
        .iter()
        .zip(&tops.concepts)
        .enumerate()
        .map(
            |(i, (share, patches))| json!({ "concept": i, "share": share, "top_patches": patches }),
        )
        .collect();
    write_json(
        &cfg.out.join("concepts.json"),
        &json!({
            "model_id": model_id,
            "layer_id": layer_id,
            "k": basis.k,
            "shift": shift,
            "objective": basis.objective(),
            "iterations": basis.objective_history.len(),
            "degenerate": importance.degenerate,
            "concepts": concepts,
        }),
    )?;
    if args.heat_csv {
        let mut w = csv_writer(&cfg.out.join("concept_heat.csv"))?;
        w.write_record(["concept", "image_id", "row", "col", "activation"])?;
        for (c, col) in basis.w.columns().into_iter().enumerate() {
            for (p, v) in dm.patch_index.iter().zip(col) {
                w.write_record([
                    c.to_string(),
                    p.image_id.clone(),
                    p.row.to_string(),
                    p.col.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(serde_json::to_value(args)?)
}
