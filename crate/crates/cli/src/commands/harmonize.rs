//! `harmonize-eval`: loss breakdown of a toy network on manifest data, or
//! the planted-saliency pilot with `--planted`.

use anyhow::{bail, Context, Result};
use clap::Args;
use itfit::harmonizer::{
    planted_pilot, total_loss, toy_harmonize_train, AnnotatedBatch, HarmonizerConfig,
    HarmonizerLossBreakdown, ImportanceMap, MapSource, PilotSettings, ToyBatch, ToyNetwork,
    TrainConfig, DEFAULT_LABEL_SMOOTHING,
};
use itfit::tensorio::{load_activations, read_tensor, ActivationTensor, EntryKind};
use ndarray::{Array2, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::{load_manifest, write_json};
use crate::{InputError, RunConfig};

#[derive(Debug, Clone, Args, Serialize)]
pub struct HarmonizeArgs {
    /// Model whose activations (channel mean) are the network inputs [default: first in manifest]
    #[arg(long)]
    pub model: Option<String>,
    /// Layer of that model [default: first in manifest]
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Training epochs before the final breakdown (0 evaluates the initial network)
    #[arg(long, default_value_t = 0)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LABEL_SMOOTHING)]
    pub label_smoothing: f64,
    /// Run the planted-saliency pilot (lambda1 = 0 against --lambda1) instead
    #[arg(long)]
    pub planted: bool,
}

fn breakdown_text(title: &str, b: &HarmonizerLossBreakdown) -> String {
    let mut s = format!(
        "[{title}]\nalignment    {:.6}\ncce          {:.6}\nweight_decay {:.6}\nlambda1      {}\nlambda2      {}\ntotal        {:.6}\n",
        b.alignment, b.cce, b.weight_decay, b.lambda1, b.lambda2, b.total
    );
    for (i, v) in b.per_level.iter().enumerate() {
        s.push_str(&format!("level{i}       {v:.6}\n"));
    }
    s
}

fn channel_mean(t: &ActivationTensor) -> Array2<f64> {
    t.data
        .mapv(f64::from)
        .mean_axis(Axis(2))
        .expect("channels >= 1")
}

pub fn run(cfg: &RunConfig, args: &HarmonizeArgs) -> Result<Value> {
    if args.planted {
        let settings = PilotSettings {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            n_levels: cfg.levels,
            init_seed: cfg.seed,
            learning_rate: args.learning_rate,
            ..PilotSettings::default()
        };
        let report = planted_pilot(&settings)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        write_json(&cfg.out.join("harmonize.json"), &report)?;
        return Ok(serde_json::to_value(args)?);
    }

    let manifest = load_manifest(cfg)?;
    let maps: Vec<_> = manifest.entries_of(EntryKind::ImportanceMap).collect();
    if maps.is_empty() {
        return Err(InputError("no importance map entries".into()).into());
    }
    let acts = load_activations(&manifest)?;
    let model = args
        .model
        .clone()
        .or_else(|| acts.first().map(|a| a.model_id.clone()));
    let layer = args.layer.clone().or_else(|| {
        acts.iter()
            .find(|a| Some(&a.model_id) == model.as_ref())
            .map(|a| a.layer_id.clone())
    });
    let inputs_for = |id: &str| {
        acts.iter().find(|a| {
            Some(&a.model_id) == model.as_ref()
                && Some(&a.layer_id) == layer.as_ref()
                && a.image_id == id
        })
    };

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut phi = Vec::new();
    for e in &maps {
        let id = e.meta("image_id")?;
        let label: usize = e
            .meta("label")?
            .parse()
            .with_context(|| format!("label of {id}"))?;
        let values = read_tensor(manifest.resolve(e))?
            .into_dimensionality::<Ix2>()
            .with_context(|| format!("importance map {id} is not 2-axis"))?
            .mapv(f64::from);
        let act = inputs_for(id).ok_or_else(|| {
            InputError(format!(
                "no activation for image {id} in {model:?}/{layer:?}"
            ))
        })?;
        let x = channel_mean(act);
        if x.dim() != values.dim() {
            bail!(
                "image {id}: input {:?} and importance map {:?} differ in shape",
                x.dim(),
                values.dim()
            );
        }
        inputs.push(x);
        labels.push(label);
        phi.push(Some(ImportanceMap::new(MapSource::Human, id, values)?));
    }
    let n_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let shape = inputs[0].dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = ToyNetwork::random(shape, &[args.hidden], n_classes, &mut rng)?;
    let loss_cfg = HarmonizerConfig {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        n_levels: cfg.levels,
        label_smoothing: args.label_smoothing,
    };
    let batch = ToyBatch::new(inputs, labels)?;
    let initial = total_loss(&net, &batch, &phi, &loss_cfg)?;
    print!("{}", breakdown_text("initial", &initial));

    let mut result =
        json!({ "model_id": model, "layer_id": layer, "n_items": batch.len(), "initial": initial });
    if args.epochs > 0 {
        let stream: Vec<AnnotatedBatch> = (0..batch.len())
            .step_by(args.batch_size.max(1))
            .map(|start| {
                let end = (start + args.batch_size.max(1)).min(batch.len());
                AnnotatedBatch {
                    batch: ToyBatch {
                        inputs: batch.inputs[start..end].to_vec(),
                        labels: batch.labels[start..end].to_vec(),
                    },
                    phi: phi[start..end].to_vec(),
                }
            })
            .collect();
        let out = toy_harmonize_train(
            &net,
            &stream,
            &TrainConfig::new(loss_cfg, args.learning_rate, args.epochs),
        )?;
        let last = out.history.last().expect("initial record");
        print!("{}", breakdown_text("trained", &last.loss));
        result["trained"] = serde_json::to_value(&last.loss)?;
        result["diverged"] = json!(out.diverged);
        result["history"] = serde_json::to_value(&out.history)?;
    }
    write_json(&cfg.out.join("harmonize.json"), &result)?;
    Ok(serde_json::to_value(args)?)
}
