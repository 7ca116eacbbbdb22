use anyhow::Result;
use clap::Args;
use itfit::encoder_fit::PatchGrid;
use itfit::synthgen::{generate, write_dataset, SyntheticSpec};
use serde::Serialize;
use serde_json::Value;

use crate::RunConfig;

/// `--seed`, `--grid` (fixation grid, default 9x9) and `--out` come from the shared settings.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub neurons: usize,
    #[arg(long, default_value_t = 14)]
    pub images: usize,
    #[arg(long, default_value_t = 8)]
    pub features: usize,
    /// Response noise, in units of the response standard deviation
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Peak firing rate (Hz) per unit of response
    #[arg(long, default_value_t = 50.0)]
    pub rate_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Activation pixels per grid cell
    #[arg(long, default_value_t = 2)]
    pub patch_px: usize,
}

pub fn run(cfg: &RunConfig, args: &SynthArgs) -> Result<Value> {
    let spec = SyntheticSpec {
        seed: cfg.seed,
        grid: cfg.grid.unwrap_or(PatchGrid::MONKEY2),
        n_neurons: args.neurons,
        n_images: args.images,
        n_features: args.features,
        readout: None,
        noise_std: args.noise,
        rate_scale: args.rate_scale,
        repeats: args.repeats,
        patch_px: args.patch_px,
    };
    let ds = generate(&spec)?;
    let manifest = write_dataset(&ds, &cfg.out)?;
    eprintln!(
        "wrote {} entries to {}",
        manifest.entries.len(),
        cfg.out.join("manifest.json").display()
    );
    Ok(serde_json::to_value(args)?)
}
