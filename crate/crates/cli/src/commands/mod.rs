//! Subcommand implementations. Each `run` writes its artifacts and returns a
//! JSON echo of its own arguments for the run metadata.

pub mod craft;
pub mod distshift;
pub mod harmonize;
pub mod report;
pub mod score;
pub mod synth;

use std::path::Path;

use anyhow::{Context, Result};
use itfit::tensorio::{self, DatasetManifest};
use serde::Serialize;
use serde_json::{json, Value};

use crate::RunConfig;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest()?;
    tensorio::load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// `run_meta.json`: everything needed to repeat the run.
pub fn write_run_meta(
    cfg: &RunConfig,
    command: &str,
    config_file: Option<&Path>,
    args: Value,
) -> Result<()> {
    let meta = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config_file": config_file,
        "config": cfg,
        "args": args,
        "seed": cfg.seed,
        "threads": rayon::current_num_threads(),
        "versions": {
            "itfit": itfit::VERSION,
            "itfit-cli": env!("CARGO_PKG_VERSION"),
        },
    });
    write_json(&cfg.out.join("run_meta.json"), &meta)
}
