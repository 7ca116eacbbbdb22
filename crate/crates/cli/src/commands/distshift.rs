//! `distshift`: can a linear SVM tell two encoding sets apart?

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use itfit::stats::{dist_shift_test, pca_project, DEFAULT_REPEATS};
use itfit::tensorio::read_tensor;
use ndarray::{concatenate, s, Array2, Axis, Ix2};
use serde::Serialize;
use serde_json::{json, Value};

use super::write_json;
use crate::RunConfig;

#[derive(Debug, Clone, Args, Serialize)]
pub struct DistShiftArgs {
    /// Reference encodings: 2-axis .npb tensor or header-less numeric CSV
    #[arg(long)]
    pub reference: PathBuf,
    /// Probe encodings, same format and width
    #[arg(long)]
    pub probe: PathBuf,
    /// Rows drawn from each set per repeat [default: smaller set size]
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    pub repeats: usize,
    /// Project both sets onto this many joint principal components first
    #[arg(long)]
    pub pca: Option<usize>,
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    if path.extension().is_some_and(|e| e == "npb") {
        let t = read_tensor(path)?;
        let t = t
            .into_dimensionality::<Ix2>()
            .with_context(|| format!("{} is not a 2-axis tensor", path.display()))?;
        return Ok(t.mapv(f64::from));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut data = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{} line {}: not numeric", path.display(), i + 1))?;
        if *width.get_or_insert(row.len()) != row.len() {
            bail!("{} line {}: ragged row", path.display(), i + 1);
        }
        data.extend(row);
    }
    let w = width.unwrap_or(0);
    Ok(Array2::from_shape_vec((data.len() / w.max(1), w), data)?)
}

pub fn run(cfg: &RunConfig, args: &DistShiftArgs) -> Result<Value> {
    let mut a = read_matrix(&args.reference)?;
    let mut b = read_matrix(&args.probe)?;
    if let Some(n) = args.pca {
        let joint = concatenate(Axis(0), &[a.view(), b.view()])?;
        let proj = pca_project(joint.view(), n)?;
        let n_a = a.nrows();
        a = proj.projected.slice(s![..n_a, ..]).to_owned();
        b = proj.projected.slice(s![n_a.., ..]).to_owned();
    }
    let n = args.sample_size.unwrap_or(a.nrows().min(b.nrows()));
    let res = dist_shift_test(a.view(), b.view(), n, args.repeats, cfg.seed)?;
    eprintln!(
        "mean LOO accuracy {:.4} over {} repeats",
        res.mean_accuracy,
        res.accuracies.len()
    );
    write_json(
        &cfg.out.join("distshift.json"),
        &json!({
            "sample_size": n,
            "repeats": args.repeats,
            "mean_accuracy": res.mean_accuracy,
            "t_test": res.t_test,
            "accuracies": res.accuracies,
        }),
    )?;
    Ok(serde_json::to_value(args)?)
}
