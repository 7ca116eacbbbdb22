//! `pareto` and `report`: front membership, scatter plot, group t-tests.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use itfit::stats::{pareto_front_indices, t_test_independent, ParetoPoint, TTestResult};
use serde::Serialize;
use serde_json::{json, Value};

use super::{csv_writer, write_json};
use crate::plot::pareto_svg;
use crate::table::{read_score_table, ScoreRow};
use crate::{InputError, RunConfig};

#[derive(Debug, Clone, Args, Serialize)]
pub struct ParetoArgs {
    /// CSV with model_id,task_accuracy,predictivity
    #[arg(long)]
    pub scores: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// One or more CSVs with model_id,task_accuracy,predictivity[,group]
    #[arg(long, required = true, num_args = 1..)]
    pub scores: Vec<PathBuf>,
}

fn points(rows: &[ScoreRow]) -> Result<Vec<ParetoPoint>> {
    rows.iter()
        .map(|r| ParetoPoint::new(&r.model_id, r.task_accuracy, r.predictivity).map_err(Into::into))
        .collect()
}

/// Writes `pareto.csv` and `plot.svg`; returns front indices.
fn write_front(cfg: &RunConfig, rows: &[ScoreRow]) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Err(InputError("score table has no rows".into()).into());
    }
    let pts = points(rows)?;
    let front = pareto_front_indices(&pts);
    let mut on_front = vec![false; rows.len()];
    for &i in &front {
        on_front[i] = true;
    }
    let mut w = csv_writer(&cfg.out.join("pareto.csv"))?;
    w.write_record([
        "model_id",
        "task_accuracy",
        "predictivity",
        "group",
        "on_front",
    ])?;
    for (r, f) in rows.iter().zip(&on_front) {
        w.write_record([
            r.model_id.clone(),
            r.task_accuracy.to_string(),
            r.predictivity.to_string(),
            r.group.clone().unwrap_or_default(),
            f.to_string(),
        ])?;
    }
    w.flush()?;
    let svg_path = cfg.out.join("plot.svg");
    std::fs::write(&svg_path, pareto_svg(&pts, &front))
        .with_context(|| format!("writing {}", svg_path.display()))?;
    Ok(front)
}

pub fn run_pareto(cfg: &RunConfig, args: &ParetoArgs) -> Result<Value> {
    let rows = read_score_table(&args.scores)?;
    let front = write_front(cfg, &rows)?;
    eprintln!("{} of {} models on the front", front.len(), rows.len());
    Ok(serde_json::to_value(args)?)
}

#[derive(Debug, Serialize)]
struct GroupComparison {
    group_a: String,
    group_b: String,
    n_a: usize,
    n_b: usize,
    predictivity: Option<TTestResult>,
    task_accuracy: Option<TTestResult>,
}

/// Pooled-variance t-tests for every pair of declared groups.
fn group_tests(rows: &[ScoreRow]) -> Vec<GroupComparison> {
    let mut groups: BTreeMap<&str, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        if let Some(g) = &r.group {
            groups.entry(g).or_default().push(r);
        }
    }
    let names: Vec<&str> = groups.keys().copied().collect();
    let mut out = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (ga, gb) = (&groups[a], &groups[b]);
            let test = |f: fn(&ScoreRow) -> f64| {
                let xa: Vec<f64> = ga.iter().map(|r| f(r)).collect();
                let xb: Vec<f64> = gb.iter().map(|r| f(r)).collect();
                t_test_independent(&xa, &xb, true)
                    .inspect_err(|e| log::warn!("t-test {a} vs {b}: {e}"))
                    .ok()
            };
            out.push(GroupComparison {
                group_a: a.to_string(),
                group_b: b.to_string(),
                n_a: ga.len(),
                n_b: gb.len(),
                predictivity: test(|r| r.predictivity),
                task_accuracy: test(|r| r.task_accuracy),
            });
        }
    }
    out
}

pub fn run_report(cfg: &RunConfig, args: &ReportArgs) -> Result<Value> {
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    for path in &args.scores {
        let table = read_score_table(path)?;
        sources.extend(std::iter::repeat_n(path.display().to_string(), table.len()));
        rows.extend(table);
    }
    let mut w = csv_writer(&cfg.out.join("merged.csv"))?;
    w.write_record([
        "model_id",
        "task_accuracy",
        "predictivity",
        "group",
        "source",
    ])?;
    for (r, src) in rows.iter().zip(&sources) {
        w.write_record([
            r.model_id.clone(),
            r.task_accuracy.to_string(),
            r.predictivity.to_string(),
            r.group.clone().unwrap_or_default(),
            src.clone(),
        ])?;
    }
    w.flush()?;
    let front = write_front(cfg, &rows)?;
    let report = json!({
        "n_models": rows.len(),
        "front": front.iter().map(|&i| &rows[i].model_id).collect::<Vec<_>>(),
        "group_tests": group_tests(&rows),
    });
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(serde_json::to_value(args)?)
}
