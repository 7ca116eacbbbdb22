//! Score tables: `model_id,task_accuracy,predictivity[,group]`.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::InputError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model_id: String,
    pub task_accuracy: f64,
    pub predictivity: f64,
    pub group: Option<String>,
}

/// Read a score table; malformed rows fail with their line number.
pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id), Some(acc), Some(pred)) =
        (col("model_id"), col("task_accuracy"), col("predictivity"))
    else {
        return Err(InputError(format!(
            "{}: header must contain model_id,task_accuracy,predictivity",
            path.display()
        ))
        .into());
    };
    let group = col("group");
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| InputError(format!("{} line {line}: {what}", path.display()));
        let num = |i: usize, name: &str| -> std::result::Result<f64, InputError> {
            let v: f64 = rec
                .get(i)
                .ok_or_else(|| bad(&format!("missing {name}")))?
                .parse()
                .map_err(|_| bad(&format!("{name} is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(&format!("{name} is not finite")))
            }
        };
        let model_id = rec
            .get(id)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad("empty model_id"))?;
        rows.push(ScoreRow {
            model_id: model_id.to_string(),
            task_accuracy: num(acc, "task_accuracy")?,
            predictivity: num(pred, "predictivity")?,
            group: group
                .and_then(|g| rec.get(g))
                .filter(|s| !s.is_empty())
                .map(str::to_string),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_line_of_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(
            &p,
            "model_id,task_accuracy,predictivity\na,70,0.3\nb,x,0.2\n",
        )
        .unwrap();
        let err = read_score_table(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn group_column_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(
            &p,
            "model_id,predictivity,task_accuracy,group\na,0.3,70,h\nb,0.2,60,\n",
        )
        .unwrap();
        let rows = read_score_table(&p).unwrap();
        assert_eq!(rows[0].group.as_deref(), Some("h"));
        assert_eq!(rows[1].group, None);
        assert_eq!(rows[1].task_accuracy, 60.0);
    }
}
