use serde::{Deserialize, Serialize};

use super::{Result, StatsError};

/// One model in the accuracy / predictivity plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub model_id: String,
    /// Task accuracy in percent.
    pub task_accuracy: f64,
    pub predictivity: f64,
}

impl ParetoPoint {
    pub fn new(model_id: impl Into<String>, task_accuracy: f64, predictivity: f64) -> Result<Self> {
        if !task_accuracy.is_finite() || !predictivity.is_finite() {
            return Err(StatsError::NonFinite);
        }
        Ok(Self {
            model_id: model_id.into(),
            task_accuracy,
            predictivity,
        })
    }

    /// `self` strictly dominates `other`: no worse in both, better in one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.task_accuracy >= other.task_accuracy
            && self.predictivity >= other.predictivity
            && (self.task_accuracy > other.task_accuracy || self.predictivity > other.predictivity)
    }
}

/// Indices of non-dominated points, ordered by accuracy ascending (input order on ties).
pub fn pareto_front_indices(points: &[ParetoPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .task_accuracy
            .total_cmp(&points[a].task_accuracy)
            .then(a.cmp(&b))
    });

    // Sweep from highest accuracy down, one accuracy level at a time.
    let mut best_above = f64::NEG_INFINITY;
    let mut front = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let acc = points[order[i]].task_accuracy;
        let mut j = i;
        let mut level_best = f64::NEG_INFINITY;
        while j < order.len() && points[order[j]].task_accuracy == acc {
            level_best = level_best.max(points[order[j]].predictivity);
            j += 1;
        }
        for &k in &order[i..j] {
            let p = points[k].predictivity;
            if p > best_above && p >= level_best {
                front.push(k);
            }
        }
        best_above = best_above.max(level_best);
        i = j;
    }
    front.sort_by(|&a, &b| {
        points[a]
            .task_accuracy
            .total_cmp(&points[b].task_accuracy)
            .then(a.cmp(&b))
    });
    front
}

/// Points not strictly dominated by any other point, sorted by accuracy ascending.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    pareto_front_indices(points)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}
