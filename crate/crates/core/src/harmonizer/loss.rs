use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::network::{Forward, ToyBatch, ToyNetwork};
use super::pyramid::{
    build_levels, clip_levels, max_levels, reduce_adjoint, z_normalize, z_normalize_backward,
    ZNormalized,
};
use super::{HarmonizerError, ImportanceMap, Result};

pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonizerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_levels: usize,
    /// Probability mass spread uniformly over classes; 0 disables smoothing.
    pub label_smoothing: f64,
}

impl Default for HarmonizerConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
            n_levels: super::DEFAULT_LEVELS,
            label_smoothing: 0.0,
        }
    }
}

impl HarmonizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(HarmonizerError::Invalid(format!(
                "lambdas must be >= 0, got lambda1 = {}, lambda2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.n_levels == 0 {
            return Err(HarmonizerError::Invalid("n_levels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(HarmonizerError::Invalid(
                "label smoothing must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizerLossBreakdown {
    /// Mean alignment over annotated items (0 when none are annotated).
    pub alignment: f64,
    /// Mean cross-entropy over the batch.
    pub cce: f64,
    /// Sum of squared parameters.
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
    /// Mean alignment contribution of each pyramid level.
    pub per_level: Vec<f64>,
    pub n_annotated: usize,
}

struct Level {
    zg: ZNormalized,
    diff: Array2<f64>,
    norm: f64,
}

fn check_pair(g: ArrayView2<'_, f64>, phi: ArrayView2<'_, f64>) -> Result<()> {
    if g.dim() != phi.dim() {
        return Err(HarmonizerError::Shape(format!(
            "map dims differ: {:?} vs {:?}",
            g.dim(),
            phi.dim()
        )));
    }
    let (h, w) = g.dim();
    if h < 2 || w < 2 {
        return Err(HarmonizerError::Shape(format!(
            "map {h}x{w} is smaller than 2x2"
        )));
    }
    Ok(())
}

fn levels_of(g: ArrayView2<'_, f64>, phi: ArrayView2<'_, f64>, n_levels: usize) -> Vec<Level> {
    let gl = build_levels(g, n_levels);
    let pl = build_levels(phi, n_levels);
    gl.iter()
        .zip(&pl)
        .map(|(a, b)| {
            let zg = z_normalize(a.view());
            let zp = z_normalize(b.view());
            let mut diff = zg.values.mapv(|v| v.max(0.0));
            diff.zip_mut_with(&zp.values, |d, &p| *d -= p.max(0.0));
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            Level { zg, diff, norm }
        })
        .collect()
}

/// Per-level terms `||relu(z(P_i g)) - relu(z(P_i phi))||` on raw arrays.
pub fn alignment_per_level(
    g: ArrayView2<'_, f64>,
    phi: ArrayView2<'_, f64>,
    n_levels: usize,
) -> Result<Vec<f64>> {
    check_pair(g, phi)?;
    if n_levels == 0 {
        return Err(HarmonizerError::Invalid("n_levels must be >= 1".into()));
    }
    let n = clip_levels(g.nrows(), g.ncols(), n_levels);
    Ok(levels_of(g, phi, n).iter().map(|l| l.norm).collect())
}

/// Multi-scale rectified alignment distance between a model map and a human map.
pub fn alignment_loss(g: &ImportanceMap, phi: &ImportanceMap, n_levels: usize) -> Result<f64> {
    Ok(
        alignment_per_level(g.values.view(), phi.values.view(), n_levels)?
            .iter()
            .sum(),
    )
}

/// Alignment value and its gradient with respect to `g`. `n_levels` must
/// already be within the supported depth.
fn alignment_with_grad(
    g: ArrayView2<'_, f64>,
    phi: ArrayView2<'_, f64>,
    n_levels: usize,
) -> (Vec<f64>, Array2<f64>) {
    let levels = levels_of(g, phi, n_levels);
    let mut carry: Option<Array2<f64>> = None;
    for (i, level) in levels.iter().enumerate().rev() {
        let mut gz = if level.norm > 0.0 {
            level.diff.mapv(|d| d / level.norm)
        } else {
            Array2::zeros(level.diff.dim())
        };
        gz.zip_mut_with(&level.zg.values, |v, &z| {
            if z <= 0.0 {
                *v = 0.0
            }
        });
        let mut gp = z_normalize_backward(&level.zg, gz.view());
        if let Some(c) = carry.take() {
            gp += &c;
        }
        if i > 0 {
            let (h, w) = levels[i - 1].diff.dim();
            carry = Some(reduce_adjoint(gp.view(), h, w));
        } else {
            carry = Some(gp);
        }
    }
    (
        levels.iter().map(|l| l.norm).collect(),
        carry.unwrap_or_else(|| Array2::zeros(g.dim())),
    )
}

fn softmax_targets(logits: &Array1<f64>, label: usize, smoothing: f64) -> (f64, Array1<f64>) {
    let k = logits.len() as f64;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (c, &z) in logits.iter().enumerate() {
        let t = if c == label { 1.0 - smoothing } else { 0.0 } + smoothing / k;
        let log_p = z - lse;
        if t > 0.0 {
            loss -= t * log_p;
        }
        grad[c] = log_p.exp() - t;
    }
    (loss, grad)
}

fn check_inputs(
    net: &ToyNetwork,
    batch: &ToyBatch,
    phi: &[Option<ImportanceMap>],
    config: &HarmonizerConfig,
) -> Result<usize> {
    config.validate()?;
    if batch.is_empty() {
        return Err(HarmonizerError::Invalid("empty batch".into()));
    }
    batch.validate_for(net)?;
    if phi.len() != batch.len() {
        return Err(HarmonizerError::Shape(format!(
            "{} importance slots for {} items",
            phi.len(),
            batch.len()
        )));
    }
    for m in phi.iter().flatten() {
        if m.values.dim() != net.input_shape {
            return Err(HarmonizerError::Shape(format!(
                "importance map {} is {:?}, inputs are {:?}",
                m.image_id,
                m.values.dim(),
                net.input_shape
            )));
        }
    }
    let (h, w) = net.input_shape;
    if phi.iter().any(Option::is_some) && (h < 2 || w < 2) {
        return Err(HarmonizerError::Shape(format!(
            "map {h}x{w} is smaller than 2x2"
        )));
    }
    Ok(config.n_levels.min(max_levels(h, w)))
}

/// Loss breakdown with per-layer weight and bias gradients.
type Evaluated = (HarmonizerLossBreakdown, Vec<Array2<f64>>, Vec<Array1<f64>>);

fn evaluate(
    net: &ToyNetwork,
    batch: &ToyBatch,
    phi: &[Option<ImportanceMap>],
    config: &HarmonizerConfig,
    want_grad: bool,
) -> Result<Evaluated> {
    let n_levels = check_inputs(net, batch, phi, config)?;
    let n = batch.len() as f64;
    let n_annotated = phi.iter().filter(|m| m.is_some()).count();
    let mut gw: Vec<Array2<f64>> = net.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut gb: Vec<Array1<f64>> = net.biases.iter().map(|b| Array1::zeros(b.len())).collect();
    let mut cce = 0.0;
    let mut alignment = 0.0;
    let mut per_level = vec![0.0; n_levels];
    let n_layers = net.n_layers();

    for ((x, &y), m) in batch.inputs.iter().zip(&batch.labels).zip(phi) {
        let fwd: Forward = net.forward(x.view())?;
        let (loss, dlogits) = softmax_targets(fwd.logits(), y, config.label_smoothing);
        cce += loss;
        if want_grad {
            let mut delta = dlogits / n;
            for l in (0..n_layers).rev() {
                gw[l] += &outer(&delta, &fwd.a[l]);
                gb[l] += &delta;
                if l > 0 {
                    delta = net.weights[l].t().dot(&delta) * fwd.mask(l - 1);
                }
            }
        }
        let Some(m) = m else { continue };
        let (r, g) = net.logit_backward(&fwd, y);
        let g = g
            .into_shape_with_order(net.input_shape)
            .expect("input size");
        let (terms, grad_g) = alignment_with_grad(g.view(), m.values.view(), n_levels);
        for (acc, t) in per_level.iter_mut().zip(&terms) {
            *acc += t / n_annotated as f64;
        }
        alignment += terms.iter().sum::<f64>();
        if want_grad && config.lambda1 > 0.0 {
            // second-order path: g = W_0^T m_0 W_1^T ... e_y, rectifier masks held fixed
            let scale = config.lambda1 / n_annotated as f64;
            let mut gq = Array1::from_iter(grad_g.iter().map(|v| v * scale));
            for l in 0..n_layers {
                gw[l] += &outer(&r[l], &gq);
                if l + 1 < n_layers {
                    gq = net.weights[l].dot(&gq) * fwd.mask(l);
                }
            }
        }
    }

    let alignment = if n_annotated > 0 {
        alignment / n_annotated as f64
    } else {
        0.0
    };
    let cce = cce / n;
    let weight_decay = net.weight_decay();
    if want_grad && config.lambda2 > 0.0 {
        for (g, w) in gw.iter_mut().zip(&net.weights) {
            g.scaled_add(2.0 * config.lambda2, w);
        }
        for (g, b) in gb.iter_mut().zip(&net.biases) {
            g.scaled_add(2.0 * config.lambda2, b);
        }
    }
    let breakdown = HarmonizerLossBreakdown {
        alignment,
        cce,
        weight_decay,
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        total: config.lambda1 * alignment + cce + config.lambda2 * weight_decay,
        per_level,
        n_annotated,
    };
    Ok((breakdown, gw, gb))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)))
}

/// Harmonization loss of `net` on `batch`; `phi[i]` is the human map of item
/// `i`, or `None` when that item is not annotated.
pub fn total_loss(
    net: &ToyNetwork,
    batch: &ToyBatch,
    phi: &[Option<ImportanceMap>],
    config: &HarmonizerConfig,
) -> Result<HarmonizerLossBreakdown> {
    let (h, w) = net.input_shape;
    if phi.iter().any(Option::is_some) && h >= 2 && w >= 2 {
        clip_levels(h, w, config.n_levels);
    }
    Ok(evaluate(net, batch, phi, config, false)?.0)
}

/// Loss together with its exact gradient, laid out like [`ToyNetwork::params_flat`].
pub fn total_loss_and_gradient(
    net: &ToyNetwork,
    batch: &ToyBatch,
    phi: &[Option<ImportanceMap>],
    config: &HarmonizerConfig,
) -> Result<(HarmonizerLossBreakdown, Vec<f64>)> {
    let (breakdown, gw, gb) = evaluate(net, batch, phi, config, true)?;
    let mut flat = Vec::with_capacity(net.n_params());
    for (w, b) in gw.iter().zip(&gb) {
        flat.extend(w.iter());
        flat.extend(b.iter());
    }
    Ok((breakdown, flat))
}

/// Distances to the nearest non-differentiable point of the loss: hidden
/// pre-activations at zero, z-normalized gradient levels at zero, and
/// vanishing alignment differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinkMargin {
    pub hidden: f64,
    pub rectifier: f64,
    pub norm: f64,
}

impl KinkMargin {
    pub fn min(&self) -> f64 {
        self.hidden.min(self.rectifier).min(self.norm)
    }
}

pub fn kink_margin(
    net: &ToyNetwork,
    batch: &ToyBatch,
    phi: &[Option<ImportanceMap>],
    config: &HarmonizerConfig,
) -> Result<KinkMargin> {
    let n_levels = check_inputs(net, batch, phi, config)?;
    let mut margin = KinkMargin {
        hidden: f64::INFINITY,
        rectifier: f64::INFINITY,
        norm: f64::INFINITY,
    };
    for ((x, &y), m) in batch.inputs.iter().zip(&batch.labels).zip(phi) {
        let fwd = net.forward(x.view())?;
        for z in &fwd.z[..fwd.z.len() - 1] {
            margin.hidden = z.iter().fold(margin.hidden, |acc, v| acc.min(v.abs()));
        }
        let Some(m) = m else { continue };
        let (_, g) = net.logit_backward(&fwd, y);
        let g = g
            .into_shape_with_order(net.input_shape)
            .expect("input size");
        for level in levels_of(g.view(), m.values.view(), n_levels) {
            if !level.zg.degenerate {
                margin.rectifier = level
                    .zg
                    .values
                    .iter()
                    .fold(margin.rectifier, |acc, v| acc.min(v.abs()));
            }
            margin.norm = margin.norm.min(level.norm);
        }
    }
    Ok(margin)
}
