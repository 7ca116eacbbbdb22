use ndarray::{Array2, ArrayView2};

use super::{HarmonizerError, Result};

pub const DEFAULT_LEVELS: usize = 5;
const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Level 0 is the input; each further level is blurred and decimated by two.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidStack {
    pub levels: Vec<Array2<f64>>,
}

/// Deepest pyramid that keeps every level at least 1x1.
pub fn max_levels(rows: usize, cols: usize) -> usize {
    let m = rows.min(cols).max(1);
    (usize::BITS - 1 - m.leading_zeros()) as usize + 1
}

/// Requested depth clipped to what the map supports, warning when clipped.
pub fn clip_levels(rows: usize, cols: usize, n_levels: usize) -> usize {
    let cap = max_levels(rows, cols);
    if n_levels > cap {
        log::warn!("pyramid depth {n_levels} clipped to {cap} for a {rows}x{cols} map");
        cap
    } else {
        n_levels
    }
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 5x5 binomial blur (edge-replicate) followed by keeping even rows and columns.
pub fn reduce(level: ArrayView2<'_, f64>) -> Array2<f64> {
    let (h, w) = level.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    // horizontal pass at even columns, then vertical pass at even rows
    let mut horiz = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for oc in 0..ow {
            let c = 2 * oc as isize;
            horiz[[r, oc]] = BINOMIAL
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * level[[r, clamp(c + k as isize - 2, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for or in 0..oh {
        let r = 2 * or as isize;
        for oc in 0..ow {
            out[[or, oc]] = BINOMIAL
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * horiz[[clamp(r + k as isize - 2, h), oc]])
                .sum();
        }
    }
    out
}

/// Adjoint of [`reduce`]: maps a gradient on the coarse level back to the fine level.
pub fn reduce_adjoint(grad: ArrayView2<'_, f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (oh, ow) = grad.dim();
    let mut horiz = Array2::<f64>::zeros((rows, ow));
    for or in 0..oh {
        let r = 2 * or as isize;
        for oc in 0..ow {
            let g = grad[[or, oc]];
            for (k, wk) in BINOMIAL.iter().enumerate() {
                horiz[[clamp(r + k as isize - 2, rows), oc]] += wk * g;
            }
        }
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for oc in 0..ow {
            let c = 2 * oc as isize;
            let g = horiz[[r, oc]];
            for (k, wk) in BINOMIAL.iter().enumerate() {
                out[[r, clamp(c + k as isize - 2, cols)]] += wk * g;
            }
        }
    }
    out
}

/// Pyramid of exactly `n_levels` levels; callers clip the depth first.
pub(crate) fn build_levels(map: ArrayView2<'_, f64>, n_levels: usize) -> Vec<Array2<f64>> {
    let mut levels = vec![map.to_owned()];
    while levels.len() < n_levels {
        let next = reduce(levels.last().expect("non-empty").view());
        levels.push(next);
    }
    levels
}

pub fn gaussian_pyramid(map: ArrayView2<'_, f64>, n_levels: usize) -> Result<PyramidStack> {
    let (h, w) = map.dim();
    if h < 2 || w < 2 {
        return Err(HarmonizerError::Shape(format!(
            "map {h}x{w} is smaller than 2x2"
        )));
    }
    if n_levels == 0 {
        return Err(HarmonizerError::Invalid("n_levels must be >= 1".into()));
    }
    Ok(PyramidStack {
        levels: build_levels(map, clip_levels(h, w, n_levels)),
    })
}

/// Zero-mean, unit population-std map. `degenerate` is set (and the output
/// is all zeros) when the input has no variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ZNormalized {
    pub values: Array2<f64>,
    pub std: f64,
    pub degenerate: bool,
}

pub fn z_normalize(map: ArrayView2<'_, f64>) -> ZNormalized {
    let n = map.len() as f64;
    let mean = map.sum() / n;
    let var = map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // relative guard: a map of identical values can leave roundoff-level variance
    let scale = map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if std <= 1e-13 * scale || std == 0.0 {
        return ZNormalized {
            values: Array2::zeros(map.dim()),
            std,
            degenerate: true,
        };
    }
    ZNormalized {
        values: map.mapv(|v| (v - mean) / std),
        std,
        degenerate: false,
    }
}

/// Gradient with respect to the input of `z_normalize`, given the gradient
/// `gz` with respect to its output.
pub fn z_normalize_backward(z: &ZNormalized, gz: ArrayView2<'_, f64>) -> Array2<f64> {
    if z.degenerate {
        return Array2::zeros(gz.dim());
    }
    let n = gz.len() as f64;
    let mean_g = gz.sum() / n;
    let mean_gz = gz.iter().zip(&z.values).map(|(g, v)| g * v).sum::<f64>() / n;
    let mut out = gz.to_owned();
    out.zip_mut_with(&z.values, |g, &v| *g = (*g - mean_g - v * mean_gz) / z.std);
    out
}
