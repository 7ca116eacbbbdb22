use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::{FitError, Result};
use crate::recordings::SpatialActivityMap;
use crate::tensorio::ActivationTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    /// Patch grid used with 16x16 fixation recordings (14 images -> 4,046 patches).
    pub const MONKEY1: PatchGrid = PatchGrid { rows: 17, cols: 17 };
    /// Patch grid used with 7x7 fixation recordings (14 images -> 1,134 patches).
    pub const MONKEY2: PatchGrid = PatchGrid { rows: 9, cols: 9 };

    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(FitError::Invalid(format!(
                "patch grid {rows}x{cols} must be >= 1x1"
            )));
        }
        Ok(Self { rows, cols })
    }

    /// Default patch grid for a recording's fixation grid. The two reference
    /// fixation grids map to the patch grids that give 4,046 and 1,134
    /// patches for 14 images; any other fixation grid is used as-is.
    pub fn default_for_fixation(grid_rows: usize, grid_cols: usize) -> Self {
        match (grid_rows, grid_cols) {
            (16, 16) => Self::MONKEY1,
            (7, 7) => Self::MONKEY2,
            (rows, cols) => Self { rows, cols },
        }
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }
}

impl std::fmt::Display for PatchGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl std::str::FromStr for PatchGrid {
    type Err = FitError;
    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| FitError::Invalid(format!("grid `{s}` is not of the form RxC")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| FitError::Invalid(format!("grid `{s}` is not of the form RxC")))
        };
        PatchGrid::new(parse(r)?, parse(c)?)
    }
}

/// How a tile of the feature map becomes a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Channel-wise mean over the tile's pixels.
    #[default]
    Mean,
    /// Concatenate the tile's pixels; requires equal tile sizes.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchIndex {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
}

/// Split `n` pixels into `parts` contiguous spans; the first `n % parts`
/// spans get one extra pixel.
pub fn tile_bounds(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let rem = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let span = (start, start + len);
            start += len;
            span
        })
        .collect()
}

fn pool_tile(tile: ArrayView3<'_, f32>, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::Mean => {
            let channels = tile.shape()[2];
            let npix = (tile.shape()[0] * tile.shape()[1]) as f64;
            let mut acc = vec![0.0f64; channels];
            for px in tile.rows() {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v as f64;
                }
            }
            acc.iter_mut().for_each(|a| *a /= npix);
            acc
        }
        Pooling::Flatten => tile.iter().map(|&v| v as f64).collect(),
    }
}

/// Tile the feature map into `grid` rectangles and pool each one.
/// Patches come out in row-major grid order.
pub fn patchify(tensor: &ActivationTensor, grid: PatchGrid) -> Result<Vec<(PatchIndex, Vec<f64>)>> {
    patchify_with(tensor, grid, Pooling::Mean)
}

pub fn patchify_with(
    tensor: &ActivationTensor,
    grid: PatchGrid,
    pooling: Pooling,
) -> Result<Vec<(PatchIndex, Vec<f64>)>> {
    let (h, w) = (tensor.height(), tensor.width());
    if grid.rows > h || grid.cols > w {
        return Err(FitError::GridExceedsFeatureMap {
            grid,
            height: h,
            width: w,
        });
    }
    if pooling == Pooling::Flatten && (h % grid.rows != 0 || w % grid.cols != 0) {
        return Err(FitError::Invalid(format!(
            "flatten pooling needs equal tiles: {h}x{w} is not divisible by {grid}"
        )));
    }
    let row_spans = tile_bounds(h, grid.rows);
    let col_spans = tile_bounds(w, grid.cols);
    let mut out = Vec::with_capacity(grid.n_patches());
    for (r, &(r0, r1)) in row_spans.iter().enumerate() {
        for (c, &(c0, c1)) in col_spans.iter().enumerate() {
            let tile = tensor.data.slice(s![r0..r1, c0..c1, ..]);
            out.push((
                PatchIndex {
                    image_id: tensor.image_id.clone(),
                    row: r,
                    col: c,
                },
                pool_tile(tile, pooling),
            ));
        }
    }
    Ok(out)
}

/// Bilinearly resample a (rows, cols, neurons) map onto another grid,
/// aligning corner cells. Equal grids are returned unchanged.
pub fn resample_map(values: &Array3<f64>, rows: usize, cols: usize) -> Array3<f64> {
    let (sr, sc, n) = values.dim();
    if (sr, sc) == (rows, cols) {
        return values.clone();
    }
    let coord = |i: usize, dst: usize, src: usize| -> (usize, usize, f64) {
        if src == 1 {
            return (0, 0, 0.0);
        }
        let x = if dst == 1 {
            (src - 1) as f64 / 2.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (x.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Array3::zeros((rows, cols, n));
    for r in 0..rows {
        let (r0, r1, fr) = coord(r, rows, sr);
        for c in 0..cols {
            let (c0, c1, fc) = coord(c, cols, sc);
            for k in 0..n {
                let top = values[[r0, c0, k]] * (1.0 - fc) + values[[r0, c1, k]] * fc;
                let bottom = values[[r1, c0, k]] * (1.0 - fc) + values[[r1, c1, k]] * fc;
                out[[r, c, k]] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    out
}

/// Patch features paired with neural responses at the same grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub layer_id: String,
    /// (n_patches, n_features)
    pub x: Array2<f64>,
    /// (n_patches, n_neurons)
    pub y: Array2<f64>,
    pub patch_index: Vec<PatchIndex>,
}

impl DesignMatrix {
    pub fn new(
        layer_id: impl Into<String>,
        x: Array2<f64>,
        y: Array2<f64>,
        patch_index: Vec<PatchIndex>,
    ) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() != patch_index.len() {
            return Err(FitError::Invalid(format!(
                "row counts disagree: X {}, Y {}, index {}",
                x.nrows(),
                y.nrows(),
                patch_index.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(FitError::Invalid(
                "design matrix has non-finite entries".into(),
            ));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            x,
            y,
            patch_index,
        })
    }

    /// Distinct image ids in order of first appearance, with their row indices.
    pub fn image_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, p) in self.patch_index.iter().enumerate() {
            match groups.iter_mut().find(|(id, _)| *id == p.image_id) {
                Some((_, rows)) => rows.push(i),
                None => groups.push((p.image_id.clone(), vec![i])),
            }
        }
        groups
    }
}

/// Stack patch features of one layer against the spatial maps of the same
/// images. Rows follow the order of `maps`, then row-major patch order.
pub fn build_design_matrix(
    layer: &[ActivationTensor],
    maps: &[SpatialActivityMap],
    grid: PatchGrid,
    pooling: Pooling,
) -> Result<DesignMatrix> {
    let first = layer
        .first()
        .ok_or_else(|| FitError::Invalid("no activation tensors for layer".into()))?;
    let layer_id = first.layer_id.clone();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut index = Vec::new();
    let n_neurons = maps.first().map_or(0, |m| m.n_neurons());
    for map in maps {
        let act = layer
            .iter()
            .find(|a| a.image_id == map.image_id)
            .ok_or_else(|| FitError::MissingActivation {
                layer_id: layer_id.clone(),
                image_id: map.image_id.clone(),
            })?;
        let resampled = resample_map(&map.values, grid.rows, grid.cols);
        for (pi, feat) in patchify_with(act, grid, pooling)? {
            ys.extend(resampled.slice(s![pi.row, pi.col, ..]).iter());
            xs.push(feat);
            index.push(pi);
        }
    }
    let n_features = xs.first().map_or(0, Vec::len);
    if xs.iter().any(|f| f.len() != n_features) {
        return Err(FitError::Invalid(format!(
            "layer {layer_id}: activation channel counts differ across images"
        )));
    }
    let x = Array2::from_shape_vec((xs.len(), n_features), xs.concat()).expect("rows checked");
    let y = Array2::from_shape_vec((index.len(), n_neurons), ys).expect("one row per patch");
    DesignMatrix::new(layer_id, x, y, index)
}
