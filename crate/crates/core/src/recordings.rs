//! Spatially mapped recordings: time binning, per-image spatial activity
//! maps, and peer-correlation noise ceilings.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::stats::{self, spearman};
use crate::tensorio::{self, DatasetManifest, EntryKind, ManifestEntry, TensorIoError};

/// Fixation grid of the first animal's recordings.
pub const MONKEY1_GRID: (usize, usize) = (16, 16);
/// Fixation grid of the second animal's recordings.
pub const MONKEY2_GRID: (usize, usize) = (7, 7);
/// Default analysis window and bin width, in ms.
pub const DEFAULT_BIN_START_MS: f64 = 50.0;
pub const DEFAULT_BIN_END_MS: f64 = 250.0;
pub const DEFAULT_BIN_WIDTH_MS: f64 = 40.0;

#[derive(Debug, thiserror::Error)]
pub enum RecordingError {
    #[error(
        "bin width must be positive and end > start (got start={start}, end={end}, width={width})"
    )]
    BadRange { start: f64, end: f64, width: f64 },
    #[error("range not a multiple of bin width")]
    NotMultiple,
    #[error("invalid recording set: {0}")]
    Invalid(String),
    #[error("no presentation of image {image_id} at grid position ({row}, {col})")]
    MissingCell {
        image_id: String,
        row: usize,
        col: usize,
    },
    #[error("noise ceiling undefined for a single neuron")]
    SingleNeuron,
    #[error("spatial maps disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("no bins")]
    NoBins,
    #[error("malformed spike sidecar {path} line {line}: {message}")]
    Sidecar {
        path: String,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

pub type Result<T> = std::result::Result<T, RecordingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    ML,
    PL,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::ML => "ML",
            Region::PL => "PL",
        })
    }
}

impl std::str::FromStr for Region {
    type Err = RecordingError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ML" | "ml" => Ok(Region::ML),
            "PL" | "pl" => Ok(Region::PL),
            other => Err(RecordingError::Invalid(format!("unknown region {other}"))),
        }
    }
}

/// One presentation of an image at a fixation offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PresentationRecord {
    pub image_id: String,
    pub fixation_row: usize,
    pub fixation_col: usize,
    /// Spike times (ms after stimulus onset), one list per neuron.
    pub neuron_responses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingSet {
    pub subject_id: String,
    pub region: Region,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub n_neurons: usize,
    pub image_ids: Vec<String>,
    pub presentations: Vec<PresentationRecord>,
}

impl RecordingSet {
    /// Checks indices, neuron counts and spike times. Grid coverage is checked
    /// by [`build_spatial_maps`], which can name the missing cell.
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 || self.n_neurons == 0 {
            return Err(RecordingError::Invalid(
                "grid dims and neuron count must be positive".into(),
            ));
        }
        for (k, p) in self.presentations.iter().enumerate() {
            if !self.image_ids.contains(&p.image_id) {
                return Err(RecordingError::Invalid(format!(
                    "presentation {k} references unknown image {}",
                    p.image_id
                )));
            }
            if p.fixation_row >= self.grid_rows || p.fixation_col >= self.grid_cols {
                return Err(RecordingError::Invalid(format!(
                    "presentation {k} fixation ({}, {}) outside {}x{} grid",
                    p.fixation_row, p.fixation_col, self.grid_rows, self.grid_cols
                )));
            }
            if p.neuron_responses.len() != self.n_neurons {
                return Err(RecordingError::Invalid(format!(
                    "presentation {k} has {} neurons, expected {}",
                    p.neuron_responses.len(),
                    self.n_neurons
                )));
            }
            if p.neuron_responses
                .iter()
                .flatten()
                .any(|t| !t.is_finite() || *t < 0.0)
            {
                return Err(RecordingError::Invalid(format!(
                    "presentation {k} has a negative or non-finite spike time"
                )));
            }
        }
        Ok(())
    }
}

/// Half-open time window [start_ms, end_ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBin {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl TimeBin {
    pub fn new(start_ms: f64, end_ms: f64) -> Result<Self> {
        if !(start_ms.is_finite() && end_ms.is_finite() && end_ms > start_ms) {
            return Err(RecordingError::BadRange {
                start: start_ms,
                end: end_ms,
                width: end_ms - start_ms,
            });
        }
        Ok(Self { start_ms, end_ms })
    }

    pub fn width_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start_ms <= t && t < self.end_ms
    }

    /// Spikes in the window converted to spikes/s.
    pub fn rate(&self, spikes: &[f64]) -> f64 {
        let count = spikes.iter().filter(|&&t| self.contains(t)).count();
        count as f64 * 1000.0 / self.width_ms()
    }
}

impl fmt::Display for TimeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms-{}ms", self.start_ms, self.end_ms)
    }
}

/// Contiguous bins of `width_ms` covering [start_ms, end_ms).
pub fn make_bins(start_ms: f64, end_ms: f64, width_ms: f64) -> Result<Vec<TimeBin>> {
    if !(width_ms > 0.0 && end_ms > start_ms && start_ms.is_finite() && end_ms.is_finite()) {
        return Err(RecordingError::BadRange {
            start: start_ms,
            end: end_ms,
            width: width_ms,
        });
    }
    let n = ((end_ms - start_ms) / width_ms).round();
    let tol = 1e-9 * end_ms.abs().max(1.0);
    if n < 1.0 || (start_ms + n * width_ms - end_ms).abs() > tol {
        return Err(RecordingError::NotMultiple);
    }
    let n = n as usize;
    Ok((0..n)
        .map(|i| TimeBin {
            start_ms: start_ms + i as f64 * width_ms,
            end_ms: if i + 1 == n {
                end_ms
            } else {
                start_ms + (i + 1) as f64 * width_ms
            },
        })
        .collect())
}

/// Per-presentation firing rates in each bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedResponses {
    pub bins: Vec<TimeBin>,
    /// One (n_bins, n_neurons) array of spikes/s per presentation, in set order.
    pub rates: Vec<Array2<f64>>,
}

pub fn bin_responses(
    set: &RecordingSet,
    start_ms: f64,
    end_ms: f64,
    width_ms: f64,
) -> Result<BinnedResponses> {
    let bins = make_bins(start_ms, end_ms, width_ms)?;
    let rates = set
        .presentations
        .iter()
        .map(|p| {
            let mut counts = Array2::<f64>::zeros((bins.len(), set.n_neurons));
            for (n, spikes) in p.neuron_responses.iter().enumerate() {
                for &t in spikes {
                    if let Some(b) = locate(&bins, t) {
                        counts[[b, n]] += 1.0;
                    }
                }
            }
            for (b, bin) in bins.iter().enumerate() {
                let scale = 1000.0 / bin.width_ms();
                counts.row_mut(b).mapv_inplace(|c| c * scale);
            }
            counts
        })
        .collect();
    Ok(BinnedResponses { bins, rates })
}

fn locate(bins: &[TimeBin], t: f64) -> Option<usize> {
    let first = bins.first()?;
    let last = bins.last()?;
    if t < first.start_ms || t >= last.end_ms {
        return None;
    }
    let width = first.width_ms();
    let mut i = (((t - first.start_ms) / width).floor() as usize).min(bins.len() - 1);
    while t < bins[i].start_ms && i > 0 {
        i -= 1;
    }
    while t >= bins[i].end_ms && i + 1 < bins.len() {
        i += 1;
    }
    Some(i)
}

/// Mean firing rate (spikes/s) at each fixation position for one image and bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialActivityMap {
    pub image_id: String,
    pub bin: TimeBin,
    /// (grid_rows, grid_cols, n_neurons)
    pub values: Array3<f64>,
}

impl SpatialActivityMap {
    /// Neuron `n`'s map flattened row-major over grid cells.
    pub fn neuron_vector(&self, n: usize) -> Vec<f64> {
        self.values
            .index_axis(ndarray::Axis(2), n)
            .iter()
            .copied()
            .collect()
    }

    pub fn n_neurons(&self) -> usize {
        self.values.shape()[2]
    }
}

/// One map per image (in `set.image_ids` order) averaging rates over
/// presentations at each fixation position.
pub fn build_spatial_maps(set: &RecordingSet, bin: TimeBin) -> Result<Vec<SpatialActivityMap>> {
    set.validate()?;
    let index: HashMap<&str, usize> = set
        .image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let shape = (set.grid_rows, set.grid_cols, set.n_neurons);
    let mut sums: Vec<Array3<f64>> = vec![Array3::zeros(shape); set.image_ids.len()];
    let mut counts: Vec<Array2<u32>> =
        vec![Array2::zeros((set.grid_rows, set.grid_cols)); set.image_ids.len()];
    for p in &set.presentations {
        let i = index[p.image_id.as_str()];
        let (r, c) = (p.fixation_row, p.fixation_col);
        counts[i][[r, c]] += 1;
        for (n, spikes) in p.neuron_responses.iter().enumerate() {
            sums[i][[r, c, n]] += bin.rate(spikes);
        }
    }
    let mut maps = Vec::with_capacity(set.image_ids.len());
    for ((image_id, mut values), count) in set.image_ids.iter().zip(sums).zip(counts) {
        for ((r, c), &k) in count.indexed_iter() {
            if k == 0 {
                return Err(RecordingError::MissingCell {
                    image_id: image_id.clone(),
                    row: r,
                    col: c,
                });
            }
            values
                .slice_mut(ndarray::s![r, c, ..])
                .mapv_inplace(|v| v / k as f64);
        }
        maps.push(SpatialActivityMap {
            image_id: image_id.clone(),
            bin,
            values,
        });
    }
    Ok(maps)
}

/// Ceilings for every (image, neuron) pair within one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCeilings {
    pub bin: TimeBin,
    pub image_ids: Vec<String>,
    /// `ceilings[image][neuron]`; `None` when every peer correlation is undefined.
    pub ceilings: Vec<Vec<Option<f64>>>,
    /// Joint mean over all defined (image, neuron) ceilings.
    pub mean: Option<f64>,
}

impl BinCeilings {
    pub fn image_ceilings(&self, image_id: &str) -> Option<&[Option<f64>]> {
        self.image_ids
            .iter()
            .position(|id| id == image_id)
            .map(|i| self.ceilings[i].as_slice())
    }

    /// Multiply every defined ceiling by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.ceilings {
            for c in row.iter_mut().flatten() {
                *c *= factor;
            }
        }
        out.mean = out.mean.map(|m| m * factor);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCeilingTable {
    pub n_neurons: usize,
    /// Ordered by bin start.
    pub bins: Vec<BinCeilings>,
}

impl NoiseCeilingTable {
    pub fn for_bin(&self, bin: &TimeBin) -> Option<&BinCeilings> {
        self.bins.iter().find(|b| b.bin == *bin)
    }
}

/// Full peer-correlation matrix for one image; entry (i, j) is shared by both neurons.
pub fn peer_correlations(map: &SpatialActivityMap) -> Vec<Vec<Option<f64>>> {
    let n = map.n_neurons();
    let vectors: Vec<Vec<f64>> = (0..n).map(|i| map.neuron_vector(i)).collect();
    let mut corr = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let r = spearman(&vectors[i], &vectors[j]).ok();
            corr[i][j] = r;
            corr[j][i] = r;
        }
    }
    corr
}

/// Each neuron's ceiling for an image is its best Spearman correlation with
/// any other neuron's map of that image.
pub fn noise_ceiling(maps: &[SpatialActivityMap]) -> Result<NoiseCeilingTable> {
    let first = maps.first().ok_or(RecordingError::NoBins)?;
    let n_neurons = first.n_neurons();
    if n_neurons < 2 {
        return Err(RecordingError::SingleNeuron);
    }
    if let Some(bad) = maps
        .iter()
        .find(|m| m.values.shape() != first.values.shape())
    {
        return Err(RecordingError::ShapeMismatch(format!(
            "{:?} vs {:?} (image {})",
            bad.values.shape(),
            first.values.shape(),
            bad.image_id
        )));
    }

    let mut groups: Vec<(TimeBin, Vec<&SpatialActivityMap>)> = Vec::new();
    for m in maps {
        match groups.iter_mut().find(|(b, _)| *b == m.bin) {
            Some((_, v)) => v.push(m),
            None => groups.push((m.bin, vec![m])),
        }
    }
    groups.sort_by(|a, b| a.0.start_ms.total_cmp(&b.0.start_ms));

    let bins = groups
        .into_iter()
        .map(|(bin, group)| {
            let ceilings: Vec<Vec<Option<f64>>> = group
                .par_iter()
                .map(|m| {
                    peer_correlations(m)
                        .into_iter()
                        .enumerate()
                        .map(|(i, row)| {
                            row.into_iter()
                                .enumerate()
                                .filter(|&(j, _)| j != i)
                                .filter_map(|(_, r)| r)
                                .max_by(f64::total_cmp)
                        })
                        .collect()
                })
                .collect();
            let defined: Vec<f64> = ceilings.iter().flatten().flatten().copied().collect();
            let mean = if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            };
            BinCeilings {
                bin,
                image_ids: group.iter().map(|m| m.image_id.clone()).collect(),
                ceilings,
                mean,
            }
        })
        .collect();
    Ok(NoiseCeilingTable { n_neurons, bins })
}

/// The bin with the highest mean ceiling; ties go to the earliest start.
pub fn select_best_bin(table: &NoiseCeilingTable) -> Result<TimeBin> {
    let mut best: Option<(TimeBin, f64)> = None;
    for b in &table.bins {
        let Some(mean) = b.mean else { continue };
        let better = match best {
            None => true,
            Some((bb, bm)) => mean > bm || (mean == bm && b.bin.start_ms < bb.start_ms),
        };
        if better {
            best = Some((b.bin, mean));
        }
    }
    best.map(|(b, _)| b).ok_or(RecordingError::NoBins)
}

/// Compute maps for each bin, their ceilings, and the best bin in one pass.
pub fn ceilings_over_bins(set: &RecordingSet, bins: &[TimeBin]) -> Result<NoiseCeilingTable> {
    let mut maps = Vec::new();
    for &bin in bins {
        maps.extend(build_spatial_maps(set, bin)?);
    }
    noise_ceiling(&maps)
}

// ---------------------------------------------------------------------------
// On-disk layout: an NPB1 (n_presentations, 3) table of (image index, row, col)
// plus a CSV sidecar of spikes: image_id,row,col,neuron,spike_time_ms with an
// optional trailing `presentation` column for repeated fixations.
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct SpikeRow {
    image_id: String,
    row: usize,
    col: usize,
    neuron: usize,
    spike_time_ms: f64,
    #[serde(default)]
    presentation: Option<usize>,
}

fn needs_presentation_column(set: &RecordingSet) -> bool {
    let mut seen = std::collections::HashSet::new();
    set.presentations
        .iter()
        .any(|p| !seen.insert((p.image_id.as_str(), p.fixation_row, p.fixation_col)))
}

/// Write the presentation table and spike sidecar under `dir` and register
/// the recording in `manifest`. File names are derived from `name`.
pub fn write_recording(
    manifest: &mut DatasetManifest,
    set: &RecordingSet,
    name: &str,
) -> Result<()> {
    set.validate()?;
    let dir = manifest.root.clone();
    let table_rel = format!("{name}.presentations.npb");
    let csv_rel = format!("{name}.spikes.csv");

    let image_index: HashMap<&str, usize> = set
        .image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let table = Array2::from_shape_fn((set.presentations.len(), 3), |(k, f)| {
        let p = &set.presentations[k];
        match f {
            0 => image_index[p.image_id.as_str()] as f32,
            1 => p.fixation_row as f32,
            _ => p.fixation_col as f32,
        }
    });
    tensorio::write_tensor(dir.join(&table_rel), &table.into_dyn().view())?;

    let with_presentation = needs_presentation_column(set);
    let csv_path = dir.join(&csv_rel);
    let io = |e: csv::Error| RecordingError::Sidecar {
        path: csv_rel.clone(),
        line: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(io)?;
    let mut header = vec!["image_id", "row", "col", "neuron", "spike_time_ms"];
    if with_presentation {
        header.push("presentation");
    }
    w.write_record(&header).map_err(io)?;
    for (k, p) in set.presentations.iter().enumerate() {
        for (n, spikes) in p.neuron_responses.iter().enumerate() {
            for t in spikes {
                let mut rec = vec![
                    p.image_id.clone(),
                    p.fixation_row.to_string(),
                    p.fixation_col.to_string(),
                    n.to_string(),
                    t.to_string(),
                ];
                if with_presentation {
                    rec.push(k.to_string());
                }
                w.write_record(&rec).map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| {
        RecordingError::Io(TensorIoError::Io {
            path: csv_path.clone(),
            source: e,
        })
    })?;
    drop(w);

    let mut meta = BTreeMap::new();
    meta.insert("subject_id".into(), set.subject_id.clone());
    meta.insert("region".into(), set.region.to_string());
    meta.insert("grid_rows".into(), set.grid_rows.to_string());
    meta.insert("grid_cols".into(), set.grid_cols.to_string());
    meta.insert("n_neurons".into(), set.n_neurons.to_string());
    meta.insert(
        "image_ids".into(),
        serde_json::to_string(&set.image_ids).expect("strings serialize"),
    );
    meta.insert("spikes_csv".into(), csv_rel.clone());
    meta.insert(
        "spikes_checksum".into(),
        tensorio::file_checksum(&csv_path)?,
    );
    manifest.add_file(EntryKind::Recording, &table_rel, meta)?;
    Ok(())
}

fn parse_meta<T: std::str::FromStr>(entry: &ManifestEntry, key: &str) -> Result<T> {
    entry.meta(key)?.parse().map_err(|_| {
        RecordingError::Invalid(format!("metadata `{key}` of {} is malformed", entry.path))
    })
}

/// Reassemble a [`RecordingSet`] from a recording manifest entry.
pub fn load_recording(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<RecordingSet> {
    let grid_rows: usize = parse_meta(entry, "grid_rows")?;
    let grid_cols: usize = parse_meta(entry, "grid_cols")?;
    let n_neurons: usize = parse_meta(entry, "n_neurons")?;
    let region: Region = entry.meta("region")?.parse()?;
    let image_ids: Vec<String> = serde_json::from_str(entry.meta("image_ids")?)
        .map_err(|e| RecordingError::Invalid(format!("metadata `image_ids`: {e}")))?;

    let table = tensorio::read_tensor(manifest.resolve(entry))?;
    if table.ndim() != 2 || table.shape()[1] != 3 {
        return Err(RecordingError::Invalid(format!(
            "presentation table must be (n, 3), got {:?}",
            table.shape()
        )));
    }
    let table = table
        .into_dimensionality::<ndarray::Ix2>()
        .expect("ndim checked");
    let mut presentations = Vec::with_capacity(table.nrows());
    let mut by_key: HashMap<(String, usize, usize), usize> = HashMap::new();
    for (k, row) in table.outer_iter().enumerate() {
        let img = row[0] as usize;
        let image_id = image_ids
            .get(img)
            .ok_or_else(|| {
                RecordingError::Invalid(format!("presentation {k}: image index {img} out of range"))
            })?
            .clone();
        let (r, c) = (row[1] as usize, row[2] as usize);
        by_key.entry((image_id.clone(), r, c)).or_insert(k);
        presentations.push(PresentationRecord {
            image_id,
            fixation_row: r,
            fixation_col: c,
            neuron_responses: vec![Vec::new(); n_neurons],
        });
    }

    let csv_rel = entry.meta("spikes_csv")?;
    let csv_path = manifest.root.join(csv_rel);
    let expected = entry.meta("spikes_checksum")?;
    let actual = tensorio::file_checksum(&csv_path)?;
    if !actual.eq_ignore_ascii_case(expected) {
        return Err(RecordingError::Io(TensorIoError::Checksum {
            index: 0,
            path: csv_rel.to_string(),
            expected: expected.to_string(),
            actual,
        }));
    }
    read_spikes(&csv_path, csv_rel, &mut presentations, &by_key)?;

    let set = RecordingSet {
        subject_id: entry.meta("subject_id")?.to_string(),
        region,
        grid_rows,
        grid_cols,
        n_neurons,
        image_ids,
        presentations,
    };
    set.validate()?;
    Ok(set)
}

fn read_spikes(
    path: &Path,
    label: &str,
    presentations: &mut [PresentationRecord],
    by_key: &HashMap<(String, usize, usize), usize>,
) -> Result<()> {
    let err = |line: u64, message: String| RecordingError::Sidecar {
        path: label.to_string(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(0, e.to_string()))?;
    for (i, rec) in reader.deserialize::<SpikeRow>().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        let k = match rec.presentation {
            Some(k) => k,
            None => *by_key
                .get(&(rec.image_id.clone(), rec.row, rec.col))
                .ok_or_else(|| err(line, "no matching presentation".into()))?,
        };
        let p = presentations
            .get_mut(k)
            .ok_or_else(|| err(line, format!("presentation {k} out of range")))?;
        if p.image_id != rec.image_id || p.fixation_row != rec.row || p.fixation_col != rec.col {
            return Err(err(line, format!("row disagrees with presentation {k}")));
        }
        let slot = p
            .neuron_responses
            .get_mut(rec.neuron)
            .ok_or_else(|| err(line, format!("neuron {} out of range", rec.neuron)))?;
        slot.push(rec.spike_time_ms);
    }
    Ok(())
}

/// Mean ceiling per bin, in bin order; handy for reports.
pub fn mean_ceilings(table: &NoiseCeilingTable) -> Vec<(TimeBin, Option<f64>)> {
    table.bins.iter().map(|b| (b.bin, b.mean)).collect()
}

/// Median over defined ceilings; used in ceiling reports.
pub fn median_ceiling(bin: &BinCeilings) -> Option<f64> {
    let v: Vec<f64> = bin.ceilings.iter().flatten().flatten().copied().collect();
    stats::median(&v)
}
