//! Synthetic datasets with a known feature-to-response mapping.
//!
//! Each image gets a grid of random feature vectors, one per fixation cell.
//! Neuron responses are a nonnegative linear readout of those features plus
//! Gaussian noise, realized as Poisson spike trains. Neurons come in twins
//! that share a readout column, so a noiseless twin pair bounds each
//! neuron's ceiling.
//!
//! Random streams: every draw uses `ChaCha8Rng::seed_from_u64(seed)` with a
//! stream id chosen per purpose, see [`Stream`]. Per-image streams add the
//! image index, so images can be generated in any order or in parallel.
//!
//! Written datasets contain two models: `matched` (layer `l0` is an
//! independent draw, layer `l1` holds the true features) and `mismatched`
//! (layer `l0`, independent of the responses).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder_fit::PatchGrid;
use crate::harmonizer::{ImportanceMap, MapSource};
use crate::recordings::{self, PresentationRecord, RecordingSet, Region};
use crate::tensorio::{self, ActivationTensor, DatasetManifest, EntryKind};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] tensorio::TensorIoError),
    #[error(transparent)]
    Recording(#[from] recordings::RecordingError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const WINDOW_START_MS: f64 = 50.0;
pub const WINDOW_END_MS: f64 = 250.0;
const SUB_BIN_MS: f64 = 10.0;
/// Responses are shifted by this many standard deviations before rectification.
const RESPONSE_OFFSET: f64 = 3.0;

/// Stream ids for [`ChaCha8Rng::set_stream`].
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Readout = 1,
    TrueFeatures = 2,
    DecoyFeatures = 3,
    MismatchedFeatures = 4,
    /// plus image index
    ResponseNoise = 1 << 32,
    /// plus image index
    SpikeCounts = 2 << 32,
    /// plus image index
    SpikeTimes = 3 << 32,
}

pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Fixation grid; also the tiling of the activation maps.
    pub grid: PatchGrid,
    pub n_neurons: usize,
    pub n_images: usize,
    pub n_features: usize,
    /// (n_features, n_neurons), nonnegative. Drawn from the seed when absent.
    pub readout: Option<Array2<f64>>,
    /// Gaussian response noise in units of the response standard deviation.
    pub noise_std: f64,
    /// Peak firing rate (Hz) per unit of response.
    pub rate_scale: f64,
    /// Presentations per (image, fixation cell).
    pub repeats: usize,
    /// Activation pixels per grid cell along each axis.
    pub patch_px: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: PatchGrid::MONKEY2,
            n_neurons: 16,
            n_images: 14,
            n_features: 8,
            readout: None,
            noise_std: 0.0,
            rate_scale: 50.0,
            repeats: 1,
            patch_px: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be >= 0");
        }
        if self.n_neurons < 2 {
            return bad("need at least 2 neurons");
        }
        if self.n_images == 0 || self.n_features == 0 || self.repeats == 0 || self.patch_px == 0 {
            return bad("images, features, repeats and patch_px must be >= 1");
        }
        if !(self.rate_scale > 0.0) || !self.rate_scale.is_finite() {
            return bad("rate_scale must be > 0");
        }
        if let Some(r) = &self.readout {
            if r.dim() != (self.n_features, self.n_neurons) {
                return bad("readout shape must be (n_features, n_neurons)");
            }
            if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad("readout entries must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Everything [`generate`] produces, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub readout: Array2<f64>,
    /// Per image, (rows, cols, n_features).
    pub true_features: Vec<Array3<f32>>,
    /// Per image, noiseless responses (rows, cols, n_neurons) in response units.
    pub true_responses: Vec<Array3<f64>>,
    pub recording: RecordingSet,
    pub activations: Vec<ActivationTensor>,
    pub importance: Vec<LabeledMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMap {
    pub map: ImportanceMap,
    pub label: usize,
}

pub fn image_id(i: usize) -> String {
    format!("img{i:03}")
}

/// Twin readout: column pairs (0,1), (2,3), ... are identical. Columns are
/// scaled so that responses to uniform features have unit variance.
fn draw_readout(spec: &SyntheticSpec) -> Array2<f64> {
    let mut rng = rng_for(spec.seed, Stream::Readout, 0);
    let distinct = spec.n_neurons.div_ceil(2);
    let base = Array2::from_shape_fn((spec.n_features, distinct), |_| rng.random::<f64>() + 0.05);
    Array2::from_shape_fn((spec.n_features, spec.n_neurons), |(f, n)| base[[f, n / 2]])
}

fn normalized_readout(raw: &Array2<f64>) -> Array2<f64> {
    // Var(u . r) = |r|^2 / 12 for u ~ U[0, 1]^d
    let mut r = raw.clone();
    for mut col in r.axis_iter_mut(Axis(1)) {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v * 12f64.sqrt() / norm);
        }
    }
    r
}

fn draw_features(spec: &SyntheticSpec, stream: Stream) -> Vec<Array3<f32>> {
    let mut rng = rng_for(spec.seed, stream, 0);
    (0..spec.n_images)
        .map(|_| {
            Array3::from_shape_fn((spec.grid.rows, spec.grid.cols, spec.n_features), |_| {
                rng.random::<f64>() as f32
            })
        })
        .collect()
}

/// Rate multiplier over the response window, 0.5 at the edges and 1 in the middle.
pub fn envelope(t_ms: f64) -> f64 {
    let phase = (t_ms - WINDOW_START_MS) / (WINDOW_END_MS - WINDOW_START_MS);
    0.5 + 0.5 * (std::f64::consts::PI * phase).sin()
}

/// Poisson count by inverse CDF, so one uniform maps monotonically to a
/// count and runs that differ only in rate share their randomness.
fn poisson_quantile(lambda: f64, u: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0usize;
    while cdf < u && p > 0.0 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

fn spike_train<R: Rng>(counts: &mut R, times: &mut R, rate_hz: f64) -> Vec<f64> {
    let mut spikes = Vec::new();
    let mut t0 = WINDOW_START_MS;
    while t0 < WINDOW_END_MS {
        let lambda = rate_hz * envelope(t0 + SUB_BIN_MS / 2.0) * SUB_BIN_MS / 1000.0;
        let u: f64 = counts.random();
        let n = if lambda > 500.0 {
            Poisson::new(lambda)
                .expect("positive finite mean")
                .sample(counts) as usize
        } else {
            poisson_quantile(lambda, u)
        };
        let mut ts: Vec<f64> = (0..n)
            .map(|_| t0 + times.random::<f64>() * SUB_BIN_MS)
            .collect();
        ts.sort_by(f64::total_cmp);
        spikes.extend(ts);
        t0 += SUB_BIN_MS;
    }
    spikes
}

fn to_activation(
    model: &str,
    layer: &str,
    image: usize,
    features: &Array3<f32>,
    px: usize,
) -> ActivationTensor {
    let (rows, cols, c) = features.dim();
    let data = Array3::from_shape_fn((rows * px, cols * px, c), |(y, x, k)| {
        features[[y / px, x / px, k]]
    });
    ActivationTensor::new(model, layer, image_id(image), data).expect("finite features")
}

/// Toy rule on the channel-mean map: class 0 when the top-left third is
/// brighter than the bottom-right third, class 1 otherwise. The map of an
/// image marks the region that decided its class.
pub fn planted_saliency(input: &Array2<f64>) -> (usize, Array2<f64>) {
    let (h, w) = input.dim();
    let (bh, bw) = ((h / 3).max(1), (w / 3).max(1));
    let region = |r0: usize, c0: usize| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            if (r0..r0 + bh).contains(&r) && (c0..c0 + bw).contains(&c) {
                1.0
            } else {
                0.0
            }
        })
    };
    let regions = [region(0, 0), region(h - bh, w - bw)];
    let sums: Vec<f64> = regions.iter().map(|m| (m * input).sum()).collect();
    let label = usize::from(sums[1] > sums[0]);
    (label, regions[label].clone())
}

/// Channel mean of an activation map, the input fed to the toy network.
pub fn channel_mean(t: &ActivationTensor) -> Array2<f64> {
    t.data
        .mapv(f64::from)
        .mean_axis(Axis(2))
        .expect("channels >= 1")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let readout = normalized_readout(&spec.readout.clone().unwrap_or_else(|| draw_readout(spec)));
    let true_features = draw_features(spec, Stream::TrueFeatures);
    let decoy = draw_features(spec, Stream::DecoyFeatures);
    let mismatched = draw_features(spec, Stream::MismatchedFeatures);
    let (rows, cols) = (spec.grid.rows, spec.grid.cols);

    // centered responses: features enter at mean 0.5
    let true_responses: Vec<Array3<f64>> = true_features
        .iter()
        .map(|f| {
            let flat = f
                .mapv(|v| f64::from(v) - 0.5)
                .into_shape_with_order((rows * cols, spec.n_features))
                .expect("contiguous");
            flat.dot(&readout)
                .into_shape_with_order((rows, cols, spec.n_neurons))
                .expect("cell count")
        })
        .collect();

    let per_image: Vec<Vec<PresentationRecord>> = (0..spec.n_images)
        .into_par_iter()
        .map(|i| {
            let mut noise_rng = rng_for(spec.seed, Stream::ResponseNoise, i as u64);
            let mut count_rng = rng_for(spec.seed, Stream::SpikeCounts, i as u64);
            let mut time_rng = rng_for(spec.seed, Stream::SpikeTimes, i as u64);
            let mut out = Vec::with_capacity(rows * cols * spec.repeats);
            for _ in 0..spec.repeats {
                for r in 0..rows {
                    for c in 0..cols {
                        let neuron_responses = (0..spec.n_neurons)
                            .map(|n| {
                                let z: f64 = StandardNormal.sample(&mut noise_rng);
                                let drive = true_responses[i][[r, c, n]]
                                    + RESPONSE_OFFSET
                                    + spec.noise_std * z;
                                spike_train(
                                    &mut count_rng,
                                    &mut time_rng,
                                    spec.rate_scale * drive.max(0.0),
                                )
                            })
                            .collect();
                        out.push(PresentationRecord {
                            image_id: image_id(i),
                            fixation_row: r,
                            fixation_col: c,
                            neuron_responses,
                        });
                    }
                }
            }
            out
        })
        .collect();

    let recording = RecordingSet {
        subject_id: format!("synth-{}", spec.seed),
        region: Region::ML,
        grid_rows: rows,
        grid_cols: cols,
        n_neurons: spec.n_neurons,
        image_ids: (0..spec.n_images).map(image_id).collect(),
        presentations: per_image.into_iter().flatten().collect(),
    };
    recording.validate()?;

    let px = spec.patch_px;
    let mut activations = Vec::with_capacity(3 * spec.n_images);
    for i in 0..spec.n_images {
        activations.push(to_activation("matched", "l0", i, &decoy[i], px));
        activations.push(to_activation("matched", "l1", i, &true_features[i], px));
        activations.push(to_activation("mismatched", "l0", i, &mismatched[i], px));
    }
    let importance = activations
        .iter()
        .filter(|a| a.model_id == "matched" && a.layer_id == "l1")
        .map(|a| {
            let (label, values) = planted_saliency(&channel_mean(a));
            let map = ImportanceMap::new(MapSource::Human, a.image_id.clone(), values)
                .map_err(|e| SynthError::Spec(e.to_string()))?;
            Ok(LabeledMap { map, label })
        })
        .collect::<Result<_>>()?;

    Ok(SyntheticDataset {
        spec: spec.clone(),
        readout,
        true_features,
        true_responses,
        recording,
        activations,
        importance,
    })
}

/// Write every artifact under `dir` and save `dir/manifest.json`.
pub fn write_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<DatasetManifest> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    for sub in ["activations", "importance"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let mut manifest = DatasetManifest::new(dir);
    recordings::write_recording(&mut manifest, &ds.recording, "recording")?;
    for a in &ds.activations {
        let rel = format!(
            "activations/{}.{}.{}.npb",
            a.model_id, a.layer_id, a.image_id
        );
        tensorio::write_tensor(dir.join(&rel), &a.data.view().into_dyn())?;
        let meta = BTreeMap::from([
            ("model_id".to_string(), a.model_id.clone()),
            ("layer_id".to_string(), a.layer_id.clone()),
            ("image_id".to_string(), a.image_id.clone()),
        ]);
        manifest.add_file(EntryKind::Activation, &rel, meta)?;
    }
    for m in &ds.importance {
        let rel = format!("importance/{}.npb", m.map.image_id);
        let values = m.map.values.mapv(|v| v as f32);
        tensorio::write_tensor(dir.join(&rel), &values.view().into_dyn())?;
        let meta = BTreeMap::from([
            ("image_id".to_string(), m.map.image_id.clone()),
            ("label".to_string(), m.label.to_string()),
            ("source".to_string(), "human".to_string()),
        ]);
        manifest.add_file(EntryKind::ImportanceMap, &rel, meta)?;
    }
    let spec_rel = "synth_spec.json";
    let spec_text = serde_json::to_string_pretty(&ds.spec).expect("spec serializes");
    std::fs::write(dir.join(spec_rel), spec_text).map_err(io(&dir.join(spec_rel)))?;
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
