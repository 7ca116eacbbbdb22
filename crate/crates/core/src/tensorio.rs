//! NPB1 tensor container, dataset manifests and validated ingestion.
//!
//! An NPB1 file is laid out as:
//!
//! ```text
//! [0..4)   b"NPB1"
//! [4]      dtype code (1 = f32 little-endian)
//! [5]      ndim (1..=4)
//! [6..)    ndim x u64 little-endian dims
//! payload  row-major (last axis fastest) little-endian elements
//! ```
//!
//! Manifests are JSON documents listing files by kind together with their
//! SHA-256 digest. Paths inside a manifest are relative to the manifest file.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"NPB1";
pub const DTYPE_F32: u8 = 1;
pub const MAX_NDIM: usize = 4;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("ndim {0} outside supported range 1..=4")]
    BadRank(usize),
    #[error("unrecognized format: bad magic {0:?}")]
    UnrecognizedFormat([u8; 4]),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    #[error("payload length mismatch: header declares {expected} bytes, found {actual}")]
    PayloadLengthMismatch { expected: u64, actual: u64 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("checksum mismatch for entry {index} ({path}): expected {expected}, got {actual}")]
    Checksum {
        index: usize,
        path: String,
        expected: String,
        actual: String,
    },
    #[error("missing file for manifest entry {index}: {path}")]
    MissingFile { index: usize, path: PathBuf },
    #[error("invalid tensor for {context}: {message}")]
    Shape { context: String, message: String },
    #[error("missing metadata key `{key}` in {context}")]
    MissingMetadata { key: String, context: String },
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Length in bytes of the header for a tensor of the given rank.
pub fn header_len(ndim: usize) -> usize {
    6 + 8 * ndim
}

/// Serialize a tensor into NPB1 bytes.
pub fn encode_tensor(tensor: &ArrayViewD<'_, f32>) -> Result<Vec<u8>> {
    let ndim = tensor.ndim();
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(TensorIoError::BadRank(ndim));
    }
    let mut out = Vec::with_capacity(header_len(ndim) + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(ndim as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    // `iter` walks in logical row-major order regardless of memory layout.
    for (index, v) in tensor.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorIoError::NonFinite { index });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse NPB1 bytes.
pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f32>> {
    if bytes.len() < 6 {
        return Err(TensorIoError::TruncatedHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("slice of len 4");
    if &magic != MAGIC {
        return Err(TensorIoError::UnrecognizedFormat(magic));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(TensorIoError::UnsupportedDtype(bytes[4]));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(TensorIoError::BadRank(ndim));
    }
    let hlen = header_len(ndim);
    if bytes.len() < hlen {
        return Err(TensorIoError::TruncatedHeader(bytes.len()));
    }
    let dims: Vec<u64> = bytes[6..hlen]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of len 8")))
        .collect();
    let actual = (bytes.len() - hlen) as u64;
    let expected = dims
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d))
        .unwrap_or(u64::MAX);
    if expected != actual {
        return Err(TensorIoError::PayloadLengthMismatch { expected, actual });
    }
    let data: Vec<f32> = bytes[hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of len 4")))
        .collect();
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked against header"))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &ArrayViewD<'_, f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensor(&bytes)
}

/// Lower-case hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Activation,
    Recording,
    ImportanceMap,
    Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: EntryKind,
    pub path: String,
    pub checksum: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ManifestEntry {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TensorIoError::MissingMetadata {
                key: key.to_string(),
                context: format!("{:?} entry {}", self.kind, self.path),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directory the manifest was loaded from; entry paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Entries of one kind, in manifest order.
    pub fn entries_of(&self, kind: EntryKind) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    pub fn grouped(&self) -> BTreeMap<&'static str, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<&'static str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            let key = match e.kind {
                EntryKind::Activation => "activation",
                EntryKind::Recording => "recording",
                EntryKind::ImportanceMap => "importance_map",
                EntryKind::Scores => "scores",
            };
            out.entry(key).or_default().push(e);
        }
        out
    }

    /// Register a file already present under `root`, computing its checksum.
    pub fn add_file(
        &mut self,
        kind: EntryKind,
        rel_path: &str,
        metadata: BTreeMap<String, String>,
    ) -> Result<&ManifestEntry> {
        let checksum = file_checksum(self.root.join(rel_path))?;
        self.entries.push(ManifestEntry {
            kind,
            path: rel_path.to_string(),
            checksum,
            metadata,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Parse a manifest and verify every entry's checksum against the file bytes.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| TensorIoError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(TensorIoError::Manifest {
            path: path.to_path_buf(),
            message: format!("unsupported schema_version {}", manifest.schema_version),
        });
    }
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    for (index, entry) in manifest.entries.iter().enumerate() {
        let is_digest =
            entry.checksum.len() == 64 && entry.checksum.chars().all(|c| c.is_ascii_hexdigit());
        if !is_digest {
            return Err(TensorIoError::Manifest {
                path: path.to_path_buf(),
                message: format!("entry {index} checksum is not a 64-hex digest"),
            });
        }
        let file = manifest.resolve(entry);
        let bytes = fs::read(&file).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => TensorIoError::MissingFile {
                index,
                path: file.clone(),
            },
            _ => TensorIoError::Io {
                path: file.clone(),
                source: e,
            },
        })?;
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(&entry.checksum) {
            return Err(TensorIoError::Checksum {
                index,
                path: entry.path.clone(),
                expected: entry.checksum.clone(),
                actual,
            });
        }
    }
    Ok(manifest)
}

/// A model layer's feature map for one image, laid out (height, width, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub model_id: String,
    pub layer_id: String,
    pub image_id: String,
    pub data: Array3<f32>,
}

impl ActivationTensor {
    pub fn new(
        model_id: impl Into<String>,
        layer_id: impl Into<String>,
        image_id: impl Into<String>,
        data: Array3<f32>,
    ) -> Result<Self> {
        let t = Self {
            model_id: model_id.into(),
            layer_id: layer_id.into(),
            image_id: image_id.into(),
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let context = || format!("{}/{}/{}", self.model_id, self.layer_id, self.image_id);
        if self.data.shape().contains(&0) {
            return Err(TensorIoError::Shape {
                context: context(),
                message: format!("empty axis in shape {:?}", self.data.shape()),
            });
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorIoError::NonFinite { index });
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Load every activation entry of the manifest. Metadata keys `model_id`,
/// `layer_id` and `image_id` are required.
pub fn load_activations(manifest: &DatasetManifest) -> Result<Vec<ActivationTensor>> {
    manifest
        .entries_of(EntryKind::Activation)
        .map(|entry| {
            let arr = read_tensor(manifest.resolve(entry))?;
            let arr =
                arr.into_dimensionality::<ndarray::Ix3>()
                    .map_err(|e| TensorIoError::Shape {
                        context: entry.path.clone(),
                        message: format!("activation must be 3-axis: {e}"),
                    })?;
            ActivationTensor::new(
                entry.meta("model_id")?,
                entry.meta("layer_id")?,
                entry.meta("image_id")?,
                arr,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD};
    use proptest::prelude::*;

    #[test]
    fn minimal_tensor_layout() {
        let t = arr1(&[0.0f32]).into_dyn();
        let bytes = encode_tensor(&t.view()).unwrap();
        assert_eq!(bytes.len(), 14 + 4);
        assert_eq!(&bytes[0..4], b"NPB1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 1);
        assert_eq!(&bytes[14..], &[0, 0, 0, 0]);
    }

    #[test]
    fn two_by_three_dims_and_payload() {
        let t = arr2(&[[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn();
        let bytes = encode_tensor(&t.view()).unwrap();
        assert_eq!(bytes[5], 2);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 3);
        assert_eq!(bytes.len() - header_len(2), 24);
        // last axis fastest
        assert_eq!(f32::from_le_bytes(bytes[22..26].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[26..30].try_into().unwrap()), 2.0);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn non_contiguous_views_serialize_in_logical_order() {
        let t = arr2(&[[1.0f32, 2.0], [3.0, 4.0]]);
        let tt = t.t().into_dyn();
        let back = decode_tensor(&encode_tensor(&tt).unwrap()).unwrap();
        assert_eq!(back, arr2(&[[1.0f32, 3.0], [2.0, 4.0]]).into_dyn());
    }

    #[test]
    fn rejects_nan() {
        let t = arr1(&[1.0f32, f32::NAN]).into_dyn();
        let err = encode_tensor(&t.view()).unwrap_err();
        assert!(err.to_string().contains("non-finite value"));
    }

    #[test]
    fn rejects_bad_rank() {
        let t = ArrayD::<f32>::zeros(IxDyn(&[1, 1, 1, 1, 1]));
        assert!(matches!(
            encode_tensor(&t.view()),
            Err(TensorIoError::BadRank(5))
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_tensor(&arr1(&[1.0f32]).into_dyn().view()).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(err.to_string().contains("unrecognized format"));
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = encode_tensor(&arr1(&[1.0f32]).into_dyn().view()).unwrap();
        bytes[4] = 7;
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported dtype"));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"NPB1");
        bytes.push(1);
        bytes.push(1);
        bytes.extend_from_slice(&10u64.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 4]);
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"));
    }

    #[test]
    fn io_error_names_path() {
        let err = read_tensor("/nonexistent/dir/x.npb").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.npb"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.npb");
        let t = arr2(&[[1.5f32, -2.0, 3.25], [0.0, 5.0, 6.0]]).into_dyn();
        write_tensor(&p, &t.view()).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    fn write_entry(dir: &Path, name: &str, bytes: &[u8]) {
        fs::write(dir.join(name), bytes).unwrap();
    }

    #[test]
    fn manifest_happy_path_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path());
        for name in ["b.npb", "a.npb", "c.npb"] {
            write_entry(dir.path(), name, name.as_bytes());
            let kind = if name == "c.npb" {
                EntryKind::Recording
            } else {
                EntryKind::Activation
            };
            m.add_file(kind, name, BTreeMap::new()).unwrap();
        }
        let mp = dir.path().join("manifest.json");
        m.save(&mp).unwrap();
        let loaded = load_manifest(&mp).unwrap();
        let paths: Vec<_> = loaded.entries.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["b.npb", "a.npb", "c.npb"]);
        let acts: Vec<_> = loaded
            .entries_of(EntryKind::Activation)
            .map(|e| e.path.as_str())
            .collect();
        assert_eq!(acts, ["b.npb", "a.npb"]);
        assert_eq!(loaded.grouped()["recording"].len(), 1);
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path());
        write_entry(dir.path(), "act.npb", b"original");
        m.add_file(EntryKind::Activation, "act.npb", BTreeMap::new())
            .unwrap();
        let mp = dir.path().join("manifest.json");
        m.save(&mp).unwrap();
        write_entry(dir.path(), "act.npb", b"tampered");
        let err = load_manifest(&mp).unwrap_err();
        assert!(matches!(err, TensorIoError::Checksum { index: 0, .. }));
        assert!(err.to_string().contains("act.npb"));
    }

    #[test]
    fn manifest_missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("manifest.json");
        let text = format!(
            r#"{{"schema_version":1,"entries":[{{"kind":"activation","path":"gone.npb","checksum":"{}","metadata":{{}}}}]}}"#,
            "0".repeat(64)
        );
        fs::write(&mp, text).unwrap();
        let err = load_manifest(&mp).unwrap_err();
        assert!(err.to_string().contains("gone.npb"));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("manifest.json");
        fs::write(&mp, r#"{"schema_version":1,"entries":[]}"#).unwrap();
        assert!(load_manifest(&mp).unwrap().entries.is_empty());
    }

    #[test]
    fn activation_requires_finite_nonempty() {
        let mut data = Array3::<f32>::zeros((2, 2, 1));
        assert!(ActivationTensor::new("m", "l", "i", data.clone()).is_ok());
        data[[0, 1, 0]] = f32::INFINITY;
        assert!(ActivationTensor::new("m", "l", "i", data).is_err());
        assert!(ActivationTensor::new("m", "l", "i", Array3::zeros((0, 2, 1))).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise_identity(
            shape in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut state = seed;
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let bits = (state >> 32) as u32;
                    let v = f32::from_bits(bits);
                    if v.is_finite() { v } else { 0.5 }
                })
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap();
            let bytes = encode_tensor(&t.view()).unwrap();
            prop_assert_eq!(bytes.len(), header_len(shape.len()) + 4 * n);
            let back = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.iter().zip(t.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
