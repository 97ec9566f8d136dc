//! Loading, framing, labeling, splitting, and persisting IQ recordings.
//!
//! Everything downstream of this module operates on uniform 2x128 frames:
//! row 0 carries the in-phase samples, row 1 the quadrature samples. Raw
//! captures live on disk as interleaved little-endian IEEE-754 binary32
//! pairs (I then Q), the common SDR raw-IQ convention, with a JSON sidecar
//! `<name>.meta.json` for metadata and a JSON manifest listing the files of
//! a dataset.

use std::collections::BTreeMap;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;

/// Canonical frame length in complex samples.
pub const FRAME_LEN: usize = 128;
/// A frame has one row of I samples and one row of Q samples.
pub const FRAME_CHANNELS: usize = 2;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// One contiguous complex baseband capture from a single transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct IQRecording {
    pub device_id: u32,
    pub domain_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<Complex64>,
    pub metadata: BTreeMap<String, String>,
}

impl IQRecording {
    pub fn new(
        device_id: u32,
        domain_id: impl Into<String>,
        sample_rate_hz: f64,
        samples: Vec<Complex64>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("recording has no samples".into()));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(Self {
            device_id,
            domain_id: domain_id.into(),
            sample_rate_hz,
            samples,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A 2xL real-valued network input (row 0 = I, row 1 = Q) with its labels.
///
/// The canonical width is [`FRAME_LEN`] = 128 columns; the framing helpers
/// accept other widths for experimentation but the embedding network only
/// consumes 2x128 inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameExample {
    data: Vec<f64>,
    cols: usize,
    pub device_id: u32,
    pub domain_id: String,
}

impl FrameExample {
    /// Build a frame from separate I and Q rows of equal length.
    pub fn from_rows(
        i_row: &[f64],
        q_row: &[f64],
        device_id: u32,
        domain_id: impl Into<String>,
    ) -> Result<Self> {
        if i_row.len() != q_row.len() || i_row.is_empty() {
            return Err(Error::InvalidInput(format!(
                "frame rows must be nonempty and equal length (got {} and {})",
                i_row.len(),
                q_row.len()
            )));
        }
        if let Some(idx) = i_row
            .iter()
            .chain(q_row.iter())
            .position(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteSample {
                index: idx,
                context: "frame".into(),
            });
        }
        let mut data = Vec::with_capacity(2 * i_row.len());
        data.extend_from_slice(i_row);
        data.extend_from_slice(q_row);
        Ok(Self {
            cols: i_row.len(),
            data,
            device_id,
            domain_id: domain_id.into(),
        })
    }

    /// Build a frame from a window of complex samples.
    pub fn from_complex(
        window: &[Complex64],
        device_id: u32,
        domain_id: impl Into<String>,
    ) -> Result<Self> {
        let i_row: Vec<f64> = window.iter().map(|z| z.re).collect();
        let q_row: Vec<f64> = window.iter().map(|z| z.im).collect();
        Self::from_rows(&i_row, &q_row, device_id, domain_id)
    }

    /// Number of columns (complex samples) in the frame.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// In-phase row.
    pub fn i_row(&self) -> &[f64] {
        &self.data[..self.cols]
    }

    /// Quadrature row.
    pub fn q_row(&self) -> &[f64] {
        &self.data[self.cols..]
    }

    /// Row-major view of the 2xL matrix (I row, then Q row).
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Entry at (channel, column); channel 0 = I, 1 = Q.
    pub fn get(&self, channel: usize, col: usize) -> f64 {
        self.data[channel * self.cols + col]
    }

    /// Root-mean-square over all 2·L entries.
    pub fn rms(&self) -> f64 {
        let sum_sq: f64 = self.data.iter().map(|v| v * v).sum();
        (sum_sq / self.data.len() as f64).sqrt()
    }
}

/// Frame normalization applied before the network sees the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// The raw pipeline: frames are fed as captured.
    #[default]
    None,
    /// Scale both rows by 1/rms so every frame has unit power. An all-zero
    /// frame is returned unchanged.
    UnitPower,
}

/// A set of labeled frames from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub frames: Vec<FrameExample>,
    /// Sorted, distinct device ids present in `frames`.
    pub device_ids: Vec<u32>,
    pub domain_id: String,
}

impl LabeledDataset {
    /// Build a dataset, deriving the device set from the frames and
    /// validating label consistency.
    pub fn new(frames: Vec<FrameExample>, domain_id: impl Into<String>) -> Result<Self> {
        let domain_id = domain_id.into();
        if frames.is_empty() {
            return Err(Error::InvalidInput("dataset has no frames".into()));
        }
        let mut device_ids: Vec<u32> = frames.iter().map(|f| f.device_id).collect();
        device_ids.sort_unstable();
        device_ids.dedup();
        for f in &frames {
            if f.domain_id != domain_id {
                return Err(Error::InvalidInput(format!(
                    "frame from domain {} in dataset {}",
                    f.domain_id, domain_id
                )));
            }
        }
        Ok(Self {
            frames,
            device_ids,
            domain_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices grouped by device, in dataset order.
    pub fn indices_by_device(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            map.entry(f.device_id).or_default().push(i);
        }
        map
    }

    /// Frames of one device, in dataset order.
    pub fn frames_of(&self, device_id: u32) -> Vec<&FrameExample> {
        self.frames
            .iter()
            .filter(|f| f.device_id == device_id)
            .collect()
    }

    /// New dataset restricted to the given devices (order preserved).
    pub fn restrict_to(&self, devices: &[u32]) -> Result<Self> {
        let keep: Vec<FrameExample> = self
            .frames
            .iter()
            .filter(|f| devices.contains(&f.device_id))
            .cloned()
            .collect();
        Self::new(keep, self.domain_id.clone())
    }

    /// Apply a normalization mode to every frame.
    pub fn normalized(&self, mode: NormalizeMode) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| normalize_frame(f, mode))
            .collect();
        Self {
            frames,
            device_ids: self.device_ids.clone(),
            domain_id: self.domain_id.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Raw IQ files
// ---------------------------------------------------------------------------

/// Load a raw IQ capture: interleaved little-endian f32 pairs, I then Q.
pub fn load_raw_iq(
    path: impl AsRef<Path>,
    sample_rate_hz: f64,
    device_id: u32,
    domain_id: impl Into<String>,
) -> Result<IQRecording> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len == 0 {
        return Err(Error::EmptyRecording(path.to_path_buf()));
    }
    if len % 8 != 0 {
        return Err(Error::TruncatedRawIq {
            path: path.to_path_buf(),
            len,
        });
    }
    let mut reader = BufReader::new(file);
    let mut samples = Vec::with_capacity((len / 8) as usize);
    let mut buf = [0u8; 8];
    let mut index = 0usize;
    loop {
        match reader.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let i = f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64;
        let q = f32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as f64;
        if !i.is_finite() || !q.is_finite() {
            return Err(Error::NonFiniteSample {
                index,
                context: path.display().to_string(),
            });
        }
        samples.push(Complex64::new(i, q));
        index += 1;
    }
    IQRecording::new(device_id, domain_id, sample_rate_hz, samples)
}

/// Save a recording as interleaved little-endian f32 pairs.
///
/// The companion sidecar is written separately by [`write_sidecar`].
pub fn save_raw_iq(rec: &IQRecording, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(rec.samples.len() * 8);
    for (index, z) in rec.samples.iter().enumerate() {
        if !z.re.is_finite() || !z.im.is_finite() {
            return Err(Error::NonFiniteSample {
                index,
                context: "recording".into(),
            });
        }
        bytes.extend_from_slice(&(z.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Sidecar metadata stored next to each raw IQ file as `<name>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub device_id: u32,
    pub domain_id: String,
    pub sample_rate_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_frequency_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

/// Path of the sidecar for a raw IQ file: `<name>.meta.json`.
pub fn sidecar_path(iq_path: &Path) -> PathBuf {
    let mut name = iq_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    iq_path.with_file_name(name)
}

pub fn write_sidecar(iq_path: &Path, meta: &RecordingMeta) -> Result<()> {
    let path = sidecar_path(iq_path);
    let json = serde_json::to_vec_pretty(meta).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, &json)
}

pub fn read_sidecar(iq_path: &Path) -> Result<RecordingMeta> {
    let path = sidecar_path(iq_path);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(&path, e))
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path of the raw IQ file, relative to the manifest's directory.
    pub path: String,
    pub device_id: u32,
    pub domain_id: String,
}

/// Write a dataset manifest (JSON list of entries).
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec_pretty(entries).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &json)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
}

/// Load every recording named by a manifest, frame it, and assemble a
/// [`LabeledDataset`]. Sample rates come from the sidecars.
pub fn load_dataset_from_manifest(
    manifest_path: impl AsRef<Path>,
    frame_len: usize,
    stride: usize,
) -> Result<LabeledDataset> {
    let manifest_path = manifest_path.as_ref();
    let entries = read_manifest(manifest_path)?;
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "manifest {} lists no recordings",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let domain_id = entries[0].domain_id.clone();
    let mut frames = Vec::new();
    for entry in &entries {
        let iq_path = base.join(&entry.path);
        let meta = read_sidecar(&iq_path)?;
        let rec = load_raw_iq(&iq_path, meta.sample_rate_hz, entry.device_id, &entry.domain_id)?;
        frames.extend(frame_recording(&rec, frame_len, stride)?);
    }
    LabeledDataset::new(frames, domain_id)
}

// ---------------------------------------------------------------------------
// Framing, splitting, normalization
// ---------------------------------------------------------------------------

/// Cut a recording into consecutive windows of `frame_len` samples taken at
/// offsets 0, stride, 2·stride, ...; a trailing partial window is discarded.
pub fn frame_recording(
    rec: &IQRecording,
    frame_len: usize,
    stride: usize,
) -> Result<Vec<FrameExample>> {
    if frame_len == 0 || stride == 0 {
        return Err(Error::InvalidInput(
            "frame_len and stride must be positive".into(),
        ));
    }
    if rec.len() < frame_len {
        return Err(Error::InvalidInput(format!(
            "recording of {} samples is shorter than frame_len {}",
            rec.len(),
            frame_len
        )));
    }
    let count = (rec.len() - frame_len) / stride + 1;
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride;
        frames.push(FrameExample::from_complex(
            &rec.samples[start..start + frame_len],
            rec.device_id,
            rec.domain_id.clone(),
        )?);
    }
    Ok(frames)
}

/// How [`split_dataset`] assigns frames to the train and test partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Per device, the first `train_fraction` of frames (in dataset order)
    /// go to train. Adjacent RF frames are correlated, so contiguous splits
    /// avoid leakage between the partitions; this is the default.
    Contiguous,
    /// Seeded per-device random assignment.
    Random { seed: u64 },
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Contiguous
    }
}

/// Per-device stratified split into disjoint train and test datasets whose
/// union is the input. Every device must have at least two frames.
pub fn split_dataset(
    ds: &LabeledDataset,
    train_fraction: f64,
    mode: SplitMode,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let by_device = ds.indices_by_device();
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (&device_id, indices) in &by_device {
        let n = indices.len();
        if n < 2 {
            return Err(Error::Device {
                device_id,
                msg: format!("needs at least 2 frames to split, has {n}"),
            });
        }
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
        match mode {
            SplitMode::Contiguous => {
                train_idx.extend_from_slice(&indices[..n_train]);
                test_idx.extend_from_slice(&indices[n_train..]);
            }
            SplitMode::Random { seed } => {
                let mut shuffled = indices.clone();
                let mut rng =
                    crate::seeds::rng_for_indexed(seed, "split", u64::from(device_id));
                shuffled.shuffle(&mut rng);
                let (tr, te) = shuffled.split_at(n_train);
                let mut tr = tr.to_vec();
                let mut te = te.to_vec();
                tr.sort_unstable();
                te.sort_unstable();
                train_idx.extend_from_slice(&tr);
                test_idx.extend_from_slice(&te);
            }
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| -> Result<LabeledDataset> {
        LabeledDataset::new(
            idx.iter().map(|&i| ds.frames[i].clone()).collect(),
            ds.domain_id.clone(),
        )
    };
    Ok((pick(&train_idx)?, pick(&test_idx)?))
}

/// Normalize one frame.
pub fn normalize_frame(frame: &FrameExample, mode: NormalizeMode) -> FrameExample {
    match mode {
        NormalizeMode::None => frame.clone(),
        NormalizeMode::UnitPower => {
            let rms = frame.rms();
            if rms == 0.0 {
                return frame.clone();
            }
            let scale = 1.0 / rms;
            let i_row: Vec<f64> = frame.i_row().iter().map(|v| v * scale).collect();
            let q_row: Vec<f64> = frame.q_row().iter().map(|v| v * scale).collect();
            FrameExample::from_rows(&i_row, &q_row, frame.device_id, frame.domain_id.clone())
                .expect("scaling a finite frame keeps it finite")
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rec_of(samples: Vec<Complex64>) -> IQRecording {
        IQRecording::new(3, "dom", 1e6, samples).unwrap()
    }

    fn ramp(n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|k| Complex64::new(k as f64, -(k as f64)))
            .collect()
    }

    #[test]
    fn load_raw_iq_decodes_interleaved_pairs() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("two.iq");
        let mut bytes = Vec::new();
        for v in [1.0f32, 0.0, 0.0, -1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let rec = load_raw_iq(&path, 1e6, 0, "d").unwrap();
        assert_eq!(rec.samples.len(), 2);
        assert_eq!(rec.samples[0], Complex64::new(1.0, 0.0));
        assert_eq!(rec.samples[1], Complex64::new(0.0, -1.0));
    }

    #[test]
    fn load_raw_iq_rejects_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.iq");
        std::fs::write(&path, b"").unwrap();
        let err = load_raw_iq(&path, 1e6, 0, "d").unwrap_err();
        assert!(matches!(err, Error::EmptyRecording(_)), "{err}");
    }

    #[test]
    fn load_raw_iq_rejects_truncated_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.iq");
        std::fs::write(&path, &[0u8; 12]).unwrap();
        let err = load_raw_iq(&path, 1e6, 0, "d").unwrap_err();
        assert!(matches!(err, Error::TruncatedRawIq { len: 12, .. }), "{err}");
    }

    #[test]
    fn load_raw_iq_rejects_non_finite_with_index() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.iq");
        let mut bytes = Vec::new();
        for v in [1.0f32, 1.0, f32::NAN, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        match load_raw_iq(&path, 1e6, 0, "d").unwrap_err() {
            Error::NonFiniteSample { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn raw_iq_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.iq");
        // f32-representable values survive the f64 -> f32 -> f64 trip exactly.
        let rec = rec_of(vec![
            Complex64::new(0.5, -0.25),
            Complex64::new(1.0, 2.0),
            Complex64::new(-3.5, 0.125),
        ]);
        save_raw_iq(&rec, &path).unwrap();
        let back = load_raw_iq(&path, rec.sample_rate_hz, rec.device_id, "dom").unwrap();
        assert_eq!(back.samples, rec.samples);
    }

    #[test]
    fn twenty_second_capture_sample_count() {
        // 20 s at 1 MS/s is 20M samples; checked by arithmetic, not by
        // allocating 160 MB in a unit test.
        let seconds = 20.0f64;
        let rate = 1e6;
        assert_eq!((seconds * rate) as u64, 20_000_000);
    }

    #[test]
    fn frame_recording_counts() {
        let rec = rec_of(ramp(256));
        assert_eq!(frame_recording(&rec, 128, 128).unwrap().len(), 2);

        let rec = rec_of(ramp(300));
        let frames = frame_recording(&rec, 128, 128).unwrap();
        assert_eq!(frames.len(), 2); // 44 samples discarded

        let rec = rec_of(ramp(127));
        assert!(frame_recording(&rec, 128, 128).is_err());
    }

    #[test]
    fn transmission_frame_count_at_testbed_scale() {
        // One 20M-sample transmission framed disjointly at 128.
        let samples: u64 = 20_000_000;
        assert_eq!((samples - 128) / 128 + 1, 156_250);
    }

    #[test]
    fn framing_preserves_used_prefix() {
        let rec = rec_of(ramp(300));
        let frames = frame_recording(&rec, 128, 128).unwrap();
        let mut rebuilt = Vec::new();
        for f in &frames {
            for c in 0..f.cols() {
                rebuilt.push(Complex64::new(f.get(0, c), f.get(1, c)));
            }
        }
        assert_eq!(&rebuilt[..], &rec.samples[..256]);
    }

    #[test]
    fn frames_inherit_labels() {
        let rec = rec_of(ramp(256));
        let frames = frame_recording(&rec, 128, 128).unwrap();
        assert!(frames.iter().all(|f| f.device_id == 3 && f.domain_id == "dom"));
    }

    fn tiny_dataset(frames_per_device: usize, devices: &[u32]) -> LabeledDataset {
        let mut frames = Vec::new();
        for &d in devices {
            for k in 0..frames_per_device {
                let i: Vec<f64> = (0..FRAME_LEN).map(|c| (d as f64) + (k * c) as f64 * 1e-3).collect();
                let q = vec![0.0; FRAME_LEN];
                frames.push(FrameExample::from_rows(&i, &q, d, "dom").unwrap());
            }
        }
        LabeledDataset::new(frames, "dom").unwrap()
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = tiny_dataset(100, &[0, 1, 2]);
        let (train, test) = split_dataset(&ds, 0.75, SplitMode::Contiguous).unwrap();
        for d in [0u32, 1, 2] {
            assert_eq!(train.frames_of(d).len(), 75);
            assert_eq!(test.frames_of(d).len(), 25);
        }
        assert_eq!(train.len() + test.len(), ds.len());
    }

    #[test]
    fn split_two_frames_half() {
        let ds = tiny_dataset(2, &[7]);
        let (train, test) = split_dataset(&ds, 0.5, SplitMode::Contiguous).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn split_rejects_single_frame_device() {
        let ds = tiny_dataset(1, &[0]);
        assert!(matches!(
            split_dataset(&ds, 0.5, SplitMode::Contiguous),
            Err(Error::Device { device_id: 0, .. })
        ));
    }

    #[test]
    fn random_split_is_seed_deterministic() {
        let ds = tiny_dataset(20, &[0, 1]);
        let (a_train, a_test) = split_dataset(&ds, 0.75, SplitMode::Random { seed: 9 }).unwrap();
        let (b_train, b_test) = split_dataset(&ds, 0.75, SplitMode::Random { seed: 9 }).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let (c_train, _) = split_dataset(&ds, 0.75, SplitMode::Random { seed: 10 }).unwrap();
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn normalize_none_is_identity() {
        let f = FrameExample::from_rows(&[1.0; FRAME_LEN], &[2.0; FRAME_LEN], 0, "d").unwrap();
        assert_eq!(normalize_frame(&f, NormalizeMode::None), f);
    }

    #[test]
    fn normalize_zero_frame_unchanged() {
        let f = FrameExample::from_rows(&[0.0; FRAME_LEN], &[0.0; FRAME_LEN], 0, "d").unwrap();
        assert_eq!(normalize_frame(&f, NormalizeMode::UnitPower), f);
    }

    #[test]
    fn normalize_halves_rms_two_frame() {
        // All entries 2.0 -> rms 2.0 -> every entry halved.
        let f = FrameExample::from_rows(&[2.0; FRAME_LEN], &[2.0; FRAME_LEN], 0, "d").unwrap();
        let n = normalize_frame(&f, NormalizeMode::UnitPower);
        assert!(n.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn normalize_unit_power_hits_unit_rms() {
        let i: Vec<f64> = (0..FRAME_LEN).map(|c| (c as f64).sin() * 3.0 + 0.1).collect();
        let q: Vec<f64> = (0..FRAME_LEN).map(|c| (c as f64).cos() * 0.5).collect();
        let f = FrameExample::from_rows(&i, &q, 0, "d").unwrap();
        let n = normalize_frame(&f, NormalizeMode::UnitPower);
        assert!((n.rms() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempdir().unwrap();
        let iq_path = dir.path().join("dev0.iq");
        let meta = RecordingMeta {
            device_id: 0,
            domain_id: "dom".into(),
            sample_rate_hz: 1e6,
            center_frequency_hz: Some(915e6),
            lora_config: Some(serde_json::json!({"spreading_factor": 7})),
            notes: None,
        };
        write_sidecar(&iq_path, &meta).unwrap();
        assert_eq!(read_sidecar(&iq_path).unwrap(), meta);
    }

    #[test]
    fn manifest_dataset_round_trip() {
        let dir = tempdir().unwrap();
        let mut entries = Vec::new();
        for d in 0..2u32 {
            let rec = IQRecording::new(d, "dom", 1e6, ramp(256)).unwrap();
            let name = format!("dev{d}.iq");
            let path = dir.path().join(&name);
            save_raw_iq(&rec, &path).unwrap();
            write_sidecar(
                &path,
                &RecordingMeta {
                    device_id: d,
                    domain_id: "dom".into(),
                    sample_rate_hz: 1e6,
                    center_frequency_hz: None,
                    lora_config: None,
                    notes: None,
                },
            )
            .unwrap();
            entries.push(ManifestEntry {
                path: name,
                device_id: d,
                domain_id: "dom".into(),
            });
        }
        let manifest = dir.path().join("manifest.json");
        write_manifest(&manifest, &entries).unwrap();
        let ds = load_dataset_from_manifest(&manifest, 128, 128).unwrap();
        assert_eq!(ds.device_ids, vec![0, 1]);
        assert_eq!(ds.len(), 4); // 2 devices x 2 frames
    }
}
