//! Per-device calibration: enroll each device by pushing a small labeled
//! sample through the frozen network, averaging the embeddings into a
//! centroid, and averaging the distances to that centroid into an
//! admit/reject radius.
//!
//! Calibration never touches network weights. Repeating it per domain and
//! merging the tables gives a device multiple (centroid, radius) pairs, one
//! per domain, with no cross-domain averaging.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::embed_net::{forward_batch, EmbeddingPoint, ForwardMode, Parameters};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::seeds;
use crate::signal_io::LabeledDataset;

/// One enrolled device in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceCalibration {
    pub device_id: u32,
    pub centroid: EmbeddingPoint,
    /// Mean Euclidean distance of the calibration embeddings to the
    /// centroid (or a quantile of those distances, if so requested).
    pub radius: f64,
    pub n_used: usize,
    pub domain_id: String,
}

/// All enrolled devices for one domain, tied to the model that embedded
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub model_version: String,
    pub domain_id: String,
    /// Sorted by ascending device_id; ids distinct.
    pub entries: Vec<DeviceCalibration>,
}

/// Calibration tables for the same devices across several domains. Each
/// (device, domain) pair keeps its own centroid and radius.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCalibration {
    pub tables: Vec<CalibrationTable>,
}

/// How the n enrollment examples are picked from a device's data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Selection {
    /// The first n in dataset order. Reproducible without extra state.
    FirstN,
    /// n drawn without replacement, seeded per device.
    Random { seed: u64 },
}

/// How the radius is derived from the n distances to the centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum RadiusRule {
    /// Arithmetic mean of the distances. The default.
    Mean,
    /// Nearest-rank quantile of the distances, q in (0, 1]. Mean radii can
    /// over-admit when the cluster has a heavy tail; a high quantile
    /// tightens nothing but documents the tail instead of the bulk.
    Quantile { q: f64 },
}

/// Full recipe for building one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    /// Enrollment examples per device.
    pub n: usize,
    pub selection: Selection,
    pub radius_rule: RadiusRule,
}

impl CalibrationSpec {
    /// The reference recipe: first n examples, mean-distance radius.
    pub fn first_n(n: usize) -> Self {
        Self {
            n,
            selection: Selection::FirstN,
            radius_rule: RadiusRule::Mean,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("calibration needs n >= 1".into()));
        }
        if let RadiusRule::Quantile { q } = self.radius_rule {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "quantile must be in (0, 1], got {q}"
                )));
            }
        }
        Ok(())
    }
}

/// Identity tag for the exact weights that produced a table: format version
/// plus an FNV-1a digest over the config and every tensor (running
/// statistics included, since they shape infer-mode embeddings).
pub fn model_version(params: &Parameters) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    eat(&config);
    let mut eat_f64s = |vals: &mut dyn Iterator<Item = &f64>| {
        for v in vals {
            let bits = v.to_bits().to_le_bytes();
            for &b in &bits {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    };
    for c in &params.convs {
        eat_f64s(&mut c.weight.iter());
        eat_f64s(&mut c.bias.iter());
    }
    for bn in &params.bns {
        eat_f64s(&mut bn.gamma.iter());
        eat_f64s(&mut bn.beta.iter());
        eat_f64s(&mut bn.running_mean.iter());
        eat_f64s(&mut bn.running_var.iter());
    }
    for fc in [&params.fc1, &params.fc2] {
        eat_f64s(&mut fc.weight.iter());
        eat_f64s(&mut fc.bias.iter());
    }
    format!("{}/{h:016x}", params.version)
}

fn radius_from_distances(distances: &[f64], rule: RadiusRule) -> f64 {
    match rule {
        RadiusRule::Mean => distances.iter().sum::<f64>() / distances.len() as f64,
        RadiusRule::Quantile { q } => {
            let mut sorted = distances.to_vec();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let rank = (q * sorted.len() as f64).ceil() as usize;
            sorted[rank.clamp(1, sorted.len()) - 1]
        }
    }
}

/// Enroll every device of `examples`: embed n frames per device in infer
/// mode, average them into the centroid, and turn the distances to the
/// centroid into the radius. Weights are read, never written.
pub fn calibrate(
    params: &Parameters,
    examples: &LabeledDataset,
    spec: &CalibrationSpec,
) -> Result<CalibrationTable> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(examples.device_ids.len());
    for (device_id, indices) in examples.indices_by_device() {
        if indices.len() < spec.n {
            return Err(Error::Device {
                device_id,
                msg: format!(
                    "has {} examples but calibration needs {}",
                    indices.len(),
                    spec.n
                ),
            });
        }
        let chosen: Vec<usize> = match spec.selection {
            Selection::FirstN => indices[..spec.n].to_vec(),
            Selection::Random { seed } => {
                let mut rng = seeds::rng_for_indexed(seed, "calibration", device_id as u64);
                let mut picks: Vec<usize> = sample(&mut rng, indices.len(), spec.n)
                    .into_iter()
                    .map(|i| indices[i])
                    .collect();
                picks.sort_unstable();
                picks
            }
        };
        let frames: Vec<_> = chosen.iter().map(|&i| &examples.frames[i]).collect();
        let (emb, _) = forward_batch(params, &frames, ForwardMode::Infer)?;
        let points: Vec<EmbeddingPoint> = emb
            .outer_iter()
            .map(|row| EmbeddingPoint(row.to_vec()))
            .collect();
        let centroid = EmbeddingPoint::mean(&points)?;
        let distances: Vec<f64> = points.iter().map(|p| p.distance(&centroid)).collect();
        entries.push(DeviceCalibration {
            device_id,
            centroid,
            radius: radius_from_distances(&distances, spec.radius_rule),
            n_used: spec.n,
            domain_id: examples.domain_id.clone(),
        });
    }
    if entries.is_empty() {
        return Err(Error::InvalidInput("no devices to calibrate".into()));
    }
    Ok(CalibrationTable {
        model_version: model_version(params),
        domain_id: examples.domain_id.clone(),
        entries,
    })
}

/// Bundle per-domain tables for the same device set into one container.
/// Nothing is averaged; every (device, domain) pair keeps its own entry.
pub fn merge_calibrations(tables: Vec<CalibrationTable>) -> Result<MultiCalibration> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidInput("no tables to merge".into()))?;
    let device_set: BTreeSet<u32> = first.entries.iter().map(|e| e.device_id).collect();
    let mut seen_domains = BTreeSet::new();
    for t in &tables {
        if t.model_version != first.model_version {
            return Err(Error::CalibrationMismatch(format!(
                "tables from different models: {} vs {}",
                first.model_version, t.model_version
            )));
        }
        let set: BTreeSet<u32> = t.entries.iter().map(|e| e.device_id).collect();
        if set != device_set {
            return Err(Error::InvalidInput(format!(
                "domain {} calibrates a different device set than domain {}",
                t.domain_id, first.domain_id
            )));
        }
        if !seen_domains.insert(t.domain_id.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate domain {} in merge",
                t.domain_id
            )));
        }
    }
    Ok(MultiCalibration { tables })
}

/// Forward passes needed to calibrate K devices with n examples each.
/// Documents how light enrollment is next to training.
pub fn calibration_cost(n: usize, k_dev: usize) -> Result<u64> {
    if n == 0 || k_dev == 0 {
        return Err(Error::InvalidInput(
            "calibration cost needs n >= 1 and at least one device".into(),
        ));
    }
    Ok(n as u64 * k_dev as u64)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    device_id: u32,
    centroid: Vec<f64>,
    radius: f64,
    n_used: usize,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    model_version: String,
    domain_id: String,
    entries: Vec<EntryDoc>,
}

impl TableDoc {
    fn from_table(table: &CalibrationTable) -> TableDoc {
        TableDoc {
            model_version: table.model_version.clone(),
            domain_id: table.domain_id.clone(),
            entries: table
                .entries
                .iter()
                .map(|e| EntryDoc {
                    device_id: e.device_id,
                    centroid: e.centroid.0.clone(),
                    radius: e.radius,
                    n_used: e.n_used,
                })
                .collect(),
        }
    }

    fn into_table(self) -> CalibrationTable {
        CalibrationTable {
            model_version: self.model_version,
            domain_id: self.domain_id.clone(),
            entries: self
                .entries
                .into_iter()
                .map(|e| DeviceCalibration {
                    device_id: e.device_id,
                    centroid: EmbeddingPoint(e.centroid),
                    radius: e.radius,
                    n_used: e.n_used,
                    domain_id: self.domain_id.clone(),
                })
                .collect(),
        }
    }
}

/// On-disk form of a [`MultiCalibration`]: the constituent tables in order.
#[derive(Serialize, Deserialize)]
struct MultiDoc {
    tables: Vec<TableDoc>,
}

impl MultiCalibration {
    pub fn save(&self, path: &Path) -> Result<()> {
        for t in &self.tables {
            t.validate()?;
        }
        let doc = MultiDoc {
            tables: self.tables.iter().map(TableDoc::from_table).collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc).map_err(|e| Error::json(path, e))?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<MultiCalibration> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let doc: MultiDoc =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))?;
        // Re-merge to re-check version agreement and per-table invariants.
        merge_calibrations(doc.tables.into_iter().map(TableDoc::into_table).collect())
    }
}

impl CalibrationTable {
    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidInput("calibration table is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.device_id) {
                return Err(Error::Device {
                    device_id: e.device_id,
                    msg: "appears twice in one calibration table".into(),
                });
            }
            if !(e.radius >= 0.0) || e.n_used == 0 {
                return Err(Error::Device {
                    device_id: e.device_id,
                    msg: format!("invalid radius {} or n_used {}", e.radius, e.n_used),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let doc = TableDoc::from_table(self);
        let mut bytes = serde_json::to_vec_pretty(&doc).map_err(|e| Error::json(path, e))?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<CalibrationTable> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let doc: TableDoc =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))?;
        let table = doc.into_table();
        table.validate()?;
        Ok(table)
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_net::{forward, init_network, test_frame, NetworkConfig};
    use crate::signal_io::FrameExample;

    fn small_params(seed: u64) -> Parameters {
        let config = NetworkConfig {
            conv_blocks: vec![(4, 3), (4, 3)],
            fc_hidden: 16,
            embedding_dim: 4,
            ..NetworkConfig::default()
        };
        init_network(&config, seed).unwrap()
    }

    fn dataset(devices: u32, frames_per_device: usize) -> LabeledDataset {
        let mut frames = Vec::new();
        for dev in 0..devices {
            for k in 0..frames_per_device {
                frames.push(test_frame(1000 + dev as u64 * 97 + k as u64, dev));
            }
        }
        LabeledDataset::new(frames, "test").unwrap()
    }

    #[test]
    fn single_example_gives_zero_radius_at_that_embedding() {
        let params = small_params(1);
        let ds = dataset(2, 3);
        let table = calibrate(&params, &ds, &CalibrationSpec::first_n(1)).unwrap();
        for entry in &table.entries {
            let first = ds.frames_of(entry.device_id)[0];
            let emb = forward(&params, first).unwrap();
            assert_eq!(entry.centroid, emb);
            assert_eq!(entry.radius, 0.0);
            assert_eq!(entry.n_used, 1);
        }
    }

    #[test]
    fn two_examples_give_midpoint_and_half_distance() {
        let params = small_params(2);
        let ds = dataset(1, 2);
        let table = calibrate(&params, &ds, &CalibrationSpec::first_n(2)).unwrap();
        let frames = ds.frames_of(0);
        let u = forward(&params, frames[0]).unwrap();
        let v = forward(&params, frames[1]).unwrap();
        let entry = &table.entries[0];
        for k in 0..u.dim() {
            let mid = (u.0[k] + v.0[k]) / 2.0;
            assert!((entry.centroid.0[k] - mid).abs() < 1e-12);
        }
        assert!((entry.radius - u.distance(&v) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_independent_recomputation() {
        // Oracle path embeds one frame at a time and recomputes mean and
        // mean distance with plain loops.
        let params = small_params(3);
        let ds = dataset(3, 5);
        let n = 4;
        let table = calibrate(&params, &ds, &CalibrationSpec::first_n(n)).unwrap();
        for entry in &table.entries {
            let frames = ds.frames_of(entry.device_id);
            let points: Vec<EmbeddingPoint> = frames[..n]
                .iter()
                .map(|f| forward(&params, f).unwrap())
                .collect();
            let dim = points[0].dim();
            let mut centroid = vec![0.0; dim];
            for p in &points {
                for k in 0..dim {
                    centroid[k] += p.0[k] / n as f64;
                }
            }
            let mut radius = 0.0;
            for p in &points {
                let d: f64 = (0..dim).map(|k| (p.0[k] - centroid[k]).powi(2)).sum();
                radius += d.sqrt() / n as f64;
            }
            for k in 0..dim {
                let rel = (entry.centroid.0[k] - centroid[k]).abs()
                    / centroid[k].abs().max(1e-12);
                assert!(rel < 1e-9, "centroid coordinate {k} off by {rel}");
            }
            let rel = (entry.radius - radius).abs() / radius.abs().max(1e-12);
            assert!(rel < 1e-9, "radius off by {rel}");
        }
    }

    #[test]
    fn order_of_the_selected_examples_is_irrelevant() {
        let params = small_params(4);
        let ds = dataset(2, 4);
        let spec = CalibrationSpec::first_n(4);
        let base = calibrate(&params, &ds, &spec).unwrap();

        // Reverse each device's frames; the same 4 are selected, so only
        // summation order changes.
        let mut shuffled_frames = Vec::new();
        for dev in &ds.device_ids {
            let mut fs: Vec<FrameExample> = ds.frames_of(*dev).into_iter().cloned().collect();
            fs.reverse();
            shuffled_frames.extend(fs);
        }
        let shuffled = LabeledDataset::new(shuffled_frames, "test").unwrap();
        let permuted = calibrate(&params, &shuffled, &spec).unwrap();
        for (a, b) in base.entries.iter().zip(&permuted.entries) {
            assert_eq!(a.device_id, b.device_id);
            for k in 0..a.centroid.dim() {
                assert!((a.centroid.0[k] - b.centroid.0[k]).abs() < 1e-12);
            }
            assert!((a.radius - b.radius).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_untouched() {
        let params = small_params(5);
        let before = serde_json::to_vec(&params).unwrap();
        let ds = dataset(2, 3);
        calibrate(&params, &ds, &CalibrationSpec::first_n(3)).unwrap();
        assert_eq!(serde_json::to_vec(&params).unwrap(), before);
    }

    #[test]
    fn radius_is_bounded_by_the_farthest_point() {
        let params = small_params(6);
        let ds = dataset(2, 6);
        let n = 6;
        let table = calibrate(&params, &ds, &CalibrationSpec::first_n(n)).unwrap();
        for entry in &table.entries {
            let max_d = ds.frames_of(entry.device_id)[..n]
                .iter()
                .map(|f| forward(&params, f).unwrap().distance(&entry.centroid))
                .fold(0.0f64, f64::max);
            assert!(entry.radius <= max_d + 1e-12);
            assert!(entry.radius > 0.0, "distinct frames must give radius > 0");
        }
    }

    #[test]
    fn identical_frames_give_zero_radius() {
        let params = small_params(7);
        let f = test_frame(42, 0);
        let frames = vec![f.clone(), f.clone(), f];
        let ds = LabeledDataset::new(frames, "test").unwrap();
        let table = calibrate(&params, &ds, &CalibrationSpec::first_n(3)).unwrap();
        assert_eq!(table.entries[0].radius, 0.0);
    }

    #[test]
    fn short_device_is_named_in_the_error() {
        let params = small_params(8);
        let ds = dataset(2, 2);
        let err = calibrate(&params, &ds, &CalibrationSpec::first_n(3)).unwrap_err();
        match err {
            Error::Device { device_id, .. } => assert_eq!(device_id, 0),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn random_selection_is_seeded_and_differs_from_first_n() {
        let params = small_params(9);
        let ds = dataset(2, 12);
        let spec = CalibrationSpec {
            n: 3,
            selection: Selection::Random { seed: 11 },
            radius_rule: RadiusRule::Mean,
        };
        let a = calibrate(&params, &ds, &spec).unwrap();
        let b = calibrate(&params, &ds, &spec).unwrap();
        assert_eq!(a, b);
        let first = calibrate(&params, &ds, &CalibrationSpec::first_n(3)).unwrap();
        assert_ne!(
            a.entries[0].centroid, first.entries[0].centroid,
            "seeded pick coincided with the first 3 of 12; change the seed"
        );
    }

    #[test]
    fn quantile_radius_uses_nearest_rank() {
        assert_eq!(radius_from_distances(&[1.0, 3.0, 2.0], RadiusRule::Mean), 2.0);
        let q = |q, d: &[f64]| radius_from_distances(d, RadiusRule::Quantile { q });
        assert_eq!(q(1.0, &[1.0, 3.0, 2.0]), 3.0);
        assert_eq!(q(0.5, &[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(q(0.95, &[4.0, 1.0, 3.0, 2.0]), 4.0);
        assert_eq!(q(0.25, &[4.0, 1.0, 3.0, 2.0]), 1.0);
    }

    #[test]
    fn quantile_spec_rejects_out_of_range() {
        let params = small_params(10);
        let ds = dataset(1, 3);
        for q in [0.0, 1.5, -0.1] {
            let spec = CalibrationSpec {
                n: 2,
                selection: Selection::FirstN,
                radius_rule: RadiusRule::Quantile { q },
            };
            assert!(calibrate(&params, &ds, &spec).is_err());
        }
    }

    #[test]
    fn merge_keeps_every_domain_entry() {
        let params = small_params(11);
        let ds_a = dataset(2, 3);
        let frames_b: Vec<FrameExample> = ds_a
            .frames
            .iter()
            .map(|f| {
                FrameExample::from_rows(f.i_row(), f.q_row(), f.device_id, "field").unwrap()
            })
            .collect();
        let ds_b = LabeledDataset::new(frames_b, "field").unwrap();
        let ta = calibrate(&params, &ds_a, &CalibrationSpec::first_n(3)).unwrap();
        let tb = calibrate(&params, &ds_b, &CalibrationSpec::first_n(2)).unwrap();

        let single = merge_calibrations(vec![ta.clone()]).unwrap();
        assert_eq!(single.tables.len(), 1);

        let multi = merge_calibrations(vec![ta.clone(), tb]).unwrap();
        let pairs: usize = multi.tables.iter().map(|t| t.entries.len()).sum();
        assert_eq!(pairs, 4);

        let err = merge_calibrations(vec![ta.clone(), ta]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "duplicate domain");
    }

    #[test]
    fn merge_rejects_mismatched_devices_and_models() {
        let params = small_params(12);
        let ds2 = dataset(2, 2);
        let ds3 = dataset(3, 2);
        let t2 = calibrate(&params, &ds2, &CalibrationSpec::first_n(2)).unwrap();
        let mut t3 = calibrate(&params, &ds3, &CalibrationSpec::first_n(2)).unwrap();
        t3.domain_id = "other".into();
        for e in &mut t3.entries {
            e.domain_id = "other".into();
        }
        assert!(merge_calibrations(vec![t2.clone(), t3]).is_err());

        let other_params = small_params(13);
        let mut tb = calibrate(&other_params, &ds2, &CalibrationSpec::first_n(2)).unwrap();
        tb.domain_id = "other".into();
        let err = merge_calibrations(vec![t2, tb]).unwrap_err();
        assert!(matches!(err, Error::CalibrationMismatch(_)));
    }

    #[test]
    fn cost_is_forward_count() {
        assert_eq!(calibration_cost(10, 10).unwrap(), 100);
        assert_eq!(calibration_cost(11_719, 10).unwrap(), 117_190);
        assert!(calibration_cost(0, 10).is_err());
    }

    #[test]
    fn table_json_round_trips_with_the_documented_shape() {
        let params = small_params(14);
        let ds = dataset(2, 3);
        let table = calibrate(&params, &ds, &CalibrationSpec::first_n(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        table.save(&path).unwrap();

        let value: serde_json::Value =
            serde_json::from_reader(File::open(&path).unwrap()).unwrap();
        let obj = value.as_object().unwrap();
        let mut keys: Vec<&String> = obj.keys().collect();
        keys.sort();
        assert_eq!(keys, ["domain_id", "entries", "model_version"]);
        let entry = value["entries"][0].as_object().unwrap();
        let mut ekeys: Vec<&String> = entry.keys().collect();
        ekeys.sort();
        assert_eq!(ekeys, ["centroid", "device_id", "n_used", "radius"]);
        assert_eq!(entry["centroid"].as_array().unwrap().len(), 4);

        let back = CalibrationTable::load(&path).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn model_version_tracks_weights() {
        let a = small_params(15);
        let b = small_params(16);
        assert_ne!(model_version(&a), model_version(&b));
        assert_eq!(model_version(&a), model_version(&a.clone()));
        let mut c = a.clone();
        c.bns[0].running_mean[0] += 1e-9;
        assert_ne!(model_version(&a), model_version(&c));
    }
}
