//! Admit/reject decisions: average M infer-mode embeddings into one point,
//! then admit when the point falls inside any enrolled device's ball.
//!
//! The verdict only needs ANY ball to contain the point, so it's
//! order-free; the reported match is the first satisfier under a fixed
//! scan order (ascending device id, then domain order) to keep outputs
//! deterministic. The continuous score is the negated minimum
//! centroid distance, so higher means more known and one ROC routine
//! serves both this and the max-logit baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationTable, DeviceCalibration, MultiCalibration};
use crate::embed_net::{forward_batch, EmbeddingPoint, ForwardMode, Parameters};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::signal_io::FrameExample;

/// Frames presumed to come from one (possibly unknown) transmitter.
pub const DEFAULT_DECISION_BATCH: usize = 10;

/// M frames from one transmitter, all in the same domain.
#[derive(Debug, Clone)]
pub struct InputBatch<'a> {
    frames: Vec<&'a FrameExample>,
}

impl<'a> InputBatch<'a> {
    pub fn new(frames: &[&'a FrameExample]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("decision batch is empty".into()))?;
        for f in frames {
            if f.domain_id != first.domain_id {
                return Err(Error::InvalidInput(format!(
                    "decision batch mixes domains {} and {}",
                    first.domain_id, f.domain_id
                )));
            }
        }
        Ok(Self {
            frames: frames.to_vec(),
        })
    }

    pub fn m(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[&'a FrameExample] {
        &self.frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Admit,
    Reject,
}

/// Outcome of one open-set decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    /// First device whose ball contained the point; present iff Admit.
    pub matched_device: Option<u32>,
    /// Minimum Euclidean distance to any enrolled centroid.
    pub min_distance: f64,
    /// Negated `min_distance`; higher means more known.
    pub score: f64,
}

/// Anything that can be scanned as (device, domain) calibration entries in
/// the fixed decision order.
pub trait CalibrationSource {
    /// Entries in ascending device_id; within one device, domain order
    /// follows the table sequence.
    fn entries_in_order(&self) -> Vec<&DeviceCalibration>;
}

impl CalibrationSource for CalibrationTable {
    fn entries_in_order(&self) -> Vec<&DeviceCalibration> {
        let mut entries: Vec<&DeviceCalibration> = self.entries.iter().collect();
        entries.sort_by_key(|e| e.device_id);
        entries
    }
}

impl CalibrationSource for MultiCalibration {
    fn entries_in_order(&self) -> Vec<&DeviceCalibration> {
        let mut entries: Vec<(usize, &DeviceCalibration)> = Vec::new();
        for (domain_rank, table) in self.tables.iter().enumerate() {
            entries.extend(table.entries.iter().map(|e| (domain_rank, e)));
        }
        entries.sort_by_key(|(rank, e)| (e.device_id, *rank));
        entries.into_iter().map(|(_, e)| e).collect()
    }
}

/// Average the M frames' infer-mode embeddings into the decision point.
pub fn input_point(params: &Parameters, batch: &InputBatch) -> Result<EmbeddingPoint> {
    let (emb, _) = forward_batch(params, batch.frames(), ForwardMode::Infer)?;
    let points: Vec<EmbeddingPoint> = emb
        .outer_iter()
        .map(|row| EmbeddingPoint(row.to_vec()))
        .collect();
    EmbeddingPoint::mean(&points)
}

/// Admit iff any enrolled (device, domain) ball contains the point;
/// boundary counts as inside. Scans every entry so `min_distance` covers
/// the whole table even after a match.
pub fn open_set_decide(
    point: &EmbeddingPoint,
    table: &impl CalibrationSource,
) -> Result<Decision> {
    let entries = table.entries_in_order();
    if entries.is_empty() {
        return Err(Error::InvalidInput("empty calibration table".into()));
    }
    let mut matched_device = None;
    let mut min_distance = f64::INFINITY;
    for entry in entries {
        if entry.centroid.dim() != point.dim() {
            return Err(Error::CalibrationMismatch(format!(
                "centroid dimension {} vs input point dimension {}",
                entry.centroid.dim(),
                point.dim()
            )));
        }
        let d = point.distance(&entry.centroid);
        min_distance = min_distance.min(d);
        if matched_device.is_none() && d <= entry.radius {
            matched_device = Some(entry.device_id);
        }
    }
    Ok(Decision {
        verdict: if matched_device.is_some() {
            Verdict::Admit
        } else {
            Verdict::Reject
        },
        matched_device,
        min_distance,
        score: -min_distance,
    })
}

/// Continuous known-ness score: negated minimum centroid distance.
/// Ignores radii entirely.
pub fn decision_score(point: &EmbeddingPoint, table: &impl CalibrationSource) -> Result<f64> {
    Ok(open_set_decide(point, table)?.score)
}

// ---------------------------------------------------------------------------
// Batch decision records
// ---------------------------------------------------------------------------

/// One line of a batch decision run, ready for JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub true_device: u32,
    pub true_known: bool,
    pub verdict: Verdict,
    pub matched_device: Option<u32>,
    pub score: f64,
}

/// Write one JSON object per line.
pub fn write_decisions_jsonl(path: &Path, records: &[DecisionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let line = serde_json::to_vec(r).map_err(|e| Error::json(path, e))?;
        out.extend_from_slice(&line);
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_decisions_jsonl(path: &Path) -> Result<Vec<DecisionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_net::{forward, init_network, test_frame, NetworkConfig};
    use proptest::prelude::*;

    fn small_params(seed: u64) -> Parameters {
        let config = NetworkConfig {
            conv_blocks: vec![(4, 3), (4, 3)],
            fc_hidden: 16,
            embedding_dim: 4,
            ..NetworkConfig::default()
        };
        init_network(&config, seed).unwrap()
    }

    /// Hand-built table: one entry per (centroid, radius), device ids 0..n.
    fn table_of(entries: &[(Vec<f64>, f64)]) -> CalibrationTable {
        CalibrationTable {
            model_version: "test/0".into(),
            domain_id: "lab".into(),
            entries: entries
                .iter()
                .enumerate()
                .map(|(i, (c, r))| DeviceCalibration {
                    device_id: i as u32,
                    centroid: EmbeddingPoint(c.clone()),
                    radius: *r,
                    n_used: 1,
                    domain_id: "lab".into(),
                })
                .collect(),
        }
    }

    /// Independent reimplementation: check every entry, collect all
    /// satisfiers, report the smallest-id one.
    fn decide_brute(point: &EmbeddingPoint, table: &CalibrationTable) -> (Verdict, Option<u32>, f64) {
        let mut satisfiers: Vec<u32> = Vec::new();
        let mut min_d = f64::INFINITY;
        for e in &table.entries {
            let d: f64 = e
                .centroid
                .0
                .iter()
                .zip(&point.0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_d = min_d.min(d);
            if d <= e.radius {
                satisfiers.push(e.device_id);
            }
        }
        satisfiers.sort_unstable();
        match satisfiers.first() {
            Some(&id) => (Verdict::Admit, Some(id), min_d),
            None => (Verdict::Reject, None, min_d),
        }
    }

    #[test]
    fn single_frame_point_is_its_embedding() {
        let params = small_params(1);
        let f = test_frame(5, 0);
        let batch = InputBatch::new(&[&f]).unwrap();
        assert_eq!(batch.m(), 1);
        let point = input_point(&params, &batch).unwrap();
        assert_eq!(point, forward(&params, &f).unwrap());
    }

    #[test]
    fn opposite_points_average_to_zero() {
        let u = EmbeddingPoint(vec![1.0, -2.0, 0.5]);
        let v = EmbeddingPoint(vec![-1.0, 2.0, -0.5]);
        let mean = EmbeddingPoint::mean(&[u, v]).unwrap();
        assert_eq!(mean.0, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(InputBatch::new(&[]).is_err());
    }

    #[test]
    fn mixed_domain_batch_is_rejected() {
        let a = test_frame(1, 0);
        let mut b = test_frame(2, 0);
        b.domain_id = "other".into();
        assert!(InputBatch::new(&[&a, &b]).is_err());
    }

    #[test]
    fn point_at_centroid_admits_that_device() {
        let table = table_of(&[(vec![1.0, 2.0], 0.5)]);
        let d = open_set_decide(&EmbeddingPoint(vec![1.0, 2.0]), &table).unwrap();
        assert_eq!(d.verdict, Verdict::Admit);
        assert_eq!(d.matched_device, Some(0));
        assert_eq!(d.min_distance, 0.0);
        assert_eq!(d.score, 0.0);
    }

    #[test]
    fn zero_radii_reject_everything_off_centroid() {
        let table = table_of(&[(vec![0.0, 0.0], 0.0), (vec![1.0, 0.0], 0.0)]);
        let d = open_set_decide(&EmbeddingPoint(vec![0.5, 0.0]), &table).unwrap();
        assert_eq!(d.verdict, Verdict::Reject);
        assert_eq!(d.matched_device, None);
        assert_eq!(d.min_distance, 0.5);
    }

    #[test]
    fn boundary_distance_admits() {
        // Dyadic values keep the distance exact: |0.25 - 0| = 0.25 = radius.
        let table = table_of(&[(vec![0.25, 0.0], 0.25)]);
        let d = open_set_decide(&EmbeddingPoint(vec![0.0, 0.0]), &table).unwrap();
        assert_eq!(d.verdict, Verdict::Admit);
    }

    #[test]
    fn two_device_worked_example() {
        // Distances from the origin: 0.7 and 0.5.
        let centroids = [(vec![0.7, 0.0], 0.6), (vec![0.5, 0.0], 0.4)];
        let reject = open_set_decide(
            &EmbeddingPoint(vec![0.0, 0.0]),
            &table_of(&[centroids[0].clone(), (vec![0.0, 0.5], 0.4)]),
        )
        .unwrap();
        assert_eq!(reject.verdict, Verdict::Reject);
        assert!((reject.min_distance - 0.5).abs() < 1e-15);

        let admit = open_set_decide(
            &EmbeddingPoint(vec![0.0, 0.0]),
            &table_of(&[(vec![0.7, 0.0], 0.6), (vec![0.0, 0.5], 0.55)]),
        )
        .unwrap();
        assert_eq!(admit.verdict, Verdict::Admit);
        assert_eq!(admit.matched_device, Some(1));
    }

    #[test]
    fn matches_brute_force_on_random_tables() {
        let mut rng = crate::seeds::rng_for(77, "decide-oracle");
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let entries: Vec<(Vec<f64>, f64)> = (0..n)
                .map(|_| {
                    let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (c, rng.random_range(0.0..1.2))
                })
                .collect();
            let table = table_of(&entries);
            let point = EmbeddingPoint((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
            let got = open_set_decide(&point, &table).unwrap();
            let (verdict, matched, min_d) = decide_brute(&point, &table);
            assert_eq!(got.verdict, verdict);
            assert_eq!(got.matched_device, matched);
            assert_eq!(got.min_distance, min_d);
            assert_eq!(got.score, -min_d);
        }
    }

    #[test]
    fn score_ignores_radii() {
        let point = EmbeddingPoint(vec![0.3, -0.4]);
        let a = table_of(&[(vec![1.0, 1.0], 0.1), (vec![-1.0, 0.0], 0.2)]);
        let mut b = a.clone();
        for e in &mut b.entries {
            e.radius += 5.0;
        }
        assert_eq!(
            decision_score(&point, &a).unwrap(),
            decision_score(&point, &b).unwrap()
        );
    }

    #[test]
    fn multi_table_scan_is_device_major() {
        // Device 1 admits only in the second domain; device 0 admits in
        // neither. The match must be device 1 even though domain "b" comes
        // second, and a device 0 admit in domain "b" would win over it.
        let mut t_a = table_of(&[(vec![10.0, 0.0], 0.1), (vec![20.0, 0.0], 0.1)]);
        t_a.domain_id = "a".into();
        let mut t_b = table_of(&[(vec![30.0, 0.0], 0.1), (vec![0.0, 0.0], 1.0)]);
        t_b.domain_id = "b".into();
        let multi = MultiCalibration {
            tables: vec![t_a.clone(), t_b.clone()],
        };
        let d = open_set_decide(&EmbeddingPoint(vec![0.0, 0.0]), &multi).unwrap();
        assert_eq!(d.matched_device, Some(1));

        // Admit under one constituent implies admit under the merge.
        let single = open_set_decide(&EmbeddingPoint(vec![0.0, 0.0]), &t_b).unwrap();
        assert_eq!(single.verdict, Verdict::Admit);
        assert_eq!(d.verdict, Verdict::Admit);
    }

    #[test]
    fn decision_jsonl_round_trips() {
        let records = vec![
            DecisionRecord {
                true_device: 3,
                true_known: true,
                verdict: Verdict::Admit,
                matched_device: Some(3),
                score: -0.25,
            },
            DecisionRecord {
                true_device: 9,
                true_known: false,
                verdict: Verdict::Reject,
                matched_device: None,
                score: -1.5,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        write_decisions_jsonl(&path, &records).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.lines().next().unwrap();
        // Field order in the raw line follows the struct; Value re-parse
        // sorts keys, so check the raw prefix and the sorted key set.
        assert!(line.starts_with("{\"true_device\":"));
        let first: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = first.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            ["matched_device", "score", "true_device", "true_known", "verdict"]
        );
        assert_eq!(first["verdict"], "admit");

        assert_eq!(read_decisions_jsonl(&path).unwrap(), records);
    }

    proptest! {
        #[test]
        fn growing_radii_never_flips_admit_to_reject(
            point in proptest::collection::vec(-1.0..1.0f64, 3),
            centroids in proptest::collection::vec(
                (proptest::collection::vec(-1.0..1.0f64, 3), 0.0..1.0f64),
                1..5,
            ),
            delta in 0.0..0.5f64,
        ) {
            let point = EmbeddingPoint(point);
            let table = table_of(&centroids);
            let before = open_set_decide(&point, &table).unwrap();
            let mut grown = table.clone();
            for e in &mut grown.entries {
                e.radius += delta;
            }
            let after = open_set_decide(&point, &grown).unwrap();
            if before.verdict == Verdict::Admit {
                prop_assert_eq!(after.verdict, Verdict::Admit);
            }
            // Equivalent formulation: admit iff min(distance - radius) <= 0.
            let slack = table
                .entries
                .iter()
                .map(|e| point.distance(&e.centroid) - e.radius)
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(before.verdict == Verdict::Admit, slack <= 0.0);
        }
    }
}
