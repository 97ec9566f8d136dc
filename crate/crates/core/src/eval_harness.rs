//! Open-set evaluation: seeded known/unknown trials, TPR/FPR at the
//! calibrated thresholds, threshold-free AUROC, trial averaging, and the
//! train-on-X / calibrate-on-Y / test-on-Z portability matrix.
//!
//! A trial samples 5 known and 5 unknown devices, feeds an equal number of
//! M-frame batches per device through the decision pipeline, and tallies
//! admits and rejects. Performance depends on which unknown devices get
//! drawn, so reported numbers average several trials (5 by convention).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, merge_calibrations, CalibrationSpec, CalibrationTable};
use crate::decide::{input_point, open_set_decide, CalibrationSource, InputBatch, Verdict};
use crate::embed_net::loss::max_logit_score;
use crate::embed_net::train::{train, train_vanilla, TrainConfig};
use crate::embed_net::{forward_batch, init_network, ForwardMode, NetworkConfig, Parameters};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::seeds;
use crate::signal_io::{split_dataset, FrameExample, LabeledDataset, SplitMode};

// ---------------------------------------------------------------------------
// Counts and rates
// ---------------------------------------------------------------------------

/// Admit/reject tallies. Known devices land in the first two fields,
/// unknown devices in the last two.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_negatives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
}

/// TP / (TP + FN); `None` when no known batches were decided.
pub fn tpr(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.true_positives + c.false_negatives;
    (denom > 0).then(|| c.true_positives as f64 / denom as f64)
}

/// FP / (FP + TN); `None` when no unknown batches were decided.
pub fn fpr(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.false_positives + c.true_negatives;
    (denom > 0).then(|| c.false_positives as f64 / denom as f64)
}

/// Area under the ROC over all score thresholds, higher score meaning
/// "more known". Computed exactly: walking the merged tie groups in
/// descending score accumulates the trapezoid area in integers, which
/// equals the pairwise rank statistic (ties get half credit).
pub fn auroc(scores_known: &[f64], scores_unknown: &[f64]) -> Result<f64> {
    if scores_known.is_empty() || scores_unknown.is_empty() {
        return Err(Error::InvalidInput(
            "auroc needs scores on both sides".into(),
        ));
    }
    if scores_known
        .iter()
        .chain(scores_unknown)
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidInput("auroc scores must be finite".into()));
    }
    let mut known = scores_known.to_vec();
    let mut unknown = scores_unknown.to_vec();
    known.sort_by(|a, b| b.total_cmp(a));
    unknown.sort_by(|a, b| b.total_cmp(a));

    // Twice the unnormalized area: each unknown score u contributes 2 per
    // known score strictly above it and 1 per tie.
    let mut twice_area: u128 = 0;
    let mut i = 0usize;
    let mut j = 0usize;
    while j < unknown.len() {
        let s = unknown[j];
        while i < known.len() && known[i] > s {
            i += 1;
        }
        let mut k_eq = 0u128;
        let mut ii = i;
        while ii < known.len() && known[ii] == s {
            k_eq += 1;
            ii += 1;
        }
        let mut u_eq = 0u128;
        while j < unknown.len() && unknown[j] == s {
            u_eq += 1;
            j += 1;
        }
        twice_area += u_eq * (2 * i as u128 + k_eq);
    }
    Ok(twice_area as f64 / (2.0 * known.len() as f64 * unknown.len() as f64))
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

/// One trial's sampling protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialSpec {
    /// Devices the model trained on (and the table enrolled).
    pub known_pool: Vec<u32>,
    /// Devices the model never saw.
    pub unknown_pool: Vec<u32>,
    pub n_known_sampled: usize,
    pub n_unknown_sampled: usize,
    /// M-frame decision batches per sampled device.
    pub batches_per_device: usize,
    /// Frames per decision batch (M).
    pub m: usize,
    pub seed: u64,
}

impl TrialSpec {
    fn validate(&self) -> Result<()> {
        let known: BTreeSet<u32> = self.known_pool.iter().copied().collect();
        let unknown: BTreeSet<u32> = self.unknown_pool.iter().copied().collect();
        if known.intersection(&unknown).next().is_some() {
            return Err(Error::InvalidInput(
                "known and unknown pools overlap".into(),
            ));
        }
        if self.n_known_sampled == 0 || self.n_known_sampled > known.len() {
            return Err(Error::InvalidInput(format!(
                "cannot sample {} of {} known devices",
                self.n_known_sampled,
                known.len()
            )));
        }
        if self.n_unknown_sampled == 0 || self.n_unknown_sampled > unknown.len() {
            return Err(Error::InvalidInput(format!(
                "cannot sample {} of {} unknown devices",
                self.n_unknown_sampled,
                unknown.len()
            )));
        }
        if self.batches_per_device == 0 || self.m == 0 {
            return Err(Error::InvalidInput(
                "need at least one batch of at least one frame".into(),
            ));
        }
        Ok(())
    }

    /// Seeded draw of the trial's device cast, sorted for deterministic
    /// processing order.
    fn sample_devices(&self) -> (Vec<u32>, Vec<u32>) {
        let mut rng = seeds::rng_for(self.seed, "trial-sample");
        let pick = |pool: &[u32], n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut picked: Vec<u32> = rand::seq::index::sample(rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            picked
        };
        let known = pick(&self.known_pool, self.n_known_sampled, &mut rng);
        let unknown = pick(&self.unknown_pool, self.n_unknown_sampled, &mut rng);
        (known, unknown)
    }
}

/// Counts plus the per-batch scores feeding the ROC.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub counts: ConfusionCounts,
    pub scores_known: Vec<f64>,
    pub scores_unknown: Vec<f64>,
    pub sampled_known: Vec<u32>,
    pub sampled_unknown: Vec<u32>,
}

/// The first `batches * m` frames of a device, chunked into decision
/// batches in dataset order.
fn device_batches<'a>(
    data: &'a LabeledDataset,
    device_id: u32,
    batches: usize,
    m: usize,
) -> Result<Vec<Vec<&'a FrameExample>>> {
    let frames = data.frames_of(device_id);
    let needed = batches * m;
    if frames.len() < needed {
        return Err(Error::Device {
            device_id,
            msg: format!(
                "has {} test frames but the trial needs {needed}",
                frames.len()
            ),
        });
    }
    Ok(frames[..needed].chunks(m).map(|c| c.to_vec()).collect())
}

/// One seeded trial: sample the device cast, decide every batch, tally
/// counts, and collect scores.
pub fn run_trial(
    params: &Parameters,
    table: &impl CalibrationSource,
    test_data: &LabeledDataset,
    spec: &TrialSpec,
) -> Result<TrialResult> {
    spec.validate()?;
    let (sampled_known, sampled_unknown) = spec.sample_devices();
    let mut counts = ConfusionCounts::default();
    let mut scores_known = Vec::new();
    let mut scores_unknown = Vec::new();
    for (devices, known) in [(&sampled_known, true), (&sampled_unknown, false)] {
        for &dev in devices.iter() {
            for batch in device_batches(test_data, dev, spec.batches_per_device, spec.m)? {
                let batch = InputBatch::new(&batch)?;
                let point = input_point(params, &batch)?;
                let decision = open_set_decide(&point, table)?;
                let admitted = decision.verdict == Verdict::Admit;
                match (known, admitted) {
                    (true, true) => counts.true_positives += 1,
                    (true, false) => counts.false_negatives += 1,
                    (false, true) => counts.false_positives += 1,
                    (false, false) => counts.true_negatives += 1,
                }
                if known {
                    scores_known.push(decision.score);
                } else {
                    scores_unknown.push(decision.score);
                }
            }
        }
    }
    Ok(TrialResult {
        counts,
        scores_known,
        scores_unknown,
        sampled_known,
        sampled_unknown,
    })
}

/// Baseline trial: same device cast and frames, but each FRAME is scored
/// by its maximum logit, with no batch averaging and no admit threshold.
pub fn run_vanilla_trial(
    params: &Parameters,
    test_data: &LabeledDataset,
    spec: &TrialSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let (sampled_known, sampled_unknown) = spec.sample_devices();
    let mut scores_known = Vec::new();
    let mut scores_unknown = Vec::new();
    for (devices, scores) in [
        (&sampled_known, &mut scores_known),
        (&sampled_unknown, &mut scores_unknown),
    ] {
        for &dev in devices.iter() {
            for batch in device_batches(test_data, dev, spec.batches_per_device, spec.m)? {
                let (logits, _) = forward_batch(params, &batch, ForwardMode::Infer)?;
                scores.extend(logits.outer_iter().map(|row| max_logit_score(&row)));
            }
        }
    }
    Ok((scores_known, scores_unknown))
}

// ---------------------------------------------------------------------------
// Averaging
// ---------------------------------------------------------------------------

/// One trial reduced to its three headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub auroc: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// Trial metrics averaged, with the per-trial values kept for variance
/// reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAverages {
    pub avg_auroc: f64,
    pub avg_tpr: Option<f64>,
    pub avg_fpr: Option<f64>,
    pub per_trial: Vec<TrialMetrics>,
}

fn mean_of_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Average a list of per-trial metrics; a rate undefined in some trial is
/// averaged over the trials where it exists.
pub fn average_metrics(per_trial: Vec<TrialMetrics>) -> Result<TrialAverages> {
    if per_trial.is_empty() {
        return Err(Error::InvalidInput("no trials to average".into()));
    }
    let avg_auroc = per_trial.iter().map(|t| t.auroc).sum::<f64>() / per_trial.len() as f64;
    Ok(TrialAverages {
        avg_auroc,
        avg_tpr: mean_of_present(per_trial.iter().map(|t| t.tpr)),
        avg_fpr: mean_of_present(per_trial.iter().map(|t| t.fpr)),
        per_trial,
    })
}

/// Reduce full trial results to averaged metrics (5 trials by convention).
pub fn avg_over_trials(results: &[TrialResult]) -> Result<TrialAverages> {
    let per_trial = results
        .iter()
        .map(|r| {
            Ok(TrialMetrics {
                auroc: auroc(&r.scores_known, &r.scores_unknown)?,
                tpr: tpr(&r.counts),
                fpr: fpr(&r.counts),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    average_metrics(per_trial)
}

// ---------------------------------------------------------------------------
// Portability matrix
// ---------------------------------------------------------------------------

/// Calibration sample size: a fixed count per device, or a fraction of the
/// PER-DEVICE training frame count (the convention behind "10% of the
/// training data": 800 training frames per device at 10% enroll with 80).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum CalibrationSize {
    Absolute(usize),
    FractionOfTrain(f64),
}

/// The full recipe for one portability experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRequest {
    pub train_domain: String,
    /// Each cell lists one or more domains; several domains mean one
    /// merged multi-domain calibration shared by that cell's row.
    pub calibrate_cells: Vec<Vec<String>>,
    pub test_domains: Vec<String>,
    /// Devices the model trains on; everything else is unknown.
    pub known_devices: Vec<u32>,
    pub network: NetworkConfig,
    pub train_cfg: TrainConfig,
    /// Per-domain fraction of frames reserved for training/enrollment;
    /// the remainder is test data.
    pub train_fraction: f64,
    pub calibration_size: CalibrationSize,
    pub trials: usize,
    pub batches_per_device: usize,
    pub decision_batch: usize,
    pub n_known_sampled: usize,
    pub n_unknown_sampled: usize,
    pub include_vanilla: bool,
    pub seed: u64,
}

impl MatrixRequest {
    fn validate(&self) -> Result<()> {
        if self.calibrate_cells.is_empty()
            || self.test_domains.is_empty()
            || self.calibrate_cells.iter().any(|c| c.is_empty())
        {
            return Err(Error::InvalidInput(
                "matrix needs at least one calibrate cell and one test domain".into(),
            ));
        }
        if self.known_devices.len() < 2 {
            return Err(Error::InvalidInput(
                "matrix needs at least 2 known devices to train on".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "train_fraction must be in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidInput("matrix needs at least one trial".into()));
        }
        match self.calibration_size {
            CalibrationSize::Absolute(0) => {
                return Err(Error::InvalidInput("calibration size 0".into()))
            }
            CalibrationSize::FractionOfTrain(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::InvalidInput(format!(
                    "calibration fraction must be in (0,1], got {f}"
                )));
            }
            _ => {}
        }
        Ok(())
    }

    fn referenced_domains(&self) -> BTreeSet<&String> {
        std::iter::once(&self.train_domain)
            .chain(self.calibrate_cells.iter().flatten())
            .chain(self.test_domains.iter())
            .collect()
    }
}

/// One Tweak cell of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub calibrate_domains: Vec<String>,
    pub test_domain: String,
    pub metrics: TrialAverages,
}

/// One baseline cell (AUROC only; the baseline has no admit threshold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaCell {
    pub test_domain: String,
    pub avg_auroc: f64,
    pub per_trial: Vec<f64>,
}

/// Results of a full portability experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub train_domain: String,
    pub known_devices: Vec<u32>,
    pub cells: Vec<MatrixCell>,
    pub vanilla: Vec<VanillaCell>,
}

impl ExperimentMatrix {
    /// The cell for one (calibrate domains, test domain) pair.
    pub fn cell(&self, calibrate: &[&str], test: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| {
            c.test_domain == test
                && c.calibrate_domains.len() == calibrate.len()
                && c.calibrate_domains.iter().zip(calibrate).all(|(a, b)| a == b)
        })
    }

    pub fn vanilla_cell(&self, test: &str) -> Option<&VanillaCell> {
        self.vanilla.iter().find(|c| c.test_domain == test)
    }
}

/// Trained artifacts plus the matrix, so callers can checkpoint or reuse
/// the models.
#[derive(Debug, Clone)]
pub struct MatrixOutput {
    pub matrix: ExperimentMatrix,
    pub params: Parameters,
    pub vanilla_params: Option<Parameters>,
}

/// Run the whole experiment: train once on the train domain's enrollment
/// split, build each cell's calibration, and average `trials` seeded
/// trials per (cell, test domain). Trial seeds are shared across cells so
/// every cell faces the same device casts.
pub fn run_matrix(
    datasets: &BTreeMap<String, LabeledDataset>,
    req: &MatrixRequest,
) -> Result<MatrixOutput> {
    req.validate()?;
    let mut enroll_splits = BTreeMap::new();
    let mut test_splits = BTreeMap::new();
    let mut device_set: Option<Vec<u32>> = None;
    for &domain in &req.referenced_domains() {
        let ds = datasets
            .get(domain)
            .ok_or_else(|| Error::MissingDomain(domain.clone()))?;
        match &device_set {
            None => device_set = Some(ds.device_ids.clone()),
            Some(set) if *set != ds.device_ids => {
                return Err(Error::InvalidInput(format!(
                    "domain {domain} has a different device set"
                )));
            }
            Some(_) => {}
        }
        let (enroll, test) = split_dataset(ds, req.train_fraction, SplitMode::Contiguous)?;
        enroll_splits.insert(domain.clone(), enroll);
        test_splits.insert(domain.clone(), test);
    }
    let all_devices = device_set.expect("at least the train domain");
    for dev in &req.known_devices {
        if !all_devices.contains(dev) {
            return Err(Error::Device {
                device_id: *dev,
                msg: "listed as known but absent from the datasets".into(),
            });
        }
    }
    let unknown_pool: Vec<u32> = all_devices
        .iter()
        .copied()
        .filter(|d| !req.known_devices.contains(d))
        .collect();

    // Train once.
    let train_set = enroll_splits[&req.train_domain].restrict_to(&req.known_devices)?;
    let train_cfg = TrainConfig {
        seed: seeds::derive_seed(req.seed, "train"),
        ..req.train_cfg.clone()
    };
    let init = init_network(&req.network, train_cfg.seed)?;
    let params = train(&init, &train_set, &train_cfg)?.params;

    let vanilla_params = if req.include_vanilla {
        let vanilla_net = NetworkConfig {
            embedding_dim: req.known_devices.len(),
            ..req.network.clone()
        };
        let vanilla_cfg = TrainConfig {
            seed: seeds::derive_seed(req.seed, "vanilla-train"),
            ..req.train_cfg.clone()
        };
        let vanilla_init = init_network(&vanilla_net, vanilla_cfg.seed)?;
        Some(train_vanilla(&vanilla_init, &train_set, &vanilla_cfg)?.params)
    } else {
        None
    };

    let n = match req.calibration_size {
        CalibrationSize::Absolute(n) => n,
        CalibrationSize::FractionOfTrain(f) => {
            let per_device = train_set.len() / train_set.device_ids.len();
            ((per_device as f64 * f).floor() as usize).max(1)
        }
    };

    // One calibration per cell, shared across that cell's test domains.
    let mut calibrations: Vec<(Vec<String>, Calibrated)> = Vec::new();
    for cell in &req.calibrate_cells {
        let tables = cell
            .iter()
            .map(|domain| {
                let enroll = enroll_splits[domain].restrict_to(&req.known_devices)?;
                calibrate(&params, &enroll, &CalibrationSpec::first_n(n))
            })
            .collect::<Result<Vec<CalibrationTable>>>()?;
        let cal = if tables.len() == 1 {
            Calibrated::Single(tables.into_iter().next().unwrap())
        } else {
            Calibrated::Multi(merge_calibrations(tables)?)
        };
        calibrations.push((cell.clone(), cal));
    }

    // Trial seeds depend only on the trial index, so every cell and test
    // domain faces the same device casts; cross-cell comparisons are
    // paired.
    let trial_spec_for = |trial: usize| TrialSpec {
        known_pool: req.known_devices.clone(),
        unknown_pool: unknown_pool.clone(),
        n_known_sampled: req.n_known_sampled,
        n_unknown_sampled: req.n_unknown_sampled,
        batches_per_device: req.batches_per_device,
        m: req.decision_batch,
        seed: seeds::derive_seed_indexed(req.seed, "trial", trial as u64),
    };

    let mut cells = Vec::new();
    for (domains, cal) in &calibrations {
        for test_domain in &req.test_domains {
            let test_data = &test_splits[test_domain];
            let mut results = Vec::with_capacity(req.trials);
            for t in 0..req.trials {
                let spec = trial_spec_for(t);
                let result = match cal {
                    Calibrated::Single(table) => run_trial(&params, table, test_data, &spec)?,
                    Calibrated::Multi(multi) => run_trial(&params, multi, test_data, &spec)?,
                };
                results.push(result);
            }
            cells.push(MatrixCell {
                calibrate_domains: domains.clone(),
                test_domain: test_domain.clone(),
                metrics: avg_over_trials(&results)?,
            });
        }
    }

    let mut vanilla = Vec::new();
    if let Some(vp) = &vanilla_params {
        for test_domain in &req.test_domains {
            let test_data = &test_splits[test_domain];
            let mut per_trial = Vec::with_capacity(req.trials);
            for t in 0..req.trials {
                let spec = trial_spec_for(t);
                let (sk, su) = run_vanilla_trial(vp, test_data, &spec)?;
                per_trial.push(auroc(&sk, &su)?);
            }
            vanilla.push(VanillaCell {
                test_domain: test_domain.clone(),
                avg_auroc: per_trial.iter().sum::<f64>() / per_trial.len() as f64,
                per_trial,
            });
        }
    }

    Ok(MatrixOutput {
        matrix: ExperimentMatrix {
            train_domain: req.train_domain.clone(),
            known_devices: req.known_devices.clone(),
            cells,
            vanilla,
        },
        params,
        vanilla_params,
    })
}

enum Calibrated {
    Single(CalibrationTable),
    Multi(crate::calibrate::MultiCalibration),
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per cell per metric per trial. Averages live in the JSON
/// summary, not here.
pub fn matrix_to_csv(matrix: &ExperimentMatrix) -> String {
    let mut out = String::from("calibrate,test,model,trial,metric,value\n");
    for cell in &matrix.cells {
        let cal = csv_field(&cell.calibrate_domains.join("+"));
        let test = csv_field(&cell.test_domain);
        for (t, m) in cell.metrics.per_trial.iter().enumerate() {
            out.push_str(&format!("{cal},{test},tweak,{t},auroc,{}\n", m.auroc));
            out.push_str(&format!("{cal},{test},tweak,{t},tpr,{}\n", opt_cell(m.tpr)));
            out.push_str(&format!("{cal},{test},tweak,{t},fpr,{}\n", opt_cell(m.fpr)));
        }
    }
    for cell in &matrix.vanilla {
        let test = csv_field(&cell.test_domain);
        for (t, v) in cell.per_trial.iter().enumerate() {
            out.push_str(&format!(",{test},vanilla,{t},auroc,{v}\n"));
        }
    }
    out
}

pub fn write_matrix_csv(matrix: &ExperimentMatrix, path: &Path) -> Result<()> {
    write_atomic(path, matrix_to_csv(matrix).as_bytes())
}

/// The matrix with averages, as pretty JSON.
pub fn write_matrix_summary(matrix: &ExperimentMatrix, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(matrix).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
