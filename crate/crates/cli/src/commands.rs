//! The six pipeline commands. Each one is a thin orchestration layer over
//! the core crate: filesystem layout, config resolution, and progress
//! reporting live here; the algorithms do not.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tweak_core::io_util::write_atomic;
use tweak_core::prelude::*;
use tweak_core::seeds;
use tweak_core::signal_io::{
    load_dataset_from_manifest, read_sidecar, write_manifest, write_sidecar, ManifestEntry,
    RecordingMeta,
};

use crate::config::{ExperimentConfig, SizeSpec};

/// Synthesize every domain in the roster into raw IQ files plus manifests.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let roster = cfg.load_roster()?;
    let options = SynthOptions {
        randomize_payload: cfg.randomize_payload,
    };
    for domain in &roster.domains {
        let started = Instant::now();
        let dir = cfg.domain_dir(&domain.domain_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut recordings = synth_recordings_with(
            &roster.devices,
            domain,
            cfg.frames_per_device,
            cfg.seed,
            options,
        )?;
        let mut entries = Vec::with_capacity(recordings.len());
        for rec in &mut recordings {
            // Keep exactly the frames the dataset will use, so the files
            // and the manifest agree on the frame count.
            rec.samples.truncate(cfg.frames_per_device * FRAME_LEN);
            let name = format!("device{:03}.iq", rec.device_id);
            let iq_path = dir.join(&name);
            save_raw_iq(rec, &iq_path)?;
            write_sidecar(
                &iq_path,
                &RecordingMeta {
                    device_id: rec.device_id,
                    domain_id: rec.domain_id.clone(),
                    sample_rate_hz: rec.sample_rate_hz,
                    center_frequency_hz: None,
                    lora_config: Some(
                        serde_json::to_value(&domain.lora)
                            .map_err(|e| Error::json(&iq_path, e))?,
                    ),
                    notes: None,
                },
            )?;
            entries.push(ManifestEntry {
                path: name,
                device_id: rec.device_id,
                domain_id: rec.domain_id.clone(),
            });
        }
        write_manifest(dir.join("manifest.json"), &entries)?;
        println!(
            "synth domain {}: {} devices x {} frames -> {} ({:.1?})",
            domain.domain_id,
            roster.devices.len(),
            cfg.frames_per_device,
            dir.display(),
            started.elapsed()
        );
    }
    Ok(())
}

/// Load one domain's dataset from its manifest directory.
fn load_domain(cfg: &ExperimentConfig, domain_id: &str) -> Result<LabeledDataset> {
    let manifest = cfg.domain_dir(domain_id).join("manifest.json");
    if !manifest.exists() {
        return Err(Error::InvalidInput(format!(
            "no dataset for domain {domain_id} at {} (run `tweak synth` first)",
            manifest.display()
        )));
    }
    load_dataset_from_manifest(&manifest, FRAME_LEN, FRAME_LEN)
}

/// The slice of a domain the model may learn from: known devices only,
/// first `train_fraction` of each device's frames.
fn enrollment_split(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<LabeledDataset> {
    let known = ds.restrict_to(&cfg.known_devices)?;
    let (enroll, _) = split_dataset(&known, cfg.train_fraction, SplitMode::Contiguous)?;
    Ok(enroll)
}

/// Train the twin model (and optionally the cross-entropy baseline) on the
/// train domain's enrollment split.
pub fn cmd_train(cfg: &ExperimentConfig, baseline: Option<&str>) -> Result<()> {
    let vanilla = match baseline {
        None => false,
        Some("vanilla") => true,
        Some(other) => {
            return Err(Error::InvalidInput(format!(
                "unknown baseline {other:?}; the only baseline is \"vanilla\""
            )))
        }
    };
    let ds = load_domain(cfg, &cfg.train_domain)?;
    let train_set = enrollment_split(cfg, &ds)?;
    let network = cfg.network.build();

    let mut train_cfg = cfg.train.build(seeds::derive_seed(cfg.seed, "train"));
    let init = init_network(&network, train_cfg.seed)?;
    if cfg.train.tune_lr {
        let probe_epochs = cfg.train.tune_epochs.or(Some(5));
        let (rate, probes) = tune_learning_rate(&init, &train_set, &train_cfg, probe_epochs)?;
        for p in &probes {
            println!(
                "lr {:>8.0e}: {}",
                p.rate,
                if p.diverged {
                    "diverged".to_string()
                } else {
                    format!("val {:?}", p.best_val_loss)
                }
            );
        }
        println!("tuned learning rate: {rate:e}");
        train_cfg.learning_rate = rate;
    }

    let started = Instant::now();
    let outcome = train(&init, &train_set, &train_cfg)?;
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(
        &Checkpoint {
            params: outcome.params,
            history: outcome.history,
        },
        &path,
    )?;
    println!(
        "trained {} epochs on {} frames (best epoch {:?}, val loss {:?}) -> {} ({:.1?})",
        train_cfg.epochs,
        train_set.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        path.display(),
        started.elapsed()
    );

    if vanilla {
        let vanilla_net = NetworkConfig {
            embedding_dim: cfg.known_devices.len(),
            ..network
        };
        let vanilla_cfg = TrainConfig {
            seed: seeds::derive_seed(cfg.seed, "vanilla-train"),
            ..train_cfg
        };
        let vanilla_init = init_network(&vanilla_net, vanilla_cfg.seed)?;
        let outcome = train_vanilla(&vanilla_init, &train_set, &vanilla_cfg)?;
        let path = cfg.vanilla_checkpoint_path();
        save_checkpoint(
            &Checkpoint {
                params: outcome.params,
                history: outcome.history,
            },
            &path,
        )?;
        println!("trained vanilla baseline -> {}", path.display());
    }
    Ok(())
}

/// Build a calibration table for each named domain; optionally merge them
/// into one multi-domain file.
pub fn cmd_calibrate(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    domains: &[String],
    n_override: Option<SizeSpec>,
    merge: bool,
    out: Option<&Path>,
) -> Result<()> {
    let domains: Vec<String> = if domains.is_empty() {
        vec![cfg.train_domain.clone()]
    } else {
        domains.to_vec()
    };
    if merge && domains.len() < 2 {
        return Err(Error::InvalidInput(
            "--merge needs at least two --domain values".into(),
        ));
    }
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.checkpoint_path());
    let params = load_checkpoint(&ckpt_path)?.params;
    let n_spec = n_override.unwrap_or(cfg.n);

    let cal_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("calibrations"));
    std::fs::create_dir_all(&cal_dir).map_err(|e| Error::io(&cal_dir, e))?;

    let mut tables = Vec::new();
    for domain in &domains {
        let ds = load_domain(cfg, domain)?;
        let enroll = enrollment_split(cfg, &ds)?;
        let per_device = enroll.len() / enroll.device_ids.len();
        let n = n_spec.resolve(per_device);
        let table = calibrate(&params, &enroll, &CalibrationSpec::first_n(n))?;
        let path = cal_dir.join(format!("{domain}.json"));
        table.save(&path)?;
        println!(
            "calibrated domain {domain}: {} devices, n_used={n} -> {}",
            table.entries.len(),
            path.display()
        );
        tables.push(table);
    }
    if merge {
        let multi = merge_calibrations(tables)?;
        let name = format!("multi-{}.json", domains.join("-"));
        let path = cal_dir.join(name);
        multi.save(&path)?;
        println!("merged {} tables -> {}", domains.len(), path.display());
    }
    Ok(())
}

/// A calibration file is either one table or a merged multi-domain set.
enum AnyCalibration {
    Single(CalibrationTable),
    Multi(MultiCalibration),
}

impl AnyCalibration {
    fn load(path: &Path) -> Result<AnyCalibration> {
        match CalibrationTable::load(path) {
            Ok(t) => Ok(AnyCalibration::Single(t)),
            Err(first) => MultiCalibration::load(path)
                .map(AnyCalibration::Multi)
                .map_err(|_| first),
        }
    }

    fn model_version(&self) -> &str {
        match self {
            AnyCalibration::Single(t) => &t.model_version,
            AnyCalibration::Multi(m) => &m.tables[0].model_version,
        }
    }

    fn decide(&self, point: &EmbeddingPoint) -> Result<Decision> {
        match self {
            AnyCalibration::Single(t) => open_set_decide(point, t),
            AnyCalibration::Multi(m) => open_set_decide(point, m),
        }
    }
}

/// Decide admit/reject for consecutive batches of M frames from one raw IQ
/// capture.
pub fn cmd_decide(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    calibration: &Path,
    input: &Path,
    m_override: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.checkpoint_path());
    let params = load_checkpoint(&ckpt_path)?.params;
    let cal = AnyCalibration::load(calibration)?;
    let expected = tweak_core::calibrate::model_version(&params);
    if cal.model_version() != expected {
        return Err(Error::CalibrationMismatch(format!(
            "calibration was built by model {} but the checkpoint is {}",
            cal.model_version(),
            expected
        )));
    }

    let meta = read_sidecar(input)?;
    let rec = load_raw_iq(input, meta.sample_rate_hz, meta.device_id, &meta.domain_id)?;
    let frames = tweak_core::signal_io::frame_recording(&rec, FRAME_LEN, FRAME_LEN)?;
    let m = m_override.unwrap_or(cfg.m);
    if frames.len() < m {
        return Err(Error::InvalidInput(format!(
            "input has {} frames but one decision needs M={m}",
            frames.len()
        )));
    }

    let true_known = cfg.known_devices.contains(&meta.device_id);
    let mut records = Vec::new();
    for batch_frames in frames.chunks_exact(m) {
        let refs: Vec<&FrameExample> = batch_frames.iter().collect();
        let batch = InputBatch::new(&refs)?;
        let point = input_point(&params, &batch)?;
        let decision = cal.decide(&point)?;
        records.push(DecisionRecord {
            true_device: meta.device_id,
            true_known,
            verdict: decision.verdict,
            matched_device: decision.matched_device,
            score: decision.score,
        });
    }
    let admitted = records.iter().filter(|r| r.verdict == Verdict::Admit).count();
    match out {
        Some(path) => {
            write_decisions_jsonl(path, &records)?;
            println!(
                "decided {} batches of M={m}: {admitted} admitted -> {}",
                records.len(),
                path.display()
            );
        }
        None => {
            for r in &records {
                println!(
                    "{}",
                    serde_json::to_string(r)
                        .map_err(|e| Error::json(Path::new("stdout"), e))?
                );
            }
        }
    }
    Ok(())
}

/// Run the full portability matrix and write CSV/JSON results plus the
/// trained checkpoints.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let started = Instant::now();
    let cells = cfg
        .evaluate
        .calibrate_cells
        .clone()
        .unwrap_or_else(|| vec![vec![cfg.train_domain.clone()]]);
    let tests = cfg
        .evaluate
        .test_domains
        .clone()
        .unwrap_or_else(|| vec![cfg.train_domain.clone()]);

    let mut datasets = BTreeMap::new();
    for domain in std::iter::once(&cfg.train_domain)
        .chain(cells.iter().flatten())
        .chain(tests.iter())
    {
        if !datasets.contains_key(domain) {
            datasets.insert(domain.clone(), load_domain(cfg, domain)?);
        }
    }

    let req = MatrixRequest {
        train_domain: cfg.train_domain.clone(),
        calibrate_cells: cells,
        test_domains: tests,
        known_devices: cfg.known_devices.clone(),
        network: cfg.network.build(),
        train_cfg: cfg.train.build(0),
        train_fraction: cfg.train_fraction,
        calibration_size: cfg.n.to_calibration_size(),
        trials: cfg.evaluate.trials,
        batches_per_device: cfg.evaluate.batches_per_device,
        decision_batch: cfg.m,
        n_known_sampled: cfg.evaluate.n_known_sampled,
        n_unknown_sampled: cfg.evaluate.n_unknown_sampled,
        include_vanilla: cfg.evaluate.vanilla,
        seed: cfg.seed,
    };
    let output = run_matrix(&datasets, &req)?;

    let results = cfg.results_dir();
    std::fs::create_dir_all(&results).map_err(|e| Error::io(&results, e))?;
    write_matrix_csv(&output.matrix, &results.join("matrix.csv"))?;
    write_matrix_summary(&output.matrix, &results.join("matrix.json"))?;
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    save_checkpoint(
        &Checkpoint {
            params: output.params,
            history: vec![],
        },
        cfg.checkpoint_path(),
    )?;
    if let Some(vanilla) = output.vanilla_params {
        save_checkpoint(
            &Checkpoint {
                params: vanilla,
                history: vec![],
            },
            cfg.vanilla_checkpoint_path(),
        )?;
    }

    for cell in &output.matrix.cells {
        println!(
            "cal [{}] test {}: auroc {:.4} tpr {:?} fpr {:?}",
            cell.calibrate_domains.join("+"),
            cell.test_domain,
            cell.metrics.avg_auroc,
            cell.metrics.avg_tpr,
            cell.metrics.avg_fpr,
        );
    }
    for v in &output.matrix.vanilla {
        println!("vanilla test {}: auroc {:.4}", v.test_domain, v.avg_auroc);
    }
    println!(
        "evaluate -> {} ({:.1?})",
        results.join("matrix.csv").display(),
        started.elapsed()
    );
    Ok(())
}

/// Merge matrix CSVs from several runs into one table keyed by run id.
pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::InvalidInput("report needs at least one run directory".into()));
    }
    let mut merged = String::new();
    let mut header_done = false;
    for dir in dirs {
        let csv_path = if dir.join("matrix.csv").exists() {
            dir.join("matrix.csv")
        } else {
            dir.join("results").join("matrix.csv")
        };
        let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let run_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("{} is empty", csv_path.display())))?;
        if !header_done {
            merged.push_str("run_id,");
            merged.push_str(header);
            merged.push('\n');
            header_done = true;
        }
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            merged.push_str(&run_id);
            merged.push(',');
            merged.push_str(line);
            merged.push('\n');
        }
    }
    match out {
        Some(path) => {
            write_atomic(path, merged.as_bytes())?;
            println!("report -> {}", path.display());
        }
        None => print!("{merged}"),
    }
    Ok(())
}
