//! End-to-end pipeline runs of the `tweak` binary against a tiny synthetic
//! roster: every subcommand once, plus determinism and failure-path checks.

use std::path::Path;
use std::process::{Command, Output};

use tweak_core::prelude::*;

fn tweak() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tweak"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tweak");
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn run_err(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tweak");
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded\nstdout:\n{}",
        String::from_utf8_lossy(&out.stdout),
    );
    out
}

/// Three devices, domain `a` plus a receiver-shifted domain `b`.
fn write_roster(path: &Path) {
    let lora = LoRaConfig {
        spreading_factor: 7,
        bandwidth_hz: 125_000.0,
        sample_rate_hz: 500_000.0,
        config_id: 1,
    };
    let roster = Roster {
        devices: sample_device_impairments(3, 5),
        domains: vec![
            DomainSpec {
                domain_id: "a".into(),
                lora,
                channel: ChannelProfile {
                    snr_db: 20.0,
                    multipath_taps: vec![MultipathTap {
                        delay: 0,
                        gain: Complex64::new(1.0, 0.0),
                    }],
                    seed: 11,
                },
                receiver: ReceiverProfile::none(12),
            },
            DomainSpec {
                domain_id: "b".into(),
                lora,
                channel: ChannelProfile {
                    snr_db: 20.0,
                    multipath_taps: vec![MultipathTap {
                        delay: 0,
                        gain: Complex64::new(1.0, 0.0),
                    }],
                    seed: 11,
                },
                receiver: ReceiverProfile {
                    lo_offset_hz: 2_000.0,
                    gain_db: 3.5,
                    dc_offset: Complex64::new(0.01, 0.0),
                    seed: 13,
                },
            },
        ],
    };
    roster.save(path).unwrap();
}

fn write_config(path: &Path, out_dir: &str, epochs: usize) {
    let text = format!(
        r#"
roster = "roster.json"
out_dir = "{out_dir}"
seed = 9
frames_per_device = 60
train_domain = "a"
known_devices = [0, 1]
train_fraction = 0.75
m = 5
n = "10%"

[network]
conv_blocks = [[8, 5], [8, 3]]
fc_hidden = 16
embedding_dim = 4

[train]
epochs = {epochs}
batch_size = 16
devices_per_batch = 2

[evaluate]
trials = 2
batches_per_device = 2
n_known_sampled = 2
n_unknown_sampled = 1
vanilla = true
calibrate_cells = [["a"], ["b"]]
test_domains = ["a", "b"]
"#
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_roster(&root.join("roster.json"));
    write_config(&root.join("config.toml"), "run1", 1);
    let config = root.join("config.toml");

    // synth: both domains, manifest plus sidecars per device
    run_ok(tweak().current_dir(root).args(["synth", "--config", "config.toml"]));
    for domain in ["a", "b"] {
        let ddir = root.join("run1/data").join(domain);
        assert!(ddir.join("manifest.json").exists());
        for dev in 0..3 {
            let iq = ddir.join(format!("device{dev:03}.iq"));
            assert!(iq.exists());
            assert!(ddir.join(format!("device{dev:03}.iq.meta.json")).exists());
            // 60 frames of 128 complex samples as interleaved f32 pairs
            assert_eq!(std::fs::metadata(&iq).unwrap().len(), 60 * 128 * 8);
        }
    }

    // synth determinism: a second run elsewhere produces identical bytes
    run_ok(tweak().current_dir(root).args([
        "synth", "--config", "config.toml", "--out", "run2",
    ]));
    let bytes1 = std::fs::read(root.join("run1/data/a/device000.iq")).unwrap();
    let bytes2 = std::fs::read(root.join("run2/data/a/device000.iq")).unwrap();
    assert_eq!(bytes1, bytes2);

    // train: twin checkpoint plus the vanilla baseline
    run_ok(tweak().current_dir(root).args([
        "train", "--config", "config.toml", "--baseline", "vanilla",
    ]));
    let ckpt = load_checkpoint(&root.join("run1/checkpoints/tweak.json")).unwrap();
    assert_eq!(ckpt.params.config.embedding_dim, 4);
    assert_eq!(ckpt.history.len(), 1);
    let vanilla = load_checkpoint(&root.join("run1/checkpoints/vanilla.json")).unwrap();
    // one logit per known device
    assert_eq!(vanilla.params.config.embedding_dim, 2);

    // calibrate both domains and merge them
    run_ok(tweak().current_dir(root).args([
        "calibrate", "--config", "config.toml",
        "--domain", "a", "--domain", "b", "--merge",
    ]));
    let table = CalibrationTable::load(&root.join("run1/calibrations/a.json")).unwrap();
    assert_eq!(table.entries.len(), 2);
    // n = 10% of the 45-frame per-device training split
    assert!(table.entries.iter().all(|e| e.n_used == 4));
    let multi = MultiCalibration::load(&root.join("run1/calibrations/multi-a-b.json")).unwrap();
    assert_eq!(multi.tables.len(), 2);

    // calibration size beyond the available frames is an error
    run_err(tweak().current_dir(root).args([
        "calibrate", "--config", "config.toml", "--n", "1000",
    ]));

    // decide on an unknown device's capture: 60 frames / M=5 -> 12 batches
    run_ok(tweak().current_dir(root).args([
        "decide", "--config", "config.toml",
        "--calibration", "run1/calibrations/a.json",
        "--input", "run1/data/a/device002.iq",
        "--out", "decisions.jsonl",
    ]));
    let records = read_decisions_jsonl(&root.join("decisions.jsonl")).unwrap();
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r.true_device == 2 && !r.true_known));

    // decide without --out streams the same records to stdout
    let out = run_ok(tweak().current_dir(root).args([
        "decide", "--config", "config.toml",
        "--calibration", "run1/calibrations/a.json",
        "--input", "run1/data/a/device002.iq",
    ]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 12);

    // a capture shorter than one batch is an error
    run_err(tweak().current_dir(root).args([
        "decide", "--config", "config.toml",
        "--calibration", "run1/calibrations/a.json",
        "--input", "run1/data/a/device002.iq",
        "--m", "100",
    ]));

    // evaluate: 2x2 matrix with the vanilla column
    let out = run_ok(tweak().current_dir(root).args(["evaluate", "--config", "config.toml"]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("cal [a] test a:"), "stdout:\n{stdout}");
    assert!(stdout.contains("cal [b] test b:"));
    assert!(stdout.contains("vanilla test a:"));
    let csv = std::fs::read_to_string(root.join("run1/results/matrix.csv")).unwrap();
    // header + 2 cells x 2 tests x 2 trials x 3 metrics + 2 tests x 2 vanilla trials
    assert_eq!(csv.lines().count(), 1 + 24 + 4);
    assert!(root.join("run1/results/matrix.json").exists());

    // evaluate again in place: bit-identical results
    run_ok(tweak().current_dir(root).args(["evaluate", "--config", "config.toml"]));
    let csv_again = std::fs::read_to_string(root.join("run1/results/matrix.csv")).unwrap();
    assert_eq!(csv, csv_again);

    // a second full run for the report to merge
    run_ok(tweak().current_dir(root).args([
        "evaluate", "--config", "config.toml", "--out", "run2",
    ]));
    run_ok(tweak().current_dir(root).args([
        "report", "run1", "run2", "--out", "merged.csv",
    ]));
    let merged = std::fs::read_to_string(root.join("merged.csv")).unwrap();
    let mut lines = merged.lines();
    assert_eq!(lines.next().unwrap(), "run_id,calibrate,test,model,trial,metric,value");
    assert_eq!(merged.lines().count(), 1 + 2 * 28);
    assert!(merged.lines().skip(1).all(|l| l.starts_with("run1,") || l.starts_with("run2,")));

    // report to stdout and on a missing directory
    let out = run_ok(tweak().current_dir(root).args(["report", "run1"]));
    assert!(String::from_utf8(out.stdout).unwrap().lines().count() > 1);
    run_err(tweak().current_dir(root).args(["report", "no-such-run"]));
}

#[test]
fn smoke_run_with_zero_epochs_emits_valid_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_roster(&root.join("roster.json"));
    write_config(&root.join("smoke.toml"), "smoke", 0);
    run_ok(tweak().current_dir(root).args(["synth", "--config", "smoke.toml"]));
    run_ok(tweak().current_dir(root).args(["train", "--config", "smoke.toml"]));
    let ckpt = load_checkpoint(&root.join("smoke/checkpoints/tweak.json")).unwrap();
    assert_eq!(ckpt.params.config.embedding_dim, 4);
    assert!(ckpt.history.is_empty());
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // missing config file
    run_err(tweak().current_dir(root).args(["synth", "--config", "nope.toml"]));
    // config is required for pipeline commands
    run_err(tweak().current_dir(root).args(["synth"]));
    // malformed worker override
    write_roster(&root.join("roster.json"));
    write_config(&root.join("config.toml"), "run", 0);
    run_err(
        tweak()
            .current_dir(root)
            .env("TWEAK_WORKERS", "zero")
            .args(["synth", "--config", "config.toml"]),
    );
    run_ok(
        tweak()
            .current_dir(root)
            .env("TWEAK_WORKERS", "1")
            .args(["synth", "--config", "config.toml"]),
    );
}
