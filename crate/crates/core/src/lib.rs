//! Open-set RF device authentication on raw IQ frames.
//!
//! Transmitters carry hardware imperfections (oscillator offset, IQ
//! imbalance, amplifier nonlinearity) that imprint on everything they emit.
//! This crate learns a metric embedding of short IQ frames in which frames
//! from the same transmitter cluster together, then authenticates devices
//! with per-device centroids and admit/reject radii, so transmitters never
//! seen during training are rejected rather than misclassified.
//!
//! # Blocks
//!
//! - [`signal_io`]: raw IQ capture files, 2x128 framing, dataset splits.
//! - [`synth_rf`]: synthetic LoRa transmitters, channels, and receivers for
//!   controlled experiments.
//! - [`embed_net`]: the convolutional embedding network, triplet mining and
//!   loss, and the training loop.
//! - [`calibrate`]: per-device centroid and radius estimation from a small
//!   enrollment sample.
//! - [`decide`]: admit/reject decisions for frame batches against a
//!   calibration table.
//! - [`eval_harness`]: TPR/FPR/AUROC measurement, multi-trial protocols,
//!   and portability matrices across domains.
//!
//! # Example
//!
//! Synthesize a tiny testbed, train an embedding, calibrate two devices,
//! and decide a batch:
//!
//! ```no_run
//! use tweak_core::prelude::*;
//!
//! let roster = Roster::example(4);
//! let ds = synth_dataset(&roster.devices, &roster.domains[0], 64, 0xC0FFEE)?;
//! let (train_set, test_set) = split_dataset(&ds, 0.75, SplitMode::Contiguous)?;
//! let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
//! let init = init_network(&NetworkConfig::default(), cfg.seed)?;
//! let outcome = train(&init, &train_set, &cfg)?;
//! let point = forward(&outcome.params, &test_set.frames[0])?;
//! println!("{:?}", point.0);
//! # Ok::<(), tweak_core::Error>(())
//! ```

pub mod calibrate;
pub mod decide;
pub mod embed_net;
pub mod error;
pub mod eval_harness;
pub mod io_util;
pub mod seeds;
pub mod signal_io;
pub mod synth_rf;

pub use error::{Error, Result};

/// The commonly used types and functions in one import.
pub mod prelude {
    pub use crate::calibrate::{
        calibrate, calibration_cost, merge_calibrations, model_version, CalibrationSpec,
        CalibrationTable, DeviceCalibration, MultiCalibration, RadiusRule, Selection,
    };
    pub use crate::decide::{
        decision_score, input_point, open_set_decide, read_decisions_jsonl,
        write_decisions_jsonl, CalibrationSource, Decision, DecisionRecord, InputBatch, Verdict,
        DEFAULT_DECISION_BATCH,
    };
    pub use crate::embed_net::loss::{batch_hinge_mean, mine_triplets, triplet_loss};
    pub use crate::eval_harness::{
        auroc, avg_over_trials, fpr, matrix_to_csv, run_matrix, run_trial, run_vanilla_trial,
        tpr, write_matrix_csv, write_matrix_summary, CalibrationSize, ConfusionCounts,
        ExperimentMatrix, MatrixCell, MatrixOutput, MatrixRequest, TrialAverages, TrialMetrics,
        TrialResult, TrialSpec, VanillaCell,
    };
    pub use crate::embed_net::train::{
        train, train_vanilla, tune_learning_rate, TrainConfig, TrainOutcome,
    };
    pub use crate::embed_net::{
        forward, forward_batch, init_network, load_checkpoint, save_checkpoint, Checkpoint,
        EmbeddingPoint, ForwardMode, NetworkConfig, Parameters,
    };
    pub use crate::error::{Error, Result};
    pub use crate::signal_io::{
        frame_recording, load_raw_iq, normalize_frame, save_raw_iq, split_dataset, FrameExample,
        IQRecording, LabeledDataset, NormalizeMode, SplitMode, FRAME_LEN,
    };
    pub use crate::synth_rf::{
        apply_channel, apply_impairments, apply_receiver, gen_lora_baseband,
        sample_device_impairments, synth_dataset, synth_dataset_with, synth_recordings,
        synth_recordings_with, ChannelProfile, Complex64,
        DeviceImpairment, DomainSpec, LoRaConfig, MultipathTap, ReceiverProfile, Roster,
        SynthOptions,
    };
}
