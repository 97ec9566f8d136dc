//! Experiment configuration: a TOML file naming the roster, the domains to
//! train/calibrate/test on, and any hyperparameter overrides. Every field
//! has a default mirroring the reference recipe, so a minimal config is
//! just a roster path and a train domain.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tweak_core::prelude::*;

/// Calibration size: a per-device count, or a percentage string resolved
/// against the per-device frame count of the dataset being calibrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizeSpec {
    Absolute(usize),
    Fraction(f64),
}

impl SizeSpec {
    /// Parse `"80"`, `80`, or `"10%"`.
    pub fn parse(text: &str) -> Result<SizeSpec> {
        let text = text.trim();
        if let Some(pct) = text.strip_suffix('%') {
            let v: f64 = pct
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad percentage: {text:?}")))?;
            if !(v > 0.0 && v <= 100.0) {
                return Err(Error::InvalidInput(format!(
                    "calibration percentage must be in (0, 100], got {text:?}"
                )));
            }
            Ok(SizeSpec::Fraction(v / 100.0))
        } else {
            let n: usize = text
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad calibration size: {text:?}")))?;
            if n == 0 {
                return Err(Error::InvalidInput("calibration size must be >= 1".into()));
            }
            Ok(SizeSpec::Absolute(n))
        }
    }

    pub fn to_calibration_size(self) -> CalibrationSize {
        match self {
            SizeSpec::Absolute(n) => CalibrationSize::Absolute(n),
            SizeSpec::Fraction(f) => CalibrationSize::FractionOfTrain(f),
        }
    }

    /// Examples per device when drawing from a dataset with
    /// `per_device` frames per device.
    pub fn resolve(self, per_device: usize) -> usize {
        match self {
            SizeSpec::Absolute(n) => n,
            SizeSpec::Fraction(f) => ((per_device as f64 * f).floor() as usize).max(1),
        }
    }
}

impl<'de> Deserialize<'de> for SizeSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<SizeSpec, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Int(n) => SizeSpec::parse(&n.to_string()).map_err(serde::de::Error::custom),
            Raw::Text(s) => SizeSpec::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// Optional overrides of [`NetworkConfig`]; unset fields keep the
/// reference architecture.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub conv_blocks: Option<Vec<(usize, usize)>>,
    pub pool_size: Option<usize>,
    pub fc_hidden: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub leaky_slope: Option<f64>,
}

impl NetworkSection {
    pub fn build(&self) -> NetworkConfig {
        let mut net = NetworkConfig::default();
        if let Some(v) = &self.conv_blocks {
            net.conv_blocks = v.clone();
        }
        if let Some(v) = self.pool_size {
            net.pool_size = v;
        }
        if let Some(v) = self.fc_hidden {
            net.fc_hidden = v;
        }
        if let Some(v) = self.embedding_dim {
            net.embedding_dim = v;
        }
        if let Some(v) = self.leaky_slope {
            net.leaky_slope = v;
        }
        net
    }
}

/// Optional overrides of [`TrainConfig`]; unset fields keep the reference
/// recipe (margin 0.1, SGD momentum 0.9, batch 64, 100 epochs).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub margin: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub devices_per_batch: Option<usize>,
    pub epochs: Option<usize>,
    pub validation_fraction: Option<f64>,
    /// Tune the learning rate over the built-in grid before the full run.
    #[serde(default)]
    pub tune_lr: bool,
    /// Epoch budget per grid point during tuning (default 5).
    pub tune_epochs: Option<usize>,
}

impl TrainSection {
    pub fn build(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(v) = self.margin {
            cfg.margin = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.devices_per_batch {
            cfg.devices_per_batch = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.validation_fraction {
            cfg.validation_fraction = v;
        }
        cfg
    }
}

/// The `[evaluate]` section: matrix layout and trial shape.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Calibration cells; each inner list is one merged multi-domain
    /// calibration. Default: the train domain alone.
    pub calibrate_cells: Option<Vec<Vec<String>>>,
    /// Test domains. Default: the train domain alone.
    pub test_domains: Option<Vec<String>>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_batches_per_device")]
    pub batches_per_device: usize,
    #[serde(default = "default_sampled")]
    pub n_known_sampled: usize,
    #[serde(default = "default_sampled")]
    pub n_unknown_sampled: usize,
    /// Also train and score the cross-entropy max-logit baseline.
    #[serde(default)]
    pub vanilla: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            calibrate_cells: None,
            test_domains: None,
            trials: default_trials(),
            batches_per_device: default_batches_per_device(),
            n_known_sampled: default_sampled(),
            n_unknown_sampled: default_sampled(),
            vanilla: false,
        }
    }
}

fn default_trials() -> usize {
    5
}
fn default_batches_per_device() -> usize {
    20
}
fn default_sampled() -> usize {
    5
}
fn default_frames_per_device() -> usize {
    800
}
fn default_train_fraction() -> f64 {
    0.75
}
fn default_m() -> usize {
    DEFAULT_DECISION_BATCH
}
fn default_n() -> SizeSpec {
    SizeSpec::Fraction(0.10)
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// The whole experiment file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Roster JSON (devices + domains), relative to the config file.
    pub roster: PathBuf,
    /// Output directory, relative to the current directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frames_per_device")]
    pub frames_per_device: usize,
    /// Domain the model trains on.
    pub train_domain: String,
    /// Devices the model trains on; all others act as unknowns.
    pub known_devices: Vec<u32>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Frames averaged per decision (M).
    #[serde(default = "default_m")]
    pub m: usize,
    /// Calibration examples per device, absolute or percentage.
    #[serde(default = "default_n")]
    pub n: SizeSpec,
    /// Give each device a random payload instead of the shared message.
    #[serde(default)]
    pub randomize_payload: bool,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

impl ExperimentConfig {
    /// Load a config file and resolve the roster path against its
    /// directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.roster.is_relative() {
            cfg.roster = base.join(&cfg.roster);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.known_devices.len() < 2 {
            return Err(Error::InvalidInput(
                "config needs at least 2 known_devices".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "train_fraction must be in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("m must be >= 1".into()));
        }
        if self.frames_per_device == 0 {
            return Err(Error::InvalidInput("frames_per_device must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_roster(&self) -> Result<Roster> {
        let roster = Roster::load(&self.roster)?;
        if roster.devices.is_empty() || roster.domains.is_empty() {
            return Err(Error::InvalidInput(format!(
                "roster {} needs at least one device and one domain",
                self.roster.display()
            )));
        }
        Ok(roster)
    }

    /// Directory holding one domain's synthesized recordings.
    pub fn domain_dir(&self, domain_id: &str) -> PathBuf {
        self.out_dir.join("data").join(domain_id)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoints").join("tweak.json")
    }

    pub fn vanilla_checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoints").join("vanilla.json")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.out_dir.join("results")
    }
}
