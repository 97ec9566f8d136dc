//! Synthetic LoRa-like testbed: transmitters, channels, receivers.
//!
//! Portability experiments need datasets where one factor changes at a
//! time. Real captures can't hold the other factors still, so this module
//! synthesizes them: chirp-spread-spectrum baseband (the LoRa modulation),
//! per-device hardware impairments that act as fingerprints, a multipath
//! plus AWGN channel, and receiver front-end effects. Domains differ by
//! receiver (hardware portability), by channel (channel portability), or
//! by chirp configuration (configuration portability).
//!
//! Every stage is deterministic given its seed, so a dataset regenerates
//! bit-identically from its roster file.
//!
//! The signal chain, in fixed order:
//!
//! ```text
//! chirps -> impairments (IQ imbalance, CFO, phase noise, DC)
//!        -> channel (multipath, AWGN)
//!        -> receiver (gain, LO offset, DC)
//!        -> framing (signal_io)
//! ```

pub use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::seeds;
use crate::signal_io::{frame_recording, IQRecording, LabeledDataset, FRAME_LEN};

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

/// Chirp-spread-spectrum modulation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoRaConfig {
    /// Spreading factor, 7 through 12. One symbol carries 2^SF chips.
    pub spreading_factor: u32,
    pub bandwidth_hz: f64,
    pub sample_rate_hz: f64,
    /// Identifies the transmitter configuration in experiment outputs.
    pub config_id: u32,
}

impl LoRaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(7..=12).contains(&self.spreading_factor) {
            return Err(Error::InvalidInput(format!(
                "spreading factor must be 7..=12, got {}",
                self.spreading_factor
            )));
        }
        if !(self.bandwidth_hz > 0.0) || !(self.sample_rate_hz >= self.bandwidth_hz) {
            return Err(Error::InvalidInput(format!(
                "need 0 < bandwidth ({}) <= sample rate ({})",
                self.bandwidth_hz, self.sample_rate_hz
            )));
        }
        Ok(())
    }

    /// Symbol duration 2^SF / BW in seconds.
    pub fn symbol_duration_s(&self) -> f64 {
        (1u64 << self.spreading_factor) as f64 / self.bandwidth_hz
    }

    /// Samples per symbol at this sample rate.
    pub fn samples_per_symbol(&self) -> usize {
        (self.symbol_duration_s() * self.sample_rate_hz).round() as usize
    }
}

/// Hardware imperfections of one transmitter; the device fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceImpairment {
    /// Carrier frequency offset in Hz.
    pub cfo_hz: f64,
    pub iq_gain_imbalance_db: f64,
    pub iq_phase_imbalance_rad: f64,
    /// Additive DC term, serialized as `[re, im]`.
    pub dc_offset: Complex64,
    /// Per-sample standard deviation of the phase random walk.
    pub phase_noise_std_rad: f64,
    /// Seeds the phase-noise walk.
    pub seed: u64,
}

impl DeviceImpairment {
    /// The all-zero impairment: applying it is the identity.
    pub fn none(seed: u64) -> Self {
        Self {
            cfo_hz: 0.0,
            iq_gain_imbalance_db: 0.0,
            iq_phase_imbalance_rad: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            phase_noise_std_rad: 0.0,
            seed,
        }
    }

    /// Check the plausibility bounds enforced when building datasets:
    /// gain imbalance within 3 dB, CFO within a quarter of the bandwidth,
    /// nonnegative phase-noise step.
    pub fn validate(&self, bandwidth_hz: f64) -> Result<()> {
        if self.iq_gain_imbalance_db.abs() > 3.0 {
            return Err(Error::InvalidInput(format!(
                "IQ gain imbalance {} dB exceeds 3 dB",
                self.iq_gain_imbalance_db
            )));
        }
        if self.cfo_hz.abs() > bandwidth_hz / 4.0 {
            return Err(Error::InvalidInput(format!(
                "CFO {} Hz exceeds bandwidth/4 = {} Hz",
                self.cfo_hz,
                bandwidth_hz / 4.0
            )));
        }
        if !(self.phase_noise_std_rad >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "phase-noise std must be nonnegative, got {}",
                self.phase_noise_std_rad
            )));
        }
        Ok(())
    }
}

/// One multipath echo: a complex gain at an integer sample delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipathTap {
    pub delay: usize,
    /// Serialized as `[re, im]`.
    pub gain: Complex64,
}

/// Propagation between transmitter and receiver: multipath echoes followed
/// by additive white Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    /// Signal-to-noise ratio in dB; `f64::INFINITY` (JSON `null`) disables
    /// the noise stage.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    pub multipath_taps: Vec<MultipathTap>,
    /// Seeds the noise stream.
    pub seed: u64,
}

impl ChannelProfile {
    /// Direct path only, no noise: applying it is the identity.
    pub fn identity(seed: u64) -> Self {
        Self {
            snr_db: f64::INFINITY,
            multipath_taps: vec![MultipathTap {
                delay: 0,
                gain: Complex64::new(1.0, 0.0),
            }],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipath_taps.is_empty() {
            return Err(Error::InvalidInput("channel must have at least one tap".into()));
        }
        if !self.multipath_taps.iter().any(|t| t.delay == 0) {
            return Err(Error::InvalidInput("channel must include a delay-0 tap".into()));
        }
        Ok(())
    }

    fn max_delay(&self) -> usize {
        self.multipath_taps.iter().map(|t| t.delay).max().unwrap_or(0)
    }
}

/// JSON cannot encode IEEE infinity, so a noiseless channel's snr_db is
/// written as `null` and read back as `f64::INFINITY`.
mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Receiver front-end effects applied after the channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverProfile {
    /// Local-oscillator offset in Hz; same rotation convention as CFO, so
    /// a value opposite to a device's CFO cancels it.
    pub lo_offset_hz: f64,
    pub gain_db: f64,
    /// Serialized as `[re, im]`.
    pub dc_offset: Complex64,
    pub seed: u64,
}

impl ReceiverProfile {
    /// Zero-profile receiver: applying it is the identity.
    pub fn none(seed: u64) -> Self {
        Self {
            lo_offset_hz: 0.0,
            gain_db: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            seed,
        }
    }
}

/// Everything that defines a capture domain: the transmitter configuration,
/// the channel, and the receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub lora: LoRaConfig,
    pub channel: ChannelProfile,
    pub receiver: ReceiverProfile,
}

/// An experiment roster: the device population and the domains they are
/// captured in. Stored as a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    pub devices: Vec<DeviceImpairment>,
    pub domains: Vec<DomainSpec>,
}

impl Roster {
    /// A small ready-to-run roster: `n_devices` sampled transmitters and a
    /// single domain at SF 7, 125 kHz, 1 MS/s over a clean channel.
    pub fn example(n_devices: usize) -> Self {
        let lora = LoRaConfig {
            spreading_factor: 7,
            bandwidth_hz: 125_000.0,
            sample_rate_hz: 1_000_000.0,
            config_id: 1,
        };
        Roster {
            devices: sample_device_impairments(n_devices, 0xD15EA5E),
            domains: vec![DomainSpec {
                domain_id: "desk".into(),
                lora,
                channel: ChannelProfile::identity(11),
                receiver: ReceiverProfile::none(12),
            }],
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        write_atomic(path, &json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
    }
}

/// Draw a population of plausible transmitters. Magnitudes are small enough
/// that devices are nearly identical yet separable: CFO within ±2 kHz, gain
/// imbalance within ±0.5 dB, phase imbalance within ±0.05 rad, DC offset
/// magnitude up to 0.01, phase-noise step up to 5e-4 rad.
pub fn sample_device_impairments(count: usize, seed: u64) -> Vec<DeviceImpairment> {
    (0..count)
        .map(|i| {
            let mut rng = seeds::rng_for_indexed(seed, "device", i as u64);
            let dc_mag = rng.random_range(0.0..=0.01);
            let dc_arg = rng.random_range(0.0..TAU);
            DeviceImpairment {
                cfo_hz: rng.random_range(-2000.0..=2000.0),
                iq_gain_imbalance_db: rng.random_range(-0.5..=0.5),
                iq_phase_imbalance_rad: rng.random_range(-0.05..=0.05),
                dc_offset: Complex64::from_polar(dc_mag, dc_arg),
                phase_noise_std_rad: rng.random_range(0.0..=5e-4),
                seed: seeds::derive_seed_indexed(seed, "device-walk", i as u64),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Signal chain stages
// ---------------------------------------------------------------------------

/// Generate chirp-spread-spectrum baseband for a symbol sequence.
///
/// Symbol `s` is a linear up-chirp with instantaneous frequency
/// `f(t) = -BW/2 + (s/2^SF)*BW + (BW/T_sym)*t` wrapped into
/// `[-BW/2, BW/2)`, where `T_sym = 2^SF/BW`. The phase accumulates
/// continuously across samples and symbol boundaries, every sample has
/// unit magnitude, and the initial carrier phase is drawn from `seed`.
pub fn gen_lora_baseband(
    config: &LoRaConfig,
    num_symbols: usize,
    symbol_values: &[u32],
    seed: u64,
) -> Result<Vec<Complex64>> {
    config.validate()?;
    if symbol_values.len() != num_symbols {
        return Err(Error::InvalidInput(format!(
            "expected {} symbol values, got {}",
            num_symbols,
            symbol_values.len()
        )));
    }
    let chips = 1u64 << config.spreading_factor;
    if let Some(&bad) = symbol_values.iter().find(|&&s| u64::from(s) >= chips) {
        return Err(Error::InvalidInput(format!(
            "symbol value {bad} out of range for SF {}",
            config.spreading_factor
        )));
    }
    let sps = config.samples_per_symbol();
    let bw = config.bandwidth_hz;
    let fs = config.sample_rate_hz;
    let t_sym = config.symbol_duration_s();
    let mut rng = seeds::rng_for(seed, "chirp-phase");
    let mut phase: f64 = rng.random_range(0.0..TAU);
    let mut out = Vec::with_capacity(num_symbols * sps);
    for &s in symbol_values {
        let f_base = -bw / 2.0 + (s as f64 / chips as f64) * bw;
        for n in 0..sps {
            let t = n as f64 / fs;
            let f_raw = f_base + (bw / t_sym) * t;
            // Wrap into [-BW/2, BW/2).
            let f = (f_raw + bw / 2.0).rem_euclid(bw) - bw / 2.0;
            out.push(Complex64::from_polar(1.0, phase));
            phase += TAU * f / fs;
        }
    }
    Ok(out)
}

/// Imprint a transmitter's hardware fingerprint on clean baseband.
///
/// Stages run in a fixed order so outputs are bit-stable: IQ imbalance
/// (`I' = g*I`, `Q' = Q*cos e + I*sin e` with `g = 10^(db/20)`), CFO
/// rotation `exp(j*2*pi*cfo*n/fs)`, phase-noise random walk, DC offset.
pub fn apply_impairments(
    samples: &[Complex64],
    imp: &DeviceImpairment,
    sample_rate_hz: f64,
) -> Vec<Complex64> {
    let g = 10f64.powf(imp.iq_gain_imbalance_db / 20.0);
    let (sin_e, cos_e) = imp.iq_phase_imbalance_rad.sin_cos();
    let cfo_step = TAU * imp.cfo_hz / sample_rate_hz;
    let mut walk_rng = seeds::rng_for(imp.seed, "phase-noise");
    let walk = Normal::new(0.0, imp.phase_noise_std_rad)
        .expect("validated nonnegative std");
    let mut walk_phase = 0.0f64;
    samples
        .iter()
        .enumerate()
        .map(|(n, z)| {
            let mut z = Complex64::new(g * z.re, z.im * cos_e + z.re * sin_e);
            let mut rot = cfo_step * n as f64;
            if imp.phase_noise_std_rad > 0.0 {
                walk_phase += walk.sample(&mut walk_rng);
                rot += walk_phase;
            }
            if rot != 0.0 {
                z *= Complex64::from_polar(1.0, rot);
            }
            z + imp.dc_offset
        })
        .collect()
}

/// Propagate through multipath and add white Gaussian noise at the
/// requested SNR. Output length is input length plus the largest tap
/// delay. `snr_db = f64::INFINITY` skips the noise stage.
pub fn apply_channel(samples: &[Complex64], ch: &ChannelProfile) -> Result<Vec<Complex64>> {
    ch.validate()?;
    let out_len = samples.len() + ch.max_delay();
    let mut out = vec![Complex64::new(0.0, 0.0); out_len];
    for tap in &ch.multipath_taps {
        for (n, z) in samples.iter().enumerate() {
            out[n + tap.delay] += tap.gain * z;
        }
    }
    if ch.snr_db.is_finite() {
        let signal_power: f64 =
            out.iter().map(|z| z.norm_sqr()).sum::<f64>() / out.len() as f64;
        if signal_power == 0.0 {
            return Err(Error::InvalidInput(
                "cannot set a finite SNR on a zero-power signal".into(),
            ));
        }
        let noise_power = signal_power / 10f64.powf(ch.snr_db / 10.0);
        let per_component = Normal::new(0.0, (noise_power / 2.0).sqrt())
            .expect("positive noise std");
        let mut rng = seeds::rng_for(ch.seed, "awgn");
        for z in &mut out {
            *z += Complex64::new(per_component.sample(&mut rng), per_component.sample(&mut rng));
        }
    }
    Ok(out)
}

/// Apply receiver front-end effects: gain `10^(db/20)`, LO offset rotation
/// `exp(j*2*pi*lo*n/fs)`, then the receiver's DC offset.
pub fn apply_receiver(
    samples: &[Complex64],
    rx: &ReceiverProfile,
    sample_rate_hz: f64,
) -> Vec<Complex64> {
    let gain = 10f64.powf(rx.gain_db / 20.0);
    let lo_step = TAU * rx.lo_offset_hz / sample_rate_hz;
    samples
        .iter()
        .enumerate()
        .map(|(n, z)| {
            let mut z = gain * z;
            if lo_step != 0.0 {
                z *= Complex64::from_polar(1.0, lo_step * n as f64);
            }
            z + rx.dc_offset
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

/// Knobs for [`synth_dataset_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Every transmission sends the same message by default, mirroring a
    /// fixed-payload testbed; set this to give each device its own random
    /// payload instead.
    pub randomize_payload: bool,
}

/// Preamble length in symbols; each is an up-chirp of value 0.
const PREAMBLE_SYMBOLS: usize = 8;

/// Synthesize one domain's dataset: for each device, generate a chirp
/// transmission long enough to yield `frames_per_device` frames, pass it
/// through impairments, channel, and receiver, then frame it. Device ids
/// are roster indices. Deterministic given `seed`.
pub fn synth_dataset(
    devices: &[DeviceImpairment],
    domain: &DomainSpec,
    frames_per_device: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    synth_dataset_with(devices, domain, frames_per_device, seed, SynthOptions::default())
}

/// [`synth_dataset`] with explicit options.
pub fn synth_dataset_with(
    devices: &[DeviceImpairment],
    domain: &DomainSpec,
    frames_per_device: usize,
    seed: u64,
    options: SynthOptions,
) -> Result<LabeledDataset> {
    let recordings = synth_recordings_with(devices, domain, frames_per_device, seed, options)?;
    let frames_nested = recordings
        .iter()
        .map(|rec| {
            let mut frames = frame_recording(rec, FRAME_LEN, FRAME_LEN)?;
            frames.truncate(frames_per_device);
            Ok(frames)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(frames_nested.into_iter().flatten().collect(), domain.domain_id.clone())
}

/// The per-device received streams behind [`synth_dataset`], before framing.
/// Each recording is long enough to yield at least `frames_per_device`
/// frames of [`FRAME_LEN`] samples.
pub fn synth_recordings(
    devices: &[DeviceImpairment],
    domain: &DomainSpec,
    frames_per_device: usize,
    seed: u64,
) -> Result<Vec<IQRecording>> {
    synth_recordings_with(devices, domain, frames_per_device, seed, SynthOptions::default())
}

/// [`synth_recordings`] with explicit options.
pub fn synth_recordings_with(
    devices: &[DeviceImpairment],
    domain: &DomainSpec,
    frames_per_device: usize,
    seed: u64,
    options: SynthOptions,
) -> Result<Vec<IQRecording>> {
    validate_request(devices, domain, frames_per_device)?;
    devices
        .par_iter()
        .enumerate()
        .map(|(i, dev)| {
            let stream = pre_receiver_stream(dev, i, domain, frames_per_device, seed, options)?;
            let received = apply_receiver(&stream, &domain.receiver, domain.lora.sample_rate_hz);
            IQRecording::new(
                i as u32,
                domain.domain_id.clone(),
                domain.lora.sample_rate_hz,
                received,
            )
        })
        .collect()
}

fn validate_request(
    devices: &[DeviceImpairment],
    domain: &DomainSpec,
    frames_per_device: usize,
) -> Result<()> {
    if devices.is_empty() {
        return Err(Error::InvalidInput("device list is empty".into()));
    }
    if frames_per_device == 0 {
        return Err(Error::InvalidInput("frames_per_device must be positive".into()));
    }
    domain.lora.validate()?;
    domain.channel.validate()?;
    for (i, dev) in devices.iter().enumerate() {
        dev.validate(domain.lora.bandwidth_hz)
            .map_err(|e| Error::Device {
                device_id: i as u32,
                msg: e.to_string(),
            })?;
    }
    Ok(())
}

/// Everything before the receiver stage: chirps, impairments, channel.
/// Receiver-only domain differences leave this stream untouched.
fn pre_receiver_stream(
    dev: &DeviceImpairment,
    index: usize,
    domain: &DomainSpec,
    frames_per_device: usize,
    seed: u64,
    options: SynthOptions,
) -> Result<Vec<Complex64>> {
    let lora = &domain.lora;
    let sps = lora.samples_per_symbol();
    let needed = frames_per_device * FRAME_LEN;
    let num_symbols = (needed.div_ceil(sps)).max(PREAMBLE_SYMBOLS + 1);
    let payload_seed = if options.randomize_payload {
        seeds::derive_seed_indexed(seed, "payload", index as u64)
    } else {
        seeds::derive_seed(seed, "payload")
    };
    let symbols = message_symbols(lora, num_symbols, payload_seed);
    let chirp_seed = seeds::derive_seed_indexed(seed, "chirp", index as u64);
    let clean = gen_lora_baseband(lora, num_symbols, &symbols, chirp_seed)?;
    let impaired = apply_impairments(&clean, dev, lora.sample_rate_hz);
    // Noise must vary per device yet stay blind to the receiver, so the
    // per-device channel seed derives from the channel's own seed only.
    let channel = ChannelProfile {
        seed: seeds::derive_seed_indexed(ch_seed_root(&domain.channel, seed), "awgn", index as u64),
        ..domain.channel.clone()
    };
    apply_channel(&impaired, &channel)
}

fn ch_seed_root(ch: &ChannelProfile, dataset_seed: u64) -> u64 {
    seeds::derive_seed_indexed(dataset_seed, "channel", ch.seed)
}

/// The message: a fixed preamble of up-chirps followed by payload symbols
/// drawn uniformly from the seeded stream.
fn message_symbols(lora: &LoRaConfig, num_symbols: usize, payload_seed: u64) -> Vec<u32> {
    let chips = 1u32 << lora.spreading_factor;
    let mut rng = seeds::rng_for(payload_seed, "symbols");
    let mut symbols = vec![0u32; PREAMBLE_SYMBOLS.min(num_symbols)];
    while symbols.len() < num_symbols {
        symbols.push(rng.random_range(0..chips));
    }
    symbols
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
