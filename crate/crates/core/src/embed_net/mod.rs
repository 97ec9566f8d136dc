//! The embedding network: a 1-D CNN mapping a 2x128 IQ frame to a point in
//! a low-dimensional latent space, trained so same-device frames cluster.
//!
//! Architecture: pairs of same-padded convolutions, each pair followed by a
//! max-pool and a batch-norm stage, then two fully connected layers ending
//! in the embedding. Every activation is leaky ReLU except the final
//! linear output. The canonical shape ([`NetworkConfig::default`]) has
//! four conv layers and a 12-dimensional embedding; the same trunk with a
//! 10-logit head is the closed-set classification baseline.
//!
//! Two forward modes exist. `Train` normalizes with batch statistics and
//! reports updated running statistics to the caller (parameters are never
//! mutated by a forward pass). `Infer` normalizes with stored running
//! statistics, so a frame's embedding is independent of batch composition.
//!
//! # Blocks
//!
//! - [`tensor_ops`](self): layer primitives with analytic backward passes.
//! - [`loss`]: triplet loss, batch-hard mining, cross entropy.
//! - [`train`]: SGD-with-momentum training loop and learning-rate tuning.

pub mod loss;
mod tensor_ops;
pub mod train;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::seeds;
use crate::signal_io::FrameExample;
use tensor_ops::*;

/// Checkpoint format tag.
pub const PARAMS_VERSION: &str = "embed-net-v1";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Network shape and normalization constants.
///
/// `conv_blocks` lists every convolutional layer as `(out_channels,
/// kernel_size)`; layers act in pairs, with a max-pool and batch-norm stage
/// after each pair, so the count must be even.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_length: usize,
    pub conv_blocks: Vec<(usize, usize)>,
    pub pool_size: usize,
    pub fc_hidden: usize,
    pub embedding_dim: usize,
    pub leaky_slope: f64,
    pub batchnorm_momentum: f64,
    pub batchnorm_eps: f64,
}

impl Default for NetworkConfig {
    /// The canonical embedding network: four conv layers in two
    /// pool/batch-norm pairs, two fully connected layers, 12 outputs.
    fn default() -> Self {
        Self {
            input_channels: 2,
            input_length: 128,
            conv_blocks: vec![(32, 7), (32, 5), (64, 5), (64, 3)],
            pool_size: 2,
            fc_hidden: 128,
            embedding_dim: 12,
            leaky_slope: 0.01,
            batchnorm_momentum: 0.1,
            batchnorm_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    /// The baseline closed-set classifier: the same trunk with one logit
    /// per known device instead of the embedding head.
    pub fn vanilla(num_classes: usize) -> Self {
        Self {
            embedding_dim: num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() || self.conv_blocks.len() % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "conv_blocks must come in pool/batch-norm pairs, got {} layers",
                self.conv_blocks.len()
            )));
        }
        if self.conv_blocks.iter().any(|&(c, k)| c == 0 || k == 0) {
            return Err(Error::InvalidInput("conv channels and kernels must be positive".into()));
        }
        if self.input_channels == 0
            || self.fc_hidden == 0
            || self.embedding_dim == 0
            || self.pool_size < 2
        {
            return Err(Error::InvalidInput("network dimensions must be positive".into()));
        }
        let pairs = self.conv_blocks.len() / 2;
        if self.input_length % self.pool_size.pow(pairs as u32) != 0 {
            return Err(Error::InvalidInput(format!(
                "input length {} not divisible by pool {} applied {} times",
                self.input_length, self.pool_size, pairs
            )));
        }
        if !(self.batchnorm_momentum > 0.0 && self.batchnorm_momentum < 1.0) {
            return Err(Error::InvalidInput(format!(
                "batchnorm momentum must be in (0,1), got {}",
                self.batchnorm_momentum
            )));
        }
        Ok(())
    }

    /// Number of pool/batch-norm pairs.
    fn num_pairs(&self) -> usize {
        self.conv_blocks.len() / 2
    }

    /// Length after all pooling stages.
    fn final_length(&self) -> usize {
        self.input_length / self.pool_size.pow(self.num_pairs() as u32)
    }

    /// Flattened feature count entering the first FC layer.
    fn flat_features(&self) -> usize {
        self.final_length() * self.conv_blocks.last().map(|&(c, _)| c).unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One convolutional layer: weight `[c_out, c_in, k]` and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
}

/// One batch-norm stage: affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// One fully connected layer: weight `[in, out]` and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Every learnable tensor of the network plus the config that shaped it.
/// Forward passes never mutate this; batch-norm running-stat updates are
/// returned to the caller as [`BnUpdates`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub version: String,
    pub config: NetworkConfig,
    pub init_seed: u64,
    pub convs: Vec<ConvParams>,
    pub bns: Vec<BnParams>,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// A point in the embedding space (or, for the baseline head, a logit
/// vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint(pub Vec<f64>);

impl EmbeddingPoint {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Euclidean distance to another point.
    pub fn distance(&self, other: &EmbeddingPoint) -> f64 {
        self.distance_sq(other).sqrt()
    }

    /// Squared Euclidean distance to another point.
    pub fn distance_sq(&self, other: &EmbeddingPoint) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Coordinate-wise mean of a nonempty set of same-dimension points.
    pub fn mean(points: &[EmbeddingPoint]) -> Result<EmbeddingPoint> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidInput("mean of zero points".into()))?;
        let dim = first.dim();
        let mut acc = vec![0.0; dim];
        for p in points {
            if p.dim() != dim {
                return Err(Error::InvalidInput(format!(
                    "mixed embedding dimensions: {} vs {dim}",
                    p.dim()
                )));
            }
            for (a, v) in acc.iter_mut().zip(&p.0) {
                *a += v;
            }
        }
        let n = points.len() as f64;
        Ok(EmbeddingPoint(acc.into_iter().map(|v| v / n).collect()))
    }
}

/// Initialize a network: weights uniform in ±sqrt(1/fan_in), biases zero,
/// batch-norm scale 1 / shift 0 / running mean 0 / running variance 1.
/// Deterministic given the seed.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = seeds::rng_for(seed, "init");
    let uniform = |fan_in: usize| {
        let bound = (1.0 / fan_in as f64).sqrt();
        move |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-bound..bound)
    };

    let mut convs = Vec::new();
    let mut bns = Vec::new();
    let mut c_in = config.input_channels;
    for chunk in config.conv_blocks.chunks(2) {
        for &(c_out, k) in chunk {
            let draw = uniform(c_in * k);
            convs.push(ConvParams {
                weight: Array3::from_shape_fn((c_out, c_in, k), |_| draw(&mut rng)),
                bias: Array1::zeros(c_out),
            });
            c_in = c_out;
        }
        bns.push(BnParams {
            gamma: Array1::ones(c_in),
            beta: Array1::zeros(c_in),
            running_mean: Array1::zeros(c_in),
            running_var: Array1::ones(c_in),
        });
    }
    let flat = config.flat_features();
    let draw1 = uniform(flat);
    let fc1 = LinearParams {
        weight: Array2::from_shape_fn((flat, config.fc_hidden), |_| draw1(&mut rng)),
        bias: Array1::zeros(config.fc_hidden),
    };
    let draw2 = uniform(config.fc_hidden);
    let fc2 = LinearParams {
        weight: Array2::from_shape_fn((config.fc_hidden, config.embedding_dim), |_| {
            draw2(&mut rng)
        }),
        bias: Array1::zeros(config.embedding_dim),
    };
    Ok(Parameters {
        version: PARAMS_VERSION.to_string(),
        config: config.clone(),
        init_seed: seed,
        convs,
        bns,
        fc1,
        fc2,
    })
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Whether batch-norm uses batch statistics (training) or stored running
/// statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

/// Replacement running statistics produced by a train-mode forward pass,
/// one `(mean, var)` per batch-norm stage. The caller decides when to
/// apply them with [`apply_bn_updates`].
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdates(pub Vec<(Array1<f64>, Array1<f64>)>);

/// Overwrite the running statistics with the values from a train-mode
/// forward pass.
pub fn apply_bn_updates(params: &mut Parameters, updates: &BnUpdates) {
    debug_assert_eq!(params.bns.len(), updates.0.len());
    for (bn, (mean, var)) in params.bns.iter_mut().zip(&updates.0) {
        bn.running_mean.assign(mean);
        bn.running_var.assign(var);
    }
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardTrace {
    conv_caches: Vec<ConvCache>,
    conv_factors: Vec<Array3<f64>>,
    pool_caches: Vec<PoolCache>,
    bn_caches: Vec<BnCache>,
    flat: Array2<f64>,
    fc1_out_factors: Array2<f64>,
    fc1_act: Array2<f64>,
    pub(crate) embeddings: Array2<f64>,
}

fn ensure_finite_3(layer: &str, x: &Array3<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer: layer.to_string() })
    }
}

fn ensure_finite_2(layer: &str, x: &Array2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer: layer.to_string() })
    }
}

/// Stack frames into the `[B, L, C]` input tensor.
fn batch_input(params: &Parameters, frames: &[&FrameExample]) -> Result<Array3<f64>> {
    let cfg = &params.config;
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for f in frames {
        if f.cols() != cfg.input_length {
            return Err(Error::InvalidInput(format!(
                "frame has {} columns, network expects {}",
                f.cols(),
                cfg.input_length
            )));
        }
    }
    if cfg.input_channels != 2 {
        return Err(Error::InvalidInput(format!(
            "frames carry 2 channels, network expects {}",
            cfg.input_channels
        )));
    }
    let mut x = Array3::zeros((frames.len(), cfg.input_length, 2));
    for (bi, f) in frames.iter().enumerate() {
        for (li, (&i, &q)) in f.i_row().iter().zip(f.q_row()).enumerate() {
            x[[bi, li, 0]] = i;
            x[[bi, li, 1]] = q;
        }
    }
    Ok(x)
}

/// Run the network over a batch, keeping the caches backward needs.
/// Train mode also returns the running-statistic updates.
pub(crate) fn forward_traced(
    params: &Parameters,
    x: Array3<f64>,
    mode: ForwardMode,
) -> Result<(ForwardTrace, Option<BnUpdates>)> {
    let cfg = &params.config;
    let slope = cfg.leaky_slope;
    let mut conv_caches = Vec::new();
    let mut conv_factors = Vec::new();
    let mut pool_caches = Vec::new();
    let mut bn_caches = Vec::new();
    let mut bn_new_stats = Vec::new();

    let mut h = x;
    let mut conv_idx = 0;
    for (pair, chunk) in cfg.conv_blocks.chunks(2).enumerate() {
        for _ in chunk {
            let conv = &params.convs[conv_idx];
            let (out, cache) = conv1d_forward(&h.view(), &conv.weight, &conv.bias);
            ensure_finite_3(&format!("conv{conv_idx}"), &out)?;
            let (act, factors) = leaky_relu_forward(&out, slope);
            conv_caches.push(cache);
            conv_factors.push(factors);
            h = act;
            conv_idx += 1;
        }
        let (pooled, pcache) = maxpool1d_forward(&h.view(), cfg.pool_size);
        pool_caches.push(pcache);
        let bn = &params.bns[pair];
        h = match mode {
            ForwardMode::Train => {
                let (out, cache, stats) =
                    batchnorm_forward_train(&pooled.view(), &bn.gamma, &bn.beta, cfg.batchnorm_eps);
                bn_caches.push(cache);
                // Running update r' = (1-m)*r + m*stat, with the unbiased
                // variance (batch-size independent inference needs the
                // population estimate).
                let m = cfg.batchnorm_momentum;
                let unbias = if stats.n > 1 {
                    stats.n as f64 / (stats.n as f64 - 1.0)
                } else {
                    1.0
                };
                let new_mean = (1.0 - m) * &bn.running_mean + m * &stats.batch_mean;
                let new_var = (1.0 - m) * &bn.running_var + m * unbias * &stats.batch_var;
                bn_new_stats.push((new_mean, new_var));
                out
            }
            ForwardMode::Infer => batchnorm_forward_infer(
                &pooled.view(),
                &bn.gamma,
                &bn.beta,
                &bn.running_mean,
                &bn.running_var,
                cfg.batchnorm_eps,
            ),
        };
        ensure_finite_3(&format!("bn{pair}"), &h)?;
    }

    let b = h.dim().0;
    let flat = reshape_3to2(h, b, cfg.flat_features());
    let fc1_out = linear_forward(&flat, &params.fc1.weight, &params.fc1.bias);
    ensure_finite_2("fc1", &fc1_out)?;
    let (fc1_act, fc1_out_factors) = leaky_relu_forward(&fc1_out, slope);
    let embeddings = linear_forward(&fc1_act, &params.fc2.weight, &params.fc2.bias);
    ensure_finite_2("fc2", &embeddings)?;

    let trace = ForwardTrace {
        conv_caches,
        conv_factors,
        pool_caches,
        bn_caches,
        flat,
        fc1_out_factors,
        fc1_act,
        embeddings,
    };
    let updates = match mode {
        ForwardMode::Train => Some(BnUpdates(bn_new_stats)),
        ForwardMode::Infer => None,
    };
    Ok((trace, updates))
}

/// Embed a batch of frames. Row i of the output is the embedding of
/// `frames[i]`; train mode additionally returns running-stat updates.
pub fn forward_batch(
    params: &Parameters,
    frames: &[&FrameExample],
    mode: ForwardMode,
) -> Result<(Array2<f64>, Option<BnUpdates>)> {
    let x = batch_input(params, frames)?;
    let (trace, updates) = forward_traced(params, x, mode)?;
    Ok((trace.embeddings, updates))
}

/// Embed a single frame in infer mode.
pub fn forward(params: &Parameters, frame: &FrameExample) -> Result<EmbeddingPoint> {
    let (out, _) = forward_batch(params, &[frame], ForwardMode::Infer)?;
    Ok(EmbeddingPoint(out.row(0).to_vec()))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients for every trainable tensor, in [`Parameters`] layout.
/// Running statistics are not trainable and carry no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<(Array3<f64>, Array1<f64>)>,
    pub bns: Vec<(Array1<f64>, Array1<f64>)>,
    pub fc1: (Array2<f64>, Array1<f64>),
    pub fc2: (Array2<f64>, Array1<f64>),
}

/// Backpropagate d_loss/d_embeddings through the traced forward pass.
pub(crate) fn backward_traced(
    params: &Parameters,
    trace: &ForwardTrace,
    d_embeddings: &Array2<f64>,
) -> Gradients {
    let cfg = &params.config;
    let (d_fc1_act, d_w2, d_b2) = linear_backward(&trace.fc1_act, &params.fc2.weight, d_embeddings);
    let d_fc1_out = leaky_relu_backward(&trace.fc1_out_factors, &d_fc1_act);
    let (d_flat, d_w1, d_b1) = linear_backward(&trace.flat, &params.fc1.weight, &d_fc1_out);

    let b = d_flat.dim().0;
    let last_c = cfg.conv_blocks.last().unwrap().0;
    let mut d_h = reshape_2to3(d_flat, (b, cfg.final_length(), last_c));

    let mut d_convs: Vec<(Array3<f64>, Array1<f64>)> = Vec::new();
    let mut d_bns: Vec<(Array1<f64>, Array1<f64>)> = Vec::new();
    let mut conv_idx = params.convs.len();
    for pair in (0..cfg.num_pairs()).rev() {
        let bn = &params.bns[pair];
        let (d_pooled, d_gamma, d_beta) = batchnorm_backward(&trace.bn_caches[pair], &bn.gamma, &d_h);
        d_bns.push((d_gamma, d_beta));
        d_h = maxpool1d_backward(&trace.pool_caches[pair], &d_pooled);
        for _ in 0..2 {
            conv_idx -= 1;
            let d_act = leaky_relu_backward(&trace.conv_factors[conv_idx], &d_h);
            let (d_x, d_w, d_b) =
                conv1d_backward(&trace.conv_caches[conv_idx], &params.convs[conv_idx].weight, &d_act);
            d_convs.push((d_w, d_b));
            d_h = d_x;
        }
    }
    d_convs.reverse();
    d_bns.reverse();
    Gradients {
        convs: d_convs,
        bns: d_bns,
        fc1: (d_w1, d_b1),
        fc2: (d_w2, d_b2),
    }
}

// ---------------------------------------------------------------------------
// Flat parameter vector (optimizer + finite-difference interface)
// ---------------------------------------------------------------------------

/// Fixed flattening order shared by [`Parameters::flatten_trainable`],
/// [`Parameters::set_trainable`], and [`Gradients::flatten`]: conv layers
/// in order (weight then bias), batch-norm stages in order (gamma then
/// beta), fc1 weight/bias, fc2 weight/bias. Row-major within each tensor.
impl Parameters {
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.extend(c.weight.iter());
            v.extend(c.bias.iter());
        }
        for bn in &self.bns {
            v.extend(bn.gamma.iter());
            v.extend(bn.beta.iter());
        }
        v.extend(self.fc1.weight.iter());
        v.extend(self.fc1.bias.iter());
        v.extend(self.fc2.weight.iter());
        v.extend(self.fc2.bias.iter());
        v
    }

    pub fn set_trainable(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for d in dst {
                *d = *it.next().expect("flat vector too short");
            }
        };
        for c in &mut self.convs {
            fill(&mut c.weight.iter_mut());
            fill(&mut c.bias.iter_mut());
        }
        for bn in &mut self.bns {
            fill(&mut bn.gamma.iter_mut());
            fill(&mut bn.beta.iter_mut());
        }
        fill(&mut self.fc1.weight.iter_mut());
        fill(&mut self.fc1.bias.iter_mut());
        fill(&mut self.fc2.weight.iter_mut());
        fill(&mut self.fc2.bias.iter_mut());
        assert!(it.next().is_none(), "flat vector too long");
    }

    /// Total trainable coordinate count.
    pub fn num_trainable(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum::<usize>()
            + self.bns.iter().map(|b| b.gamma.len() + b.beta.len()).sum::<usize>()
            + self.fc1.weight.len()
            + self.fc1.bias.len()
            + self.fc2.weight.len()
            + self.fc2.bias.len()
    }
}

impl Gradients {
    /// All-zero gradients in the shape of `params` (the no-surviving-triplet
    /// case).
    pub fn zeros_like(params: &Parameters) -> Self {
        Gradients {
            convs: params
                .convs
                .iter()
                .map(|c| (Array3::zeros(c.weight.raw_dim()), Array1::zeros(c.bias.raw_dim())))
                .collect(),
            bns: params
                .bns
                .iter()
                .map(|b| (Array1::zeros(b.gamma.raw_dim()), Array1::zeros(b.beta.raw_dim())))
                .collect(),
            fc1: (
                Array2::zeros(params.fc1.weight.raw_dim()),
                Array1::zeros(params.fc1.bias.raw_dim()),
            ),
            fc2: (
                Array2::zeros(params.fc2.weight.raw_dim()),
                Array1::zeros(params.fc2.bias.raw_dim()),
            ),
        }
    }

    /// Same coordinate order as [`Parameters::flatten_trainable`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in &self.convs {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        for (g, b) in &self.bns {
            v.extend(g.iter());
            v.extend(b.iter());
        }
        v.extend(self.fc1.0.iter());
        v.extend(self.fc1.1.iter());
        v.extend(self.fc2.0.iter());
        v.extend(self.fc2.1.iter());
        v
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// What a checkpoint file holds: the full parameter set (config, tensors,
/// seeds) plus the per-epoch history of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Parameters,
    pub history: Vec<train::EpochStats>,
}

/// Serialize a checkpoint to versioned JSON.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec(ckpt).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &json)
}

/// Load and validate a JSON checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))?;
    if ckpt.params.version != PARAMS_VERSION {
        return Err(Error::InvalidInput(format!(
            "checkpoint version {} unsupported (expected {})",
            ckpt.params.version, PARAMS_VERSION
        )));
    }
    validate_shapes(&ckpt.params)?;
    Ok(ckpt)
}

fn validate_shapes(params: &Parameters) -> Result<()> {
    let cfg = &params.config;
    cfg.validate()?;
    if params.convs.len() != cfg.conv_blocks.len() || params.bns.len() != cfg.num_pairs() {
        return Err(Error::InvalidInput("checkpoint layer count mismatch".into()));
    }
    let mut c_in = cfg.input_channels;
    for (conv, &(c_out, k)) in params.convs.iter().zip(&cfg.conv_blocks) {
        if conv.weight.dim() != (c_out, c_in, k) || conv.bias.len() != c_out {
            return Err(Error::InvalidInput("checkpoint conv shape mismatch".into()));
        }
        c_in = c_out;
    }
    for (pair, bn) in params.bns.iter().enumerate() {
        let c = cfg.conv_blocks[2 * pair + 1].0;
        if bn.gamma.len() != c
            || bn.beta.len() != c
            || bn.running_mean.len() != c
            || bn.running_var.len() != c
        {
            return Err(Error::InvalidInput("checkpoint batch-norm shape mismatch".into()));
        }
        if bn.running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidInput("checkpoint running variance not positive".into()));
        }
    }
    if params.fc1.weight.dim() != (cfg.flat_features(), cfg.fc_hidden)
        || params.fc1.bias.len() != cfg.fc_hidden
        || params.fc2.weight.dim() != (cfg.fc_hidden, cfg.embedding_dim)
        || params.fc2.bias.len() != cfg.embedding_dim
    {
        return Err(Error::InvalidInput("checkpoint FC shape mismatch".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

/// Seeded random frame for tests across the crate.
#[cfg(test)]
pub(crate) fn test_frame(seed: u64, device_id: u32) -> FrameExample {
    use crate::signal_io::FRAME_LEN;
    let mut rng = seeds::rng_for(seed, "frame");
    let i: Vec<f64> = (0..FRAME_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q: Vec<f64> = (0..FRAME_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
    FrameExample::from_rows(&i, &q, device_id, "test").unwrap()
}
