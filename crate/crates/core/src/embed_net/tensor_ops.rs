//! Layer primitives: 1-D convolution, max-pool, batch-norm, linear, leaky
//! ReLU. Forward passes return the caches their backward passes need, and
//! every backward pass is checked against central finite differences in
//! the tests below.
//!
//! Conv-stage tensors are `[batch, length, channels]` (channels last), so
//! an im2col row is a straight copy of contiguous channel slices and the
//! convolution becomes one matrix product per layer.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis, Zip};

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

/// Reinterpret a standard-layout 3-D array as 2-D without copying.
pub(crate) fn reshape_3to2(x: Array3<f64>, rows: usize, cols: usize) -> Array2<f64> {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert!(x.is_standard_layout());
    let (vec, offset) = x.into_raw_vec_and_offset();
    debug_assert_eq!(offset.unwrap_or(0), 0);
    Array2::from_shape_vec((rows, cols), vec).expect("length checked")
}

/// Reinterpret a standard-layout 2-D array as 3-D without copying.
pub(crate) fn reshape_2to3(x: Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
    debug_assert_eq!(x.len(), shape.0 * shape.1 * shape.2);
    debug_assert!(x.is_standard_layout());
    let (vec, offset) = x.into_raw_vec_and_offset();
    debug_assert_eq!(offset.unwrap_or(0), 0);
    Array3::from_shape_vec(shape, vec).expect("length checked")
}

// ---------------------------------------------------------------------------
// Conv1d (same padding)
// ---------------------------------------------------------------------------

pub(crate) struct ConvCache {
    /// im2col matrix, `[B*L, K*C_in]`; row b*L+l holds the padded window
    /// around position l, channel-fastest.
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

/// Weights as the im2col matmul operand `[K*C_in, C_out]`, from the
/// canonical `[C_out, C_in, K]` tensor.
fn matmul_weights(w: &Array3<f64>) -> Array2<f64> {
    let (c_out, c_in, k) = w.dim();
    Array2::from_shape_fn((k * c_in, c_out), |(kc, o)| w[[o, kc % c_in, kc / c_in]])
}

fn im2col(x: &ArrayView3<f64>, kernel: usize) -> Array2<f64> {
    let (b, l, c) = x.dim();
    let pad_left = (kernel - 1) / 2;
    let mut cols = Array2::zeros((b * l, kernel * c));
    let x_slice = x.as_slice().expect("standard layout");
    let cols_slice = cols.as_slice_mut().expect("standard layout");
    for bi in 0..b {
        for li in 0..l {
            let row_base = (bi * l + li) * kernel * c;
            for t in 0..kernel {
                let src = li as isize + t as isize - pad_left as isize;
                if src < 0 || src >= l as isize {
                    continue; // zero padding
                }
                let src_base = (bi * l + src as usize) * c;
                cols_slice[row_base + t * c..row_base + (t + 1) * c]
                    .copy_from_slice(&x_slice[src_base..src_base + c]);
            }
        }
    }
    cols
}

/// Same-padded 1-D convolution: `x [B, L, C_in]`, `w [C_out, C_in, K]`,
/// output `[B, L, C_out]`.
pub(crate) fn conv1d_forward(
    x: &ArrayView3<f64>,
    w: &Array3<f64>,
    bias: &Array1<f64>,
) -> (Array3<f64>, ConvCache) {
    let (b, l, _c_in) = x.dim();
    let (c_out, _, k) = w.dim();
    let cols = im2col(x, k);
    let mut out2 = cols.dot(&matmul_weights(w));
    out2 += &bias.view().insert_axis(Axis(0));
    let out = reshape_2to3(out2, (b, l, c_out));
    let cache = ConvCache {
        cols,
        in_shape: x.dim(),
    };
    (out, cache)
}

/// Gradients of a conv layer: input, weight, and bias.
pub(crate) fn conv1d_backward(
    cache: &ConvCache,
    w: &Array3<f64>,
    d_out: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (b, l, c_in) = cache.in_shape;
    let (c_out, _, k) = w.dim();
    let pad_left = (k - 1) / 2;
    let d_out2 = reshape_3to2(d_out.clone(), b * l, c_out);

    let d_bias = d_out2.sum_axis(Axis(0));
    // d_w2 [K*C_in, C_out] = cols^T . d_out2, then back to [C_out, C_in, K].
    let d_w2 = cache.cols.t().dot(&d_out2);
    let d_w = Array3::from_shape_fn((c_out, c_in, k), |(o, ci, t)| d_w2[[t * c_in + ci, o]]);

    // d_cols [B*L, K*C_in] = d_out2 . w2^T, scattered back through padding.
    let d_cols = d_out2.dot(&matmul_weights(w).t());
    let mut d_x = Array3::zeros((b, l, c_in));
    let d_x_slice = d_x.as_slice_mut().expect("standard layout");
    let d_cols_slice = d_cols.as_slice().expect("standard layout");
    for bi in 0..b {
        for li in 0..l {
            let row_base = (bi * l + li) * k * c_in;
            for t in 0..k {
                let src = li as isize + t as isize - pad_left as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let dst_base = (bi * l + src as usize) * c_in;
                for ci in 0..c_in {
                    d_x_slice[dst_base + ci] += d_cols_slice[row_base + t * c_in + ci];
                }
            }
        }
    }
    (d_x, d_w, d_bias)
}

// ---------------------------------------------------------------------------
// MaxPool1d
// ---------------------------------------------------------------------------

pub(crate) struct PoolCache {
    /// Index within each pooling window that won; first index wins ties.
    argmax: Array3<usize>,
    in_len: usize,
}

/// Non-overlapping max pool along the length axis; `L` must divide by
/// `pool`, which the network config validates.
pub(crate) fn maxpool1d_forward(x: &ArrayView3<f64>, pool: usize) -> (Array3<f64>, PoolCache) {
    let (b, l, c) = x.dim();
    debug_assert_eq!(l % pool, 0);
    let l_out = l / pool;
    let mut out = Array3::zeros((b, l_out, c));
    let mut argmax = Array3::zeros((b, l_out, c));
    for bi in 0..b {
        for lo in 0..l_out {
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_t = 0;
                for t in 0..pool {
                    let v = x[[bi, lo * pool + t, ci]];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                out[[bi, lo, ci]] = best;
                argmax[[bi, lo, ci]] = best_t;
            }
        }
    }
    (out, PoolCache { argmax, in_len: l })
}

pub(crate) fn maxpool1d_backward(cache: &PoolCache, d_out: &Array3<f64>) -> Array3<f64> {
    let (b, l_out, c) = d_out.dim();
    let pool = cache.in_len / l_out;
    let mut d_x = Array3::zeros((b, cache.in_len, c));
    for bi in 0..b {
        for lo in 0..l_out {
            for ci in 0..c {
                let t = cache.argmax[[bi, lo, ci]];
                d_x[[bi, lo * pool + t, ci]] += d_out[[bi, lo, ci]];
            }
        }
    }
    d_x
}

// ---------------------------------------------------------------------------
// BatchNorm1d (per channel over batch and length)
// ---------------------------------------------------------------------------

pub(crate) struct BnCache {
    x_hat: Array3<f64>,
    inv_std: Array1<f64>,
}

pub(crate) struct BnStats {
    pub batch_mean: Array1<f64>,
    /// Biased (divide by N) variance used for normalization.
    pub batch_var: Array1<f64>,
    /// N = batch * length, the per-channel sample count.
    pub n: usize,
}

/// Train-mode batch norm: normalize with the batch's own statistics.
pub(crate) fn batchnorm_forward_train(
    x: &ArrayView3<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array3<f64>, BnCache, BnStats) {
    let (b, l, c) = x.dim();
    let n = (b * l) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                mean[ci] += x[[bi, li, ci]];
            }
        }
    }
    mean /= n;
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                let d = x[[bi, li, ci]] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    var /= n;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let mut x_hat = Array3::zeros((b, l, c));
    let mut out = Array3::zeros((b, l, c));
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                let h = (x[[bi, li, ci]] - mean[ci]) * inv_std[ci];
                x_hat[[bi, li, ci]] = h;
                out[[bi, li, ci]] = gamma[ci] * h + beta[ci];
            }
        }
    }
    (
        out,
        BnCache { x_hat, inv_std },
        BnStats {
            batch_mean: mean,
            batch_var: var,
            n: b * l,
        },
    )
}

/// Infer-mode batch norm: normalize with running statistics, so the result
/// for a frame never depends on what else is in the batch.
pub(crate) fn batchnorm_forward_infer(
    x: &ArrayView3<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    eps: f64,
) -> Array3<f64> {
    let (b, l, c) = x.dim();
    let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
    let mut out = Array3::zeros((b, l, c));
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                out[[bi, li, ci]] =
                    gamma[ci] * (x[[bi, li, ci]] - running_mean[ci]) * inv_std[ci] + beta[ci];
            }
        }
    }
    out
}

/// Backward through train-mode batch norm, differentiating through the
/// batch statistics.
pub(crate) fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Array1<f64>,
    d_out: &Array3<f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (b, l, c) = d_out.dim();
    let n = (b * l) as f64;
    let mut d_gamma = Array1::zeros(c);
    let mut d_beta = Array1::zeros(c);
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                d_gamma[ci] += d_out[[bi, li, ci]] * cache.x_hat[[bi, li, ci]];
                d_beta[ci] += d_out[[bi, li, ci]];
            }
        }
    }
    // d_x = (g * inv_std / N) * (N*d_out - sum(d_out) - x_hat * sum(d_out * x_hat))
    let mut d_x = Array3::zeros((b, l, c));
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                let term = n * d_out[[bi, li, ci]]
                    - d_beta[ci]
                    - cache.x_hat[[bi, li, ci]] * d_gamma[ci];
                d_x[[bi, li, ci]] = gamma[ci] * cache.inv_std[ci] / n * term;
            }
        }
    }
    (d_x, d_gamma, d_beta)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer: `x [B, in] . w [in, out] + bias`.
pub(crate) fn linear_forward(x: &Array2<f64>, w: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    out += &bias.view().insert_axis(Axis(0));
    out
}

pub(crate) fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d_x = d_out.dot(&w.t());
    let d_w = x.t().dot(d_out);
    let d_bias = d_out.sum_axis(Axis(0));
    (d_x, d_w, d_bias)
}

// ---------------------------------------------------------------------------
// Leaky ReLU
// ---------------------------------------------------------------------------

/// Elementwise leaky ReLU; the returned factor grid (1 or slope) is the
/// backward multiplier.
pub(crate) fn leaky_relu_forward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    slope: f64,
) -> (ndarray::Array<f64, D>, ndarray::Array<f64, D>) {
    let factors = x.mapv(|v| if v > 0.0 { 1.0 } else { slope });
    let mut out = x.clone();
    Zip::from(&mut out).and(&factors).for_each(|o, &f| *o *= f);
    (out, factors)
}

pub(crate) fn leaky_relu_backward<D: ndarray::Dimension>(
    factors: &ndarray::Array<f64, D>,
    d_out: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut d_x = d_out.clone();
    Zip::from(&mut d_x).and(factors).for_each(|d, &f| *d *= f);
    d_x
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
