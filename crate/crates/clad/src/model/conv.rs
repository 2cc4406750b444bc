//! The multi-scale dilated CNN front end.
//!
//! Three blocks of {1-D convolution, single-group GroupNorm, ReLU} shrink a
//! byte-embedding sequence by a cumulative stride of 16. Convolutions use
//! ceil-mode symmetric zero padding, so each block's output length is
//! `ceil(in / stride)` and a full-length input lands on exactly the
//! advertised downsampled length. Every sample is processed at its own exact
//! length — padding bytes never enter the convolution, which is what keeps
//! padded batches bit-identical to unpadded ones.

use ndarray::{Array1, Array2, Array3, Axis};

use super::nn::{groupnorm1, groupnorm1_backward, relu, relu_backward, GroupNormCache};
use super::{ConvBlockSpec, ConvParams};

/// Output length of one ceil-mode convolution.
pub fn conv_out_len(in_len: usize, stride: usize) -> usize {
    in_len.div_ceil(stride)
}

fn padding(in_len: usize, kernel: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let out_len = conv_out_len(in_len, stride);
    let span = (kernel - 1) * dilation + 1;
    let total = ((out_len - 1) * stride + span).saturating_sub(in_len);
    (total / 2, total - total / 2)
}

/// Forward state of one convolution, kept for the backward pass.
pub struct ConvCache {
    /// Zero-padded input, `(padded positions × in channels)`.
    pub x_padded: Array2<f64>,
    /// Patch matrix, `(out positions × in_channels·kernel)`.
    pub cols: Array2<f64>,
    pub pad_left: usize,
    pub in_len: usize,
}

/// `x` is `(in positions × in channels)`; returns `(out positions × out channels)`.
pub fn conv1d(x: &Array2<f64>, params: &ConvParams, spec: &ConvBlockSpec) -> (Array2<f64>, ConvCache) {
    let (in_len, c_in) = x.dim();
    let (c_out, _, k) = params.w.dim();
    debug_assert_eq!(c_in, params.w.dim().1);
    let out_len = conv_out_len(in_len, spec.stride);
    let (pad_left, pad_right) = padding(in_len, spec.kernel, spec.stride, spec.dilation);

    let mut x_padded = Array2::zeros((in_len + pad_left + pad_right, c_in));
    x_padded.slice_mut(ndarray::s![pad_left..pad_left + in_len, ..]).assign(x);

    let mut cols = Array2::zeros((out_len, c_in * k));
    for t in 0..out_len {
        for tap in 0..k {
            let src = t * spec.stride + tap * spec.dilation;
            for c in 0..c_in {
                cols[[t, c * k + tap]] = x_padded[[src, c]];
            }
        }
    }
    // Flatten weights to (c_in·k × c_out) matching the patch layout.
    let mut wf = Array2::zeros((c_in * k, c_out));
    for o in 0..c_out {
        for c in 0..c_in {
            for tap in 0..k {
                wf[[c * k + tap, o]] = params.w[[o, c, tap]];
            }
        }
    }
    let mut y = cols.dot(&wf);
    y += &params.b;
    (y, ConvCache { x_padded, cols, pad_left, in_len })
}

/// Backward of [`conv1d`]; accumulates `dw`/`db`, returns `dx`.
pub fn conv1d_backward(
    cache: &ConvCache,
    params: &ConvParams,
    spec: &ConvBlockSpec,
    g: &Array2<f64>,
    dw: &mut Array3<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (c_out, c_in, k) = params.w.dim();
    let out_len = g.nrows();
    *db += &g.sum_axis(Axis(0));

    // dwf = colsᵀ·g, refolded into (c_out, c_in, k).
    let dwf = cache.cols.t().dot(g);
    for o in 0..c_out {
        for c in 0..c_in {
            for tap in 0..k {
                dw[[o, c, tap]] += dwf[[c * k + tap, o]];
            }
        }
    }

    // dcols = g·wfᵀ, scattered back through the patch map.
    let mut wf = Array2::zeros((c_in * k, c_out));
    for o in 0..c_out {
        for c in 0..c_in {
            for tap in 0..k {
                wf[[c * k + tap, o]] = params.w[[o, c, tap]];
            }
        }
    }
    let dcols = g.dot(&wf.t());
    let mut dx_padded: Array2<f64> = Array2::zeros(cache.x_padded.raw_dim());
    for t in 0..out_len {
        for tap in 0..k {
            let src = t * spec.stride + tap * spec.dilation;
            for c in 0..c_in {
                dx_padded[[src, c]] += dcols[[t, c * k + tap]];
            }
        }
    }
    dx_padded
        .slice(ndarray::s![cache.pad_left..cache.pad_left + cache.in_len, ..])
        .to_owned()
}

/// Forward state of one full block (conv → GroupNorm → ReLU).
pub struct BlockCache {
    pub conv: ConvCache,
    pub pre_norm: Array2<f64>,
    pub norm: GroupNormCache,
    pub pre_relu: Array2<f64>,
}

pub fn block_forward(
    x: &Array2<f64>,
    params: &ConvParams,
    spec: &ConvBlockSpec,
) -> (Array2<f64>, BlockCache) {
    let (pre_norm, conv) = conv1d(x, params, spec);
    let (pre_relu, norm) = groupnorm1(&pre_norm, &params.gain, &params.bias);
    let y = relu(&pre_relu);
    (y, BlockCache { conv, pre_norm, norm, pre_relu })
}

pub fn block_backward(
    cache: &BlockCache,
    params: &ConvParams,
    spec: &ConvBlockSpec,
    g: &Array2<f64>,
    grads: &mut ConvParams,
) -> Array2<f64> {
    let g = relu_backward(&cache.pre_relu, g);
    let g = groupnorm1_backward(&cache.norm, &params.gain, &g, &mut grads.gain, &mut grads.bias);
    conv1d_backward(&cache.conv, params, spec, &g, &mut grads.w, &mut grads.b)
}

/// Per-sample CNN trace across all blocks.
pub struct CnnCache {
    pub blocks: Vec<BlockCache>,
    /// Block inputs (the embedding for block 0, then each block's output).
    pub inputs: Vec<Array2<f64>>,
}

/// Run the full CNN stack on one sample's byte embeddings `(L × d_e)`.
pub fn cnn_forward(
    embedded: &Array2<f64>,
    params: &[ConvParams],
    specs: &[ConvBlockSpec],
) -> (Array2<f64>, CnnCache) {
    let mut inputs = vec![embedded.clone()];
    let mut blocks = Vec::with_capacity(specs.len());
    let mut current = embedded.clone();
    for (p, s) in params.iter().zip(specs) {
        let (y, cache) = block_forward(&current, p, s);
        inputs.push(y.clone());
        blocks.push(cache);
        current = y;
    }
    (current, CnnCache { blocks, inputs })
}

/// Backward through the CNN stack; returns the embedding gradient.
pub fn cnn_backward(
    cache: &CnnCache,
    params: &[ConvParams],
    specs: &[ConvBlockSpec],
    g: &Array2<f64>,
    grads: &mut [ConvParams],
) -> Array2<f64> {
    let mut g = g.clone();
    for i in (0..specs.len()).rev() {
        g = block_backward(&cache.blocks[i], &params[i], &specs[i], &g, &mut grads[i]);
    }
    g
}
