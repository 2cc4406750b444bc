//! The detector model: byte embedding → multi-scale dilated CNN →
//! hybrid Transformer/mLSTM encoder → four-way pooling → heads.
//!
//! The model consumes compressed byte streams directly. Each window's
//! stream becomes a token row `[CLS, b₀, b₁, …]` padded to the batch
//! width; all computation downstream of the embedding runs per sample on
//! the valid prefix only, which makes padding exactly invisible to the
//! outputs and to every gradient.
//!
//! Everything is plain `f64` on the CPU. Backward passes are hand-derived
//! and covered by finite-difference checks in the unit tests.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_rng;

pub mod checkpoint;
pub mod conv;
pub mod encoder;
pub mod nn;
pub mod pool;

use conv::{cnn_backward, cnn_forward, CnnCache};
use encoder::{
    mlstm_backward, mlstm_forward, transformer_backward, transformer_forward, DropoutPlan,
    MlstmCache, TransformerCache,
};
use pool::{
    classify, classify_backward, four_way_pool, four_way_pool_backward, predict_masked,
    predict_masked_backward, project, project_backward, HeadCache, PoolCache, ProjectionCache,
};

/// Vocabulary size: 256 byte values plus PAD, CLS, and MASK.
pub const VOCAB_SIZE: usize = 259;
/// Padding token id (never attended to; rows beyond a sample's length).
pub const PAD_ID: u16 = 256;
/// Classification token id, always at row position 0.
pub const CLS_ID: u16 = 257;
/// Mask token id used by span masking during fine-tuning.
pub const MASK_ID: u16 = 258;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One CNN block: 1-D convolution (kernel/stride/dilation) into `channels`,
/// then single-group GroupNorm and ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// Model hyperparameters. Defaults are the reference configuration; tests
/// and desk-scale runs shrink the widths but keep the topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Log-window size the datasets are built with (entries per window).
    pub window_size: usize,
    /// Byte-embedding width d_e.
    pub embed_dim: usize,
    /// Maximum total model length including CLS; byte payload cap is one less.
    pub max_stream_len: usize,
    /// Encoder width d (must equal the last CNN block's channels).
    pub model_dim: usize,
    pub cnn_blocks: Vec<ConvBlockSpec>,
    /// GroupNorm group count (whole-sample statistics when 1).
    pub norm_groups: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mlstm_conv_kernel: usize,
    pub mlstm_eps: f64,
    pub encoder_dropout: f64,
    pub head_dropout: f64,
    pub head_passes: usize,
    /// Output width of the contrastive projection head.
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_size: 100,
            embed_dim: 128,
            max_stream_len: 8192,
            model_dim: 512,
            cnn_blocks: vec![
                ConvBlockSpec { channels: 256, kernel: 5, stride: 2, dilation: 1 },
                ConvBlockSpec { channels: 512, kernel: 5, stride: 2, dilation: 2 },
                ConvBlockSpec { channels: 512, kernel: 5, stride: 4, dilation: 4 },
            ],
            norm_groups: 1,
            heads: 8,
            ffn_dim: 2048,
            mlstm_conv_kernel: 3,
            mlstm_eps: 1e-6,
            encoder_dropout: 0.1,
            head_dropout: 0.15,
            head_passes: 5,
            projection_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.cnn_blocks.is_empty() {
            return fail("model: cnn_blocks must not be empty".into());
        }
        if self.cnn_blocks.iter().any(|b| b.kernel == 0 || b.stride == 0 || b.dilation == 0) {
            return fail("model: kernel, stride, and dilation must all be ≥ 1".into());
        }
        let last = self.cnn_blocks.last().unwrap().channels;
        if last != self.model_dim {
            return fail(format!(
                "model: last CNN block has {} channels but model_dim is {}",
                last, self.model_dim
            ));
        }
        let stride: usize = self.cnn_blocks.iter().map(|b| b.stride).product();
        if stride != 16 {
            return fail(format!("model: cumulative CNN stride must be 16, got {}", stride));
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model: model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if !self.model_dim.is_multiple_of(4) {
            return fail(format!(
                "model: model_dim {} must be divisible by 4 (attention-pool hidden width)",
                self.model_dim
            ));
        }
        if self.norm_groups != 1 {
            return fail("model: norm_groups must be 1 (whole-sample statistics)".into());
        }
        if self.embed_dim == 0 || self.ffn_dim == 0 || self.projection_dim == 0 {
            return fail("model: embed_dim, ffn_dim, and projection_dim must be ≥ 1".into());
        }
        if self.max_stream_len < 2 {
            return fail("model: max_stream_len must be ≥ 2 (CLS plus at least one byte)".into());
        }
        if self.mlstm_conv_kernel == 0 {
            return fail("model: mlstm_conv_kernel must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.encoder_dropout) || !(0.0..1.0).contains(&self.head_dropout)
        {
            return fail("model: dropout rates must lie in [0, 1)".into());
        }
        if self.head_passes == 0 {
            return fail("model: head_passes must be ≥ 1".into());
        }
        if self.mlstm_eps <= 0.0 {
            return fail("model: mlstm_eps must be > 0".into());
        }
        Ok(())
    }

    /// Length of the CNN output for a byte stream of `len` bytes (≥ 1).
    pub fn downsampled_length(&self, len: usize) -> usize {
        let mut l = len;
        for b in &self.cnn_blocks {
            l = l.div_ceil(b.stride);
        }
        l.max(1)
    }

    /// Hidden width of the attention pool (d/4).
    pub fn attn_pool_hidden(&self) -> usize {
        self.model_dim / 4
    }

    /// Maximum byte payload per sample (total length minus the CLS slot).
    pub fn max_payload(&self) -> usize {
        self.max_stream_len - 1
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Weights of one CNN block.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// Convolution weights `(C_out × C_in × K)`.
    pub w: Array3<f64>,
    pub b: Array1<f64>,
    /// GroupNorm per-channel gain and bias.
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// SwiGLU feed-forward weights.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub gate: Array2<f64>,
    pub up: Array2<f64>,
    pub down: Array2<f64>,
}

/// Weights of one encoder layer (Transformer or mLSTM — the depthwise conv
/// is present only for the latter).
#[derive(Debug, Clone)]
pub struct MixerLayerParams {
    pub norm1: Array1<f64>,
    pub conv_w: Option<Array2<f64>>,
    pub conv_b: Option<Array1<f64>>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub norm2: Array1<f64>,
    pub ffn: FfnParams,
}

/// Every learnable tensor in the model.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    /// Token embedding `(VOCAB_SIZE × d_e)`.
    pub embedding: Array2<f64>,
    /// CLS projection `d_e → d`.
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub conv: Vec<ConvParams>,
    pub transformer: MixerLayerParams,
    pub mlstm: MixerLayerParams,
    /// Attention-pool weights: `(d × d/4)` and `(d/4)`.
    pub pool_w1: Array2<f64>,
    pub pool_w2: Array1<f64>,
    /// Classifier `(4d × 2)` plus bias.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    /// Learnable masked-feature embedding (d).
    pub mask_embed: Array1<f64>,
    /// Masked-feature prediction map `(d × d)`.
    pub pred_w: Array2<f64>,
    /// Contrastive projection head: `4d → d → projection_dim`.
    pub proj_w1: Array2<f64>,
    pub proj_b1: Array1<f64>,
    pub proj_w2: Array2<f64>,
    pub proj_b2: Array1<f64>,
}

fn glorot2(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

fn glorot3(rng: &mut ChaCha20Rng, c_out: usize, c_in: usize, k: usize) -> Array3<f64> {
    let limit = (6.0 / ((c_in * k + c_out * k) as f64)).sqrt();
    Array3::from_shape_fn((c_out, c_in, k), |_| rng.random_range(-limit..limit))
}

fn glorot1(rng: &mut ChaCha20Rng, n: usize, fan: usize) -> Array1<f64> {
    let limit = (6.0 / (fan + 1) as f64).sqrt();
    Array1::from_shape_fn(n, |_| rng.random_range(-limit..limit))
}

fn init_mixer(
    rng: &mut ChaCha20Rng,
    d: usize,
    d_ff: usize,
    conv_kernel: Option<usize>,
) -> MixerLayerParams {
    MixerLayerParams {
        norm1: Array1::ones(d),
        conv_w: conv_kernel.map(|k| {
            let limit = (6.0 / (2 * k) as f64).sqrt();
            Array2::from_shape_fn((d, k), |_| rng.random_range(-limit..limit))
        }),
        conv_b: conv_kernel.map(|_| Array1::zeros(d)),
        wq: glorot2(rng, d, d),
        wk: glorot2(rng, d, d),
        wv: glorot2(rng, d, d),
        wo: glorot2(rng, d, d),
        norm2: Array1::ones(d),
        ffn: FfnParams {
            gate: glorot2(rng, d, d_ff),
            up: glorot2(rng, d, d_ff),
            down: glorot2(rng, d_ff, d),
        },
    }
}

fn zero_mixer(p: &MixerLayerParams) -> MixerLayerParams {
    MixerLayerParams {
        norm1: Array1::zeros(p.norm1.raw_dim()),
        conv_w: p.conv_w.as_ref().map(|w| Array2::zeros(w.raw_dim())),
        conv_b: p.conv_b.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        wq: Array2::zeros(p.wq.raw_dim()),
        wk: Array2::zeros(p.wk.raw_dim()),
        wv: Array2::zeros(p.wv.raw_dim()),
        wo: Array2::zeros(p.wo.raw_dim()),
        norm2: Array1::zeros(p.norm2.raw_dim()),
        ffn: FfnParams {
            gate: Array2::zeros(p.ffn.gate.raw_dim()),
            up: Array2::zeros(p.ffn.up.raw_dim()),
            down: Array2::zeros(p.ffn.down.raw_dim()),
        },
    }
}

impl ModelParameters {
    /// Fresh parameters: symmetric variance-scaled weights from the seed,
    /// normalization gains 1, biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> ModelParameters {
        let d = config.model_dim;
        let rng = &mut derive_rng(seed, "init", 0);
        let embedding = glorot2(rng, VOCAB_SIZE, config.embed_dim);
        let cls_w = glorot2(rng, config.embed_dim, d);
        let cls_b = Array1::zeros(d);
        let mut conv = Vec::with_capacity(config.cnn_blocks.len());
        let mut c_in = config.embed_dim;
        for block in &config.cnn_blocks {
            conv.push(ConvParams {
                w: glorot3(rng, block.channels, c_in, block.kernel),
                b: Array1::zeros(block.channels),
                gain: Array1::ones(block.channels),
                bias: Array1::zeros(block.channels),
            });
            c_in = block.channels;
        }
        let transformer = init_mixer(rng, d, config.ffn_dim, None);
        let mlstm = init_mixer(rng, d, config.ffn_dim, Some(config.mlstm_conv_kernel));
        let dp = config.attn_pool_hidden();
        ModelParameters {
            embedding,
            cls_w,
            cls_b,
            conv,
            transformer,
            mlstm,
            pool_w1: glorot2(rng, d, dp),
            pool_w2: glorot1(rng, dp, dp),
            head_w: glorot2(rng, 4 * d, 2),
            head_b: Array1::zeros(2),
            mask_embed: glorot1(rng, d, d),
            pred_w: glorot2(rng, d, d),
            proj_w1: glorot2(rng, 4 * d, d),
            proj_b1: Array1::zeros(d),
            proj_w2: glorot2(rng, d, config.projection_dim),
            proj_b2: Array1::zeros(config.projection_dim),
        }
    }

    /// Same shapes, all zeros — the starting point for gradient accumulation.
    pub fn zeros_like(&self) -> ModelParameters {
        ModelParameters {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            cls_w: Array2::zeros(self.cls_w.raw_dim()),
            cls_b: Array1::zeros(self.cls_b.raw_dim()),
            conv: self
                .conv
                .iter()
                .map(|p| ConvParams {
                    w: Array3::zeros(p.w.raw_dim()),
                    b: Array1::zeros(p.b.raw_dim()),
                    gain: Array1::zeros(p.gain.raw_dim()),
                    bias: Array1::zeros(p.bias.raw_dim()),
                })
                .collect(),
            transformer: zero_mixer(&self.transformer),
            mlstm: zero_mixer(&self.mlstm),
            pool_w1: Array2::zeros(self.pool_w1.raw_dim()),
            pool_w2: Array1::zeros(self.pool_w2.raw_dim()),
            head_w: Array2::zeros(self.head_w.raw_dim()),
            head_b: Array1::zeros(self.head_b.raw_dim()),
            mask_embed: Array1::zeros(self.mask_embed.raw_dim()),
            pred_w: Array2::zeros(self.pred_w.raw_dim()),
            proj_w1: Array2::zeros(self.proj_w1.raw_dim()),
            proj_b1: Array1::zeros(self.proj_b1.raw_dim()),
            proj_w2: Array2::zeros(self.proj_w2.raw_dim()),
            proj_b2: Array1::zeros(self.proj_b2.raw_dim()),
        }
    }

    /// All tensors as `(name, shape, flat values)`, in a fixed order shared
    /// with [`ModelParameters::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn push<'a, D: ndarray::Dimension>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: impl Into<String>,
            a: &'a ndarray::Array<f64, D>,
        ) {
            out.push((name.into(), a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        push(&mut out, "embedding", &self.embedding);
        push(&mut out, "cls_w", &self.cls_w);
        push(&mut out, "cls_b", &self.cls_b);
        for (i, p) in self.conv.iter().enumerate() {
            push(&mut out, format!("conv{}_w", i), &p.w);
            push(&mut out, format!("conv{}_b", i), &p.b);
            push(&mut out, format!("conv{}_gain", i), &p.gain);
            push(&mut out, format!("conv{}_bias", i), &p.bias);
        }
        for (tag, layer) in [("tf", &self.transformer), ("ml", &self.mlstm)] {
            push(&mut out, format!("{}_norm1", tag), &layer.norm1);
            if let Some(w) = &layer.conv_w {
                push(&mut out, format!("{}_conv_w", tag), w);
            }
            if let Some(b) = &layer.conv_b {
                push(&mut out, format!("{}_conv_b", tag), b);
            }
            push(&mut out, format!("{}_wq", tag), &layer.wq);
            push(&mut out, format!("{}_wk", tag), &layer.wk);
            push(&mut out, format!("{}_wv", tag), &layer.wv);
            push(&mut out, format!("{}_wo", tag), &layer.wo);
            push(&mut out, format!("{}_norm2", tag), &layer.norm2);
            push(&mut out, format!("{}_ffn_gate", tag), &layer.ffn.gate);
            push(&mut out, format!("{}_ffn_up", tag), &layer.ffn.up);
            push(&mut out, format!("{}_ffn_down", tag), &layer.ffn.down);
        }
        push(&mut out, "pool_w1", &self.pool_w1);
        push(&mut out, "pool_w2", &self.pool_w2);
        push(&mut out, "head_w", &self.head_w);
        push(&mut out, "head_b", &self.head_b);
        push(&mut out, "mask_embed", &self.mask_embed);
        push(&mut out, "pred_w", &self.pred_w);
        push(&mut out, "proj_w1", &self.proj_w1);
        push(&mut out, "proj_b1", &self.proj_b1);
        push(&mut out, "proj_w2", &self.proj_w2);
        push(&mut out, "proj_b2", &self.proj_b2);
        out
    }

    /// Mutable flat views of every tensor, same order as [`tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("embedding".into(), self.embedding.as_slice_mut().unwrap()));
        out.push(("cls_w".into(), self.cls_w.as_slice_mut().unwrap()));
        out.push(("cls_b".into(), self.cls_b.as_slice_mut().unwrap()));
        for (i, p) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{}_w", i), p.w.as_slice_mut().unwrap()));
            out.push((format!("conv{}_b", i), p.b.as_slice_mut().unwrap()));
            out.push((format!("conv{}_gain", i), p.gain.as_slice_mut().unwrap()));
            out.push((format!("conv{}_bias", i), p.bias.as_slice_mut().unwrap()));
        }
        for (tag, layer) in [("tf", &mut self.transformer), ("ml", &mut self.mlstm)] {
            out.push((format!("{}_norm1", tag), layer.norm1.as_slice_mut().unwrap()));
            if let Some(w) = &mut layer.conv_w {
                out.push((format!("{}_conv_w", tag), w.as_slice_mut().unwrap()));
            }
            if let Some(b) = &mut layer.conv_b {
                out.push((format!("{}_conv_b", tag), b.as_slice_mut().unwrap()));
            }
            out.push((format!("{}_wq", tag), layer.wq.as_slice_mut().unwrap()));
            out.push((format!("{}_wk", tag), layer.wk.as_slice_mut().unwrap()));
            out.push((format!("{}_wv", tag), layer.wv.as_slice_mut().unwrap()));
            out.push((format!("{}_wo", tag), layer.wo.as_slice_mut().unwrap()));
            out.push((format!("{}_norm2", tag), layer.norm2.as_slice_mut().unwrap()));
            out.push((format!("{}_ffn_gate", tag), layer.ffn.gate.as_slice_mut().unwrap()));
            out.push((format!("{}_ffn_up", tag), layer.ffn.up.as_slice_mut().unwrap()));
            out.push((format!("{}_ffn_down", tag), layer.ffn.down.as_slice_mut().unwrap()));
        }
        out.push(("pool_w1".into(), self.pool_w1.as_slice_mut().unwrap()));
        out.push(("pool_w2".into(), self.pool_w2.as_slice_mut().unwrap()));
        out.push(("head_w".into(), self.head_w.as_slice_mut().unwrap()));
        out.push(("head_b".into(), self.head_b.as_slice_mut().unwrap()));
        out.push(("mask_embed".into(), self.mask_embed.as_slice_mut().unwrap()));
        out.push(("pred_w".into(), self.pred_w.as_slice_mut().unwrap()));
        out.push(("proj_w1".into(), self.proj_w1.as_slice_mut().unwrap()));
        out.push(("proj_b1".into(), self.proj_b1.as_slice_mut().unwrap()));
        out.push(("proj_w2".into(), self.proj_w2.as_slice_mut().unwrap()));
        out.push(("proj_b2".into(), self.proj_b2.as_slice_mut().unwrap()));
        out
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// A batch of token rows: `[CLS, bytes…, PAD…]`, width = 1 + longest stream.
#[derive(Debug, Clone)]
pub struct ByteBatch {
    pub tokens: Array2<u16>,
    /// Byte-stream length per row (after the `max_payload` cap).
    pub lengths: Vec<usize>,
    pub labels: Vec<u8>,
}

impl ByteBatch {
    /// Build a batch from `(stream, label)` pairs. Streams longer than the
    /// model's payload cap are truncated; the batch is padded to the longest
    /// remaining stream (at least one byte column).
    pub fn from_streams(items: &[(&[u8], u8)], config: &ModelConfig) -> ByteBatch {
        assert!(!items.is_empty(), "a batch needs at least one sample");
        let cap = config.max_payload();
        let lengths: Vec<usize> = items.iter().map(|(s, _)| s.len().min(cap)).collect();
        let width = 1 + lengths.iter().copied().max().unwrap_or(0).max(1);
        let mut tokens = Array2::from_elem((items.len(), width), PAD_ID);
        for (i, (stream, _)) in items.iter().enumerate() {
            tokens[[i, 0]] = CLS_ID;
            for (j, &b) in stream.iter().take(lengths[i]).enumerate() {
                tokens[[i, 1 + j]] = b as u16;
            }
        }
        let labels = items.iter().map(|(_, l)| *l).collect();
        ByteBatch { tokens, lengths, labels }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Training mode draws dropout masks (and mask positions in pretraining);
/// eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a forward pass should produce besides the encoder trace.
pub struct ForwardRequest<'a> {
    pub mode: Mode,
    /// Required in training mode; drives every stochastic draw.
    pub rng: Option<&'a mut ChaCha20Rng>,
    /// `Some(ratio)` enables masked-feature pretraining outputs.
    pub mask_ratio: Option<f64>,
    pub want_logits: bool,
    pub want_projection: bool,
}

impl<'a> ForwardRequest<'a> {
    pub fn eval_logits() -> ForwardRequest<'static> {
        ForwardRequest {
            mode: Mode::Eval,
            rng: None,
            mask_ratio: None,
            want_logits: true,
            want_projection: false,
        }
    }
}

/// Cached forward state for one batch, consumed by [`backward`].
pub struct BatchTrace {
    pub tokens: Array2<u16>,
    pub lengths: Vec<usize>,
    /// CNN output length per sample.
    pub valid_t: Vec<usize>,
    cnn: Vec<Option<CnnCache>>,
    /// Masked feature positions per sample (pretraining only).
    pub masked: Option<Vec<Vec<usize>>>,
    tf: Vec<TransformerCache>,
    ml: Vec<MlstmCache>,
    /// Encoder output rows at masked positions, `(N × d)`.
    pred_rows: Option<Array2<f64>>,
    pool: Vec<PoolCache>,
    pub pooled: Array2<f64>,
    head: Option<HeadCache>,
    proj: Option<ProjectionCache>,
}

/// Forward outputs; `trace` carries everything backward needs.
pub struct ForwardOutput {
    pub logits: Option<Array2<f64>>,
    pub projection: Option<Array2<f64>>,
    /// Raw masked-feature predictions `(N × d)` in batch order.
    pub predictions: Option<Array2<f64>>,
    /// Detached pre-mask feature rows `(N × d)` aligned with `predictions`.
    pub targets: Option<Array2<f64>>,
    pub trace: BatchTrace,
}

/// Draw `⌈ratio·valid_t⌉` (min 1) distinct masked positions in `0..valid_t`.
pub fn sample_mask_positions(valid_t: usize, ratio: f64, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let count = ((ratio * valid_t as f64).ceil() as usize).clamp(1, valid_t);
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, valid_t, count).into_vec();
    picks.sort_unstable();
    picks
}

/// Run the full model on a batch.
pub fn forward(
    config: &ModelConfig,
    params: &ModelParameters,
    batch: &ByteBatch,
    request: ForwardRequest<'_>,
) -> ForwardOutput {
    let ForwardRequest { mode, mut rng, mask_ratio, want_logits, want_projection } = request;
    if mode == Mode::Train {
        assert!(rng.is_some(), "training mode requires an RNG");
    }
    let b = batch.len();
    let d = config.model_dim;
    let pretrain = mask_ratio.is_some();

    // CLS row is shared by every sample: project E[CLS] once.
    let cls_emb = params.embedding.row(CLS_ID as usize);
    let cls_vec = cls_emb.dot(&params.cls_w) + &params.cls_b;

    let valid_t: Vec<usize> =
        batch.lengths.iter().map(|&l| config.downsampled_length(l)).collect();
    let s_max = 1 + valid_t.iter().copied().max().unwrap();
    let pe = nn::sinusoidal_pe(s_max, d);

    let mut cnn_caches = Vec::with_capacity(b);
    let mut masked: Vec<Vec<usize>> = Vec::with_capacity(b);
    let mut target_rows: Vec<Array1<f64>> = Vec::new();
    let mut tf_caches = Vec::with_capacity(b);
    let mut ml_caches = Vec::with_capacity(b);
    let mut pool_caches = Vec::with_capacity(b);
    let mut pred_row_list: Vec<Array1<f64>> = Vec::new();
    let mut pooled = Array2::zeros((b, 4 * d));
    let enc_plan = DropoutPlan { rate: config.encoder_dropout };

    for i in 0..b {
        let len = batch.lengths[i];
        let t_i = valid_t[i];

        // Embed the sample's bytes and run the CNN at its exact length.
        let (mut feat, cache) = if len > 0 {
            let mut emb = Array2::zeros((len, config.embed_dim));
            for j in 0..len {
                let tok = batch.tokens[[i, 1 + j]] as usize;
                emb.row_mut(j).assign(&params.embedding.row(tok));
            }
            let (feat, cache) = cnn_forward(&emb, &params.conv, &config.cnn_blocks);
            (feat, Some(cache))
        } else {
            (Array2::zeros((1, d)), None)
        };
        debug_assert_eq!(feat.nrows(), t_i);

        // Masked-feature pretraining: replace a random subset with e_mask,
        // keeping detached copies of the originals as targets.
        if pretrain {
            let ratio = mask_ratio.unwrap();
            let r = rng.as_deref_mut().expect("pretraining requires an RNG");
            let positions = sample_mask_positions(t_i, ratio, r);
            for &t in &positions {
                target_rows.push(feat.row(t).to_owned());
                feat.row_mut(t).assign(&params.mask_embed);
            }
            masked.push(positions);
        }

        // Assemble the valid prefix with CLS and positional encodings.
        let s_v = 1 + t_i;
        let mut h = Array2::zeros((s_v, d));
        h.row_mut(0).assign(&(&cls_vec + &pe.row(0)));
        for t in 0..t_i {
            h.row_mut(1 + t).assign(&(&feat.row(t) + &pe.row(1 + t)));
        }

        let tf_drop = match mode {
            Mode::Train => rng.as_deref_mut().map(|r| (&enc_plan, r)),
            Mode::Eval => None,
        };
        let (h, tf_cache) = transformer_forward(&h, &params.transformer, config.heads, tf_drop);
        let ml_drop = match mode {
            Mode::Train => rng.as_deref_mut().map(|r| (&enc_plan, r)),
            Mode::Eval => None,
        };
        let (h, ml_cache) = mlstm_forward(
            &h,
            &params.mlstm,
            config.heads,
            config.mlstm_conv_kernel,
            config.mlstm_eps,
            ml_drop,
        );

        if pretrain {
            for &t in &masked[i] {
                pred_row_list.push(h.row(1 + t).to_owned());
            }
        }

        let (p, pool_cache) = four_way_pool(&h, &params.pool_w1, &params.pool_w2);
        pooled.row_mut(i).assign(&p);
        cnn_caches.push(cache);
        tf_caches.push(tf_cache);
        ml_caches.push(ml_cache);
        pool_caches.push(pool_cache);
    }

    let (logits, head_cache) = if want_logits {
        let dropout = match mode {
            Mode::Train => {
                let r = rng.expect("training mode requires an RNG");
                Some((config.head_passes, config.head_dropout, r))
            }
            Mode::Eval => None,
        };
        let (l, c) = classify(&pooled, &params.head_w, &params.head_b, dropout, true);
        (Some(l), Some(c))
    } else {
        (None, None)
    };

    let (projection, proj_cache) = if want_projection {
        let (z, c) = project(
            &pooled,
            &params.proj_w1,
            &params.proj_b1,
            &params.proj_w2,
            &params.proj_b2,
        );
        (Some(z), Some(c))
    } else {
        (None, None)
    };

    let (predictions, targets, pred_rows) = if pretrain {
        let n = pred_row_list.len();
        let mut rows = Array2::zeros((n, d));
        let mut tgts = Array2::zeros((n, d));
        for (r, row) in pred_row_list.iter().enumerate() {
            rows.row_mut(r).assign(row);
            tgts.row_mut(r).assign(&target_rows[r]);
        }
        let preds = predict_masked(&rows, &params.pred_w);
        (Some(preds), Some(tgts), Some(rows))
    } else {
        (None, None, None)
    };

    ForwardOutput {
        logits,
        projection,
        predictions,
        targets,
        trace: BatchTrace {
            tokens: batch.tokens.clone(),
            lengths: batch.lengths.clone(),
            valid_t,
            cnn: cnn_caches,
            masked: if pretrain { Some(masked) } else { None },
            tf: tf_caches,
            ml: ml_caches,
            pred_rows,
            pool: pool_caches,
            pooled,
            head: head_cache,
            proj: proj_cache,
        },
    }
}

/// Backpropagate through a traced forward pass, accumulating into `grads`.
///
/// `dlogits`, `dprojection`, and `dpredictions` are the loss gradients with
/// respect to the corresponding forward outputs (any subset may be present).
pub fn backward(
    config: &ModelConfig,
    params: &ModelParameters,
    trace: &BatchTrace,
    dlogits: Option<&Array2<f64>>,
    dprojection: Option<&Array2<f64>>,
    dpredictions: Option<&Array2<f64>>,
    grads: &mut ModelParameters,
) {
    let b = trace.lengths.len();
    let d = config.model_dim;
    let s_max = 1 + trace.valid_t.iter().copied().max().unwrap();
    let pe = nn::sinusoidal_pe(s_max, d);
    let _ = pe; // positional encodings are additive constants: gradient passes through

    let mut dpooled = Array2::zeros((b, 4 * d));
    if let Some(g) = dlogits {
        let cache = trace.head.as_ref().expect("logits were produced in the forward pass");
        dpooled += &classify_backward(cache, &params.head_w, g, &mut grads.head_w, &mut grads.head_b);
    }
    if let Some(g) = dprojection {
        let cache = trace.proj.as_ref().expect("projection was produced in the forward pass");
        dpooled += &project_backward(
            cache,
            &params.proj_w1,
            &params.proj_w2,
            g,
            &mut grads.proj_w1,
            &mut grads.proj_b1,
            &mut grads.proj_w2,
            &mut grads.proj_b2,
        );
    }

    // Gradient to the encoder rows that fed the prediction head.
    let dpred_rows = dpredictions.map(|g| {
        let rows = trace.pred_rows.as_ref().expect("predictions were produced");
        predict_masked_backward(rows, &params.pred_w, g, &mut grads.pred_w)
    });

    let mut dcls_sum = Array1::zeros(d);
    let mut pred_cursor = 0usize;
    for i in 0..b {
        let t_i = trace.valid_t[i];
        let mut dh = four_way_pool_backward(
            &trace.pool[i],
            &params.pool_w1,
            &params.pool_w2,
            &dpooled.row(i).to_owned(),
            &mut grads.pool_w1,
            &mut grads.pool_w2,
        );
        if let (Some(dpr), Some(masked)) = (&dpred_rows, &trace.masked) {
            for &t in &masked[i] {
                let mut row = dh.row_mut(1 + t);
                row += &dpr.row(pred_cursor);
                pred_cursor += 1;
            }
        }

        let dh = mlstm_backward(
            &trace.ml[i],
            &params.mlstm,
            config.heads,
            config.mlstm_conv_kernel,
            &dh,
            &mut grads.mlstm,
        );
        let dh0 = transformer_backward(
            &trace.tf[i],
            &params.transformer,
            config.heads,
            &dh,
            &mut grads.transformer,
        );

        dcls_sum += &dh0.row(0);
        let mut dfeat = dh0.slice(s![1.., ..]).to_owned();
        if let Some(masked) = &trace.masked {
            for &t in &masked[i] {
                grads.mask_embed += &dfeat.row(t);
                dfeat.row_mut(t).fill(0.0);
            }
        }
        debug_assert_eq!(dfeat.nrows(), t_i);

        let len = trace.lengths[i];
        if let Some(cache) = &trace.cnn[i] {
            let demb =
                cnn_backward(cache, &params.conv, &config.cnn_blocks, &dfeat, &mut grads.conv);
            for j in 0..len {
                let tok = trace.tokens[[i, 1 + j]] as usize;
                let mut row = grads.embedding.row_mut(tok);
                row += &demb.row(j);
            }
        }
    }

    // CLS projection: the shared CLS vector fed every sample's row 0.
    grads.cls_b += &dcls_sum;
    let cls_emb = params.embedding.row(CLS_ID as usize).to_owned();
    let outer = cls_emb
        .view()
        .insert_axis(Axis(1))
        .dot(&dcls_sum.view().insert_axis(Axis(0)));
    grads.cls_w += &outer;
    let dcls_emb = params.cls_w.dot(&dcls_sum);
    let mut row = grads.embedding.row_mut(CLS_ID as usize);
    row += &dcls_emb;
}

/// Small fixtures shared by unit tests across the crate.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// A miniature configuration with the reference topology.
    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            window_size: 10,
            embed_dim: 8,
            max_stream_len: 256,
            model_dim: 16,
            cnn_blocks: vec![
                ConvBlockSpec { channels: 8, kernel: 3, stride: 2, dilation: 1 },
                ConvBlockSpec { channels: 12, kernel: 3, stride: 2, dilation: 2 },
                ConvBlockSpec { channels: 16, kernel: 3, stride: 4, dilation: 4 },
            ],
            norm_groups: 1,
            heads: 4,
            ffn_dim: 32,
            mlstm_conv_kernel: 3,
            mlstm_eps: 1e-6,
            encoder_dropout: 0.1,
            head_dropout: 0.15,
            head_passes: 5,
            projection_dim: 12,
        }
    }

    /// Freshly initialized parameters for the miniature configuration.
    pub(crate) fn tiny_params(seed: u64) -> ModelParameters {
        ModelParameters::init(&tiny_config(), seed)
    }
}
