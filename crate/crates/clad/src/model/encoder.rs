//! The hybrid encoder: one Pre-Norm Transformer layer and one mLSTM layer.
//!
//! Both layers share the residual Pre-Norm skeleton
//! `H' = H + Dropout(Mixer(RMSNorm(H)))`, `H¹ = H' + SwiGLU(RMSNorm(H'))`;
//! they differ in the mixer. The Transformer mixes with masked multi-head
//! softmax attention; the mLSTM mixes through a matrix memory with
//! squared-ReLU query/key kernels after a depthwise convolution, a
//! linear-time global aggregation with no causal mask.
//!
//! Layers operate on one sample's valid prefix `(S_v × d)` — callers slice
//! off padding before entering, which is how padded positions stay exactly
//! invisible in both directions.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::nn::{
    linear, rmsnorm, rmsnorm_backward, silu, silu_prime, softmax_backward, softmax_inplace,
    RmsNormCache,
};
use super::{FfnParams, MixerLayerParams};

/// Dropout configuration for a training-mode forward.
pub struct DropoutPlan {
    pub rate: f64,
}

/// An inverted-dropout mask (zeros and `1/(1-rate)`), or `None` in eval mode.
type BranchMask = Option<Array2<f64>>;

fn sample_mask(
    shape: (usize, usize),
    plan: Option<(&DropoutPlan, &mut ChaCha20Rng)>,
) -> BranchMask {
    let (plan, rng) = plan?;
    if plan.rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - plan.rate;
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

// ---------------------------------------------------------------------------
// SwiGLU FFN sublayer
// ---------------------------------------------------------------------------

pub struct FfnCache {
    pub input: Array2<f64>,
    pub gate_pre: Array2<f64>,
    pub up: Array2<f64>,
    pub hidden: Array2<f64>,
}

fn ffn_forward(x: &Array2<f64>, p: &FfnParams) -> (Array2<f64>, FfnCache) {
    let gate_pre = x.dot(&p.gate);
    let up = x.dot(&p.up);
    let hidden = ndarray::Zip::from(&gate_pre).and(&up).map_collect(|&a, &u| silu(a) * u);
    let y = hidden.dot(&p.down);
    (y, FfnCache { input: x.clone(), gate_pre, up, hidden })
}

fn ffn_backward(
    cache: &FfnCache,
    p: &FfnParams,
    g: &Array2<f64>,
    grads: &mut FfnParams,
) -> Array2<f64> {
    grads.down += &cache.hidden.t().dot(g);
    let dhidden = g.dot(&p.down.t());
    let dup = ndarray::Zip::from(&dhidden)
        .and(&cache.gate_pre)
        .map_collect(|&dh, &a| dh * silu(a));
    let dgate_pre = ndarray::Zip::from(&dhidden)
        .and(&cache.up)
        .and(&cache.gate_pre)
        .map_collect(|&dh, &u, &a| dh * u * silu_prime(a));
    grads.gate += &cache.input.t().dot(&dgate_pre);
    grads.up += &cache.input.t().dot(&dup);
    dgate_pre.dot(&p.gate.t()) + dup.dot(&p.up.t())
}

// ---------------------------------------------------------------------------
// Transformer layer
// ---------------------------------------------------------------------------

pub struct TransformerCache {
    pub input: Array2<f64>,
    pub norm1: RmsNormCache,
    pub normed1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head attention probabilities, each `(S_v × S_v)`.
    pub probs: Vec<Array2<f64>>,
    pub context: Array2<f64>,
    pub branch_mask: BranchMask,
    pub mid: Array2<f64>,
    pub norm2: RmsNormCache,
    pub normed2: Array2<f64>,
    pub ffn: FfnCache,
}

/// One Pre-Norm self-attention layer over a sample's valid prefix.
pub fn transformer_forward(
    x: &Array2<f64>,
    p: &MixerLayerParams,
    heads: usize,
    dropout: Option<(&DropoutPlan, &mut ChaCha20Rng)>,
) -> (Array2<f64>, TransformerCache) {
    let (s_v, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (normed1, norm1) = rmsnorm(x, &p.norm1);
    let q = normed1.dot(&p.wq);
    let k = normed1.dot(&p.wk);
    let v = normed1.dot(&p.wv);

    let mut context = Array2::zeros((s_v, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        for mut row in scores.axis_iter_mut(Axis(0)) {
            softmax_inplace(row.as_slice_mut().expect("contiguous row"));
        }
        context.slice_mut(cols).assign(&scores.dot(&vh));
        probs.push(scores);
    }
    let mut branch = context.dot(&p.wo);
    let branch_mask = sample_mask((s_v, d), dropout);
    if let Some(m) = &branch_mask {
        branch *= m;
    }
    let mid = x + &branch;

    let (normed2, norm2) = rmsnorm(&mid, &p.norm2);
    let (ffn_out, ffn) = ffn_forward(&normed2, &p.ffn);
    let y = &mid + &ffn_out;
    (
        y,
        TransformerCache {
            input: x.clone(),
            norm1,
            normed1,
            q,
            k,
            v,
            probs,
            context,
            branch_mask,
            mid,
            norm2,
            normed2,
            ffn,
        },
    )
}

pub fn transformer_backward(
    cache: &TransformerCache,
    p: &MixerLayerParams,
    heads: usize,
    g: &Array2<f64>,
    grads: &mut MixerLayerParams,
) -> Array2<f64> {
    let (s_v, d) = cache.input.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // y = mid + ffn(rmsnorm(mid))
    let dffn = ffn_backward(&cache.ffn, &p.ffn, g, &mut grads.ffn);
    let mut dmid = g.clone();
    dmid += &rmsnorm_backward(&cache.mid, &p.norm2, &cache.norm2, &dffn, &mut grads.norm2);

    // mid = input + mask ⊙ (context · wo)
    let mut dbranch = dmid.clone();
    if let Some(m) = &cache.branch_mask {
        dbranch *= m;
    }
    grads.wo += &cache.context.t().dot(&dbranch);
    let dcontext = dbranch.dot(&p.wo.t());

    let mut dq = Array2::zeros((s_v, d));
    let mut dk = Array2::zeros((s_v, d));
    let mut dv = Array2::zeros((s_v, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let probs = &cache.probs[h];
        let dctx_h = dcontext.slice(cols);

        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let dprobs = dctx_h.dot(&vh.t());
        let mut dscores = Array2::zeros((s_v, s_v));
        for t in 0..s_v {
            softmax_backward(
                probs.row(t).as_slice().unwrap(),
                dprobs.row(t).as_slice().unwrap(),
                dscores.row_mut(t).as_slice_mut().unwrap(),
            );
        }
        dscores *= scale;
        dq.slice_mut(cols).assign(&dscores.dot(&kh));
        dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
    }
    grads.wq += &cache.normed1.t().dot(&dq);
    grads.wk += &cache.normed1.t().dot(&dk);
    grads.wv += &cache.normed1.t().dot(&dv);
    let dnormed1 = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    let mut dx = dmid;
    dx += &rmsnorm_backward(&cache.input, &p.norm1, &cache.norm1, &dnormed1, &mut grads.norm1);
    dx
}

// ---------------------------------------------------------------------------
// mLSTM layer
// ---------------------------------------------------------------------------

pub struct MlstmCache {
    pub input: Array2<f64>,
    pub norm1: RmsNormCache,
    pub normed1: Array2<f64>,
    /// Zero-padded normed input, `(S_v + kernel − 1) × d`.
    pub conv_in: Array2<f64>,
    pub conv_out: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub q_hat: Array2<f64>,
    pub k_hat: Array2<f64>,
    /// Per-head matrix memory `(dh × dh)` and key sum `(dh)`.
    pub memory: Vec<(Array2<f64>, Array1<f64>)>,
    /// Per-head denominators `(S_v)`.
    pub denom: Vec<Array1<f64>>,
    pub mixed: Array2<f64>,
    pub branch_mask: BranchMask,
    pub mid: Array2<f64>,
    pub norm2: RmsNormCache,
    pub normed2: Array2<f64>,
    pub ffn: FfnCache,
}

fn squared_relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| {
        let r = v.max(0.0);
        r * r
    })
}

/// One Pre-Norm mLSTM layer over a sample's valid prefix.
///
/// Per head: `q̂ = ReLU(q)²`, `k̂ = ReLU(k)²`, `C = Σ_t k̂_t v_tᵀ`,
/// `z = Σ_t k̂_t`, `o_t = (q̂_tᵀ C)/(q̂_tᵀ z + ε)` — sums run over the whole
/// (valid) sequence with no causal mask.
pub fn mlstm_forward(
    x: &Array2<f64>,
    p: &MixerLayerParams,
    heads: usize,
    kernel: usize,
    eps: f64,
    dropout: Option<(&DropoutPlan, &mut ChaCha20Rng)>,
) -> (Array2<f64>, MlstmCache) {
    let (s_v, d) = x.dim();
    let dh = d / heads;
    let conv_w = p.conv_w.as_ref().expect("mLSTM layer has a depthwise conv");
    let conv_b = p.conv_b.as_ref().expect("mLSTM layer has a depthwise conv");

    let (normed1, norm1) = rmsnorm(x, &p.norm1);

    // Depthwise conv, symmetric zero padding, length-preserving.
    let pad_left = (kernel - 1) / 2;
    let pad_right = kernel - 1 - pad_left;
    let mut conv_in = Array2::zeros((s_v + kernel - 1, d));
    conv_in.slice_mut(s![pad_left..pad_left + s_v, ..]).assign(&normed1);
    let _ = pad_right;
    let mut conv_out = Array2::zeros((s_v, d));
    for t in 0..s_v {
        for c in 0..d {
            let mut acc = conv_b[c];
            for tap in 0..kernel {
                acc += conv_w[[c, tap]] * conv_in[[t + tap, c]];
            }
            conv_out[[t, c]] = acc;
        }
    }

    let q = conv_out.dot(&p.wq);
    let k = conv_out.dot(&p.wk);
    let v = conv_out.dot(&p.wv);
    let q_hat = squared_relu(&q);
    let k_hat = squared_relu(&k);

    let mut mixed = Array2::zeros((s_v, d));
    let mut memory = Vec::with_capacity(heads);
    let mut denom = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q_hat.slice(cols);
        let kh = k_hat.slice(cols);
        let vh = v.slice(cols);
        let c_mem = kh.t().dot(&vh); // (dh × dh): C[a,b] = Σ_t k̂[t,a]·v[t,b]
        let z = kh.sum_axis(Axis(0));
        let numer = qh.dot(&c_mem);
        let den = qh.dot(&z) + eps;
        let mut out = numer;
        for (mut row, &dn) in out.axis_iter_mut(Axis(0)).zip(den.iter()) {
            row.mapv_inplace(|v| v / dn);
        }
        mixed.slice_mut(cols).assign(&out);
        memory.push((c_mem, z));
        denom.push(den);
    }

    let mut branch = mixed.dot(&p.wo);
    let branch_mask = sample_mask((s_v, d), dropout);
    if let Some(m) = &branch_mask {
        branch *= m;
    }
    let mid = x + &branch;

    let (normed2, norm2) = rmsnorm(&mid, &p.norm2);
    let (ffn_out, ffn) = ffn_forward(&normed2, &p.ffn);
    let y = &mid + &ffn_out;
    (
        y,
        MlstmCache {
            input: x.clone(),
            norm1,
            normed1,
            conv_in,
            conv_out,
            q,
            k,
            v,
            q_hat,
            k_hat,
            memory,
            denom,
            mixed,
            branch_mask,
            mid,
            norm2,
            normed2,
            ffn,
        },
    )
}

pub fn mlstm_backward(
    cache: &MlstmCache,
    p: &MixerLayerParams,
    heads: usize,
    kernel: usize,
    g: &Array2<f64>,
    grads: &mut MixerLayerParams,
) -> Array2<f64> {
    let (s_v, d) = cache.input.dim();
    let dh = d / heads;
    let conv_w = p.conv_w.as_ref().expect("mLSTM layer has a depthwise conv");
    let gconv_w = grads.conv_w.as_mut().expect("gradient slot for depthwise conv");
    let gconv_b = grads.conv_b.as_mut().expect("gradient slot for depthwise conv");

    let dffn = ffn_backward(&cache.ffn, &p.ffn, g, &mut grads.ffn);
    let mut dmid = g.clone();
    dmid += &rmsnorm_backward(&cache.mid, &p.norm2, &cache.norm2, &dffn, &mut grads.norm2);

    let mut dbranch = dmid.clone();
    if let Some(m) = &cache.branch_mask {
        dbranch *= m;
    }
    grads.wo += &cache.mixed.t().dot(&dbranch);
    let dmixed = dbranch.dot(&p.wo.t());

    let mut dq_hat = Array2::zeros((s_v, d));
    let mut dk_hat = Array2::zeros((s_v, d));
    let mut dv = Array2::zeros((s_v, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = cache.q_hat.slice(cols);
        let kh = cache.k_hat.slice(cols);
        let vh = cache.v.slice(cols);
        let (c_mem, z) = &cache.memory[h];
        let den = &cache.denom[h];
        let g_out = dmixed.slice(cols);

        // out = numer / den; numer = q̂·C, den = q̂·z + ε.
        let mut g_numer = g_out.to_owned();
        for (mut row, &dn) in g_numer.axis_iter_mut(Axis(0)).zip(den.iter()) {
            row.mapv_inplace(|v| v / dn);
        }
        // g_den_t = −(g_out_t · out_t) / den_t, with out = numer/den.
        let mut g_den = Array1::zeros(s_v);
        for t in 0..s_v {
            let numer_row = qh.row(t).dot(c_mem);
            let dot: f64 = g_out
                .row(t)
                .iter()
                .zip(numer_row.iter())
                .map(|(a, b)| a * b)
                .sum();
            g_den[t] = -dot / (den[t] * den[t]);
        }

        // dq̂ = g_numer·Cᵀ + g_den ⊗ z
        let mut dqh = g_numer.dot(&c_mem.t());
        for t in 0..s_v {
            let gd = g_den[t];
            for a in 0..dh {
                dqh[[t, a]] += gd * z[a];
            }
        }
        dq_hat.slice_mut(cols).assign(&dqh);

        // dC = q̂ᵀ·g_numer ; dz = q̂ᵀ·g_den
        let dc_mem = qh.t().dot(&g_numer);
        let dz = qh.t().dot(&g_den);

        // dk̂ = v·dCᵀ + dz (broadcast) ; dv = k̂·dC
        let mut dkh = vh.dot(&dc_mem.t());
        for mut row in dkh.axis_iter_mut(Axis(0)) {
            row += &dz;
        }
        dk_hat.slice_mut(cols).assign(&dkh);
        dv.slice_mut(cols).assign(&kh.dot(&dc_mem));
    }

    // d(ReLU(x)²)/dx = 2·ReLU(x)
    let dq = ndarray::Zip::from(&dq_hat)
        .and(&cache.q)
        .map_collect(|&gq, &qv| gq * 2.0 * qv.max(0.0));
    let dk = ndarray::Zip::from(&dk_hat)
        .and(&cache.k)
        .map_collect(|&gk, &kv| gk * 2.0 * kv.max(0.0));

    grads.wq += &cache.conv_out.t().dot(&dq);
    grads.wk += &cache.conv_out.t().dot(&dk);
    grads.wv += &cache.conv_out.t().dot(&dv);
    let dconv_out = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());

    // Depthwise conv backward.
    let pad_left = (kernel - 1) / 2;
    let mut dconv_in: Array2<f64> = Array2::zeros(cache.conv_in.raw_dim());
    for t in 0..s_v {
        for c in 0..d {
            let gd = dconv_out[[t, c]];
            gconv_b[c] += gd;
            for tap in 0..kernel {
                gconv_w[[c, tap]] += gd * cache.conv_in[[t + tap, c]];
                dconv_in[[t + tap, c]] += gd * conv_w[[c, tap]];
            }
        }
    }
    let dnormed1 = dconv_in.slice(s![pad_left..pad_left + s_v, ..]).to_owned();

    let mut dx = dmid;
    dx += &rmsnorm_backward(&cache.input, &p.norm1, &cache.norm1, &dnormed1, &mut grads.norm1);
    dx
}

// ---------------------------------------------------------------------------
// helpers shared with callers
// ---------------------------------------------------------------------------

/// Re-export for pooling/attention assertions in tests: sum of each row of
/// every head's attention matrix.
pub fn attention_row_sums(cache: &TransformerCache) -> Vec<f64> {
    cache
        .probs
        .iter()
        .flat_map(|p| p.axis_iter(Axis(0)).map(|row| row.sum()).collect::<Vec<_>>())
        .collect()
}

/// Brute-force pairwise oracle for the mLSTM memory:
/// `o_t = Σ_j (q̂_t·k̂_j)·v_j / (Σ_j q̂_t·k̂_j + ε)`.
pub fn mlstm_pairwise_oracle(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    eps: f64,
) -> Array2<f64> {
    let (s_v, d) = q.dim();
    let dh = d / heads;
    let q_hat = squared_relu(q);
    let k_hat = squared_relu(k);
    let mut out = Array2::zeros((s_v, d));
    for h in 0..heads {
        for t in 0..s_v {
            let qt = q_hat.slice(s![t, h * dh..(h + 1) * dh]);
            let mut numer = Array1::<f64>::zeros(dh);
            let mut den = eps;
            for j in 0..s_v {
                let kj = k_hat.slice(s![j, h * dh..(h + 1) * dh]);
                let vj = v.slice(s![j, h * dh..(h + 1) * dh]);
                let w = qt.dot(&kj);
                den += w;
                numer.scaled_add(w, &vj);
            }
            for a in 0..dh {
                out[[t, h * dh + a]] = numer[a] / den;
            }
        }
    }
    out
}

/// The mixer alone (post-conv q/k/v → memory → concat), exposed for the
/// oracle comparison. Returns the per-position outputs before `wo`.
pub fn mlstm_mixer_only(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    eps: f64,
) -> Array2<f64> {
    let (s_v, d) = q.dim();
    let dh = d / heads;
    let q_hat = squared_relu(q);
    let k_hat = squared_relu(k);
    let mut mixed = Array2::zeros((s_v, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q_hat.slice(cols);
        let kh = k_hat.slice(cols);
        let vh = v.slice(cols);
        let c_mem = kh.t().dot(&vh);
        let z = kh.sum_axis(Axis(0));
        let numer = qh.dot(&c_mem);
        let den = qh.dot(&z) + eps;
        let mut out = numer;
        for (mut row, &dn) in out.axis_iter_mut(Axis(0)).zip(den.iter()) {
            row.mapv_inplace(|v| v / dn);
        }
        mixed.slice_mut(cols).assign(&out);
    }
    mixed
}

/// Convenience used by both layers' tests.
pub fn linear_no_bias(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    linear(x, w, None)
}
