//! Sequence pooling and the model heads.
//!
//! Pooling concatenates four summaries of the encoded sequence — the CLS
//! row, a learned tanh-attention pool, an element-wise max, and a mean —
//! all computed over valid sequence positions only (CLS excluded from the
//! latter three). On top of the pooled vector sit three heads: the
//! classifier (averaging several independent dropout passes during
//! training), the contrastive projection (two-layer MLP onto the unit
//! sphere), and the masked-feature prediction map used in pretraining.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::nn::{l2_normalize_backward, l2_normalize_rows, softmax_backward, softmax_inplace};

// ---------------------------------------------------------------------------
// Four-way pooling
// ---------------------------------------------------------------------------

pub struct PoolCache {
    /// Valid rows of the encoded sample, `(S_v × d)`, row 0 = CLS.
    pub h: Array2<f64>,
    /// tanh(h_t · W1) for sequence rows, `((S_v−1) × d_p)`.
    pub tanh: Array2<f64>,
    /// Attention weights over sequence rows, `(S_v−1)`.
    pub alpha: Array1<f64>,
    /// Row index (into `h`) holding the max for each channel.
    pub argmax: Vec<usize>,
}

/// Pool one sample's valid prefix into `[h_cls ; attn ; max ; mean]` (4d).
///
/// `h` must contain only valid rows (CLS first, then ≥1 sequence rows).
pub fn four_way_pool(h: &Array2<f64>, w1: &Array2<f64>, w2: &Array1<f64>) -> (Array1<f64>, PoolCache) {
    let (s_v, d) = h.dim();
    assert!(s_v >= 2, "pooling needs the CLS row plus at least one sequence row");
    let t = s_v - 1;
    let seq = h.slice(s![1.., ..]);

    let tanh = seq.dot(w1).mapv(f64::tanh);
    let mut scores: Vec<f64> = tanh.dot(w2).to_vec();
    softmax_inplace(&mut scores);
    let alpha = Array1::from_vec(scores);

    let attn = alpha.dot(&seq);
    let mean = seq.mean_axis(Axis(0)).expect("at least one sequence row");
    let mut maxv = Array1::from_elem(d, f64::NEG_INFINITY);
    let mut argmax = vec![1usize; d];
    for r in 0..t {
        for c in 0..d {
            let v = seq[[r, c]];
            if v > maxv[c] {
                maxv[c] = v;
                argmax[c] = 1 + r;
            }
        }
    }

    let mut pooled = Array1::zeros(4 * d);
    pooled.slice_mut(s![0..d]).assign(&h.row(0));
    pooled.slice_mut(s![d..2 * d]).assign(&attn);
    pooled.slice_mut(s![2 * d..3 * d]).assign(&maxv);
    pooled.slice_mut(s![3 * d..4 * d]).assign(&mean);
    (pooled, PoolCache { h: h.to_owned(), tanh, alpha, argmax })
}

/// Backward through the pool. Returns `dh` (same shape as the cached `h`)
/// and accumulates into `dw1`/`dw2`.
pub fn four_way_pool_backward(
    cache: &PoolCache,
    w1: &Array2<f64>,
    w2: &Array1<f64>,
    g: &Array1<f64>,
    dw1: &mut Array2<f64>,
    dw2: &mut Array1<f64>,
) -> Array2<f64> {
    let (s_v, d) = cache.h.dim();
    let t = s_v - 1;
    let g_cls = g.slice(s![0..d]);
    let g_attn = g.slice(s![d..2 * d]);
    let g_max = g.slice(s![2 * d..3 * d]);
    let g_mean = g.slice(s![3 * d..4 * d]);

    let mut dh = Array2::zeros((s_v, d));
    dh.row_mut(0).assign(&g_cls);

    // mean
    for r in 1..s_v {
        let mut row = dh.row_mut(r);
        row.scaled_add(1.0 / t as f64, &g_mean);
    }
    // max: route each channel's gradient to its argmax row
    for c in 0..d {
        dh[[cache.argmax[c], c]] += g_max[c];
    }
    // attention: a = Σ α_t h_t, α = softmax(tanh(hW1)·w2)
    let seq = cache.h.slice(s![1.., ..]);
    let mut dalpha = Array1::zeros(t);
    for r in 0..t {
        dalpha[r] = g_attn.dot(&seq.row(r));
        let mut row = dh.row_mut(1 + r);
        row.scaled_add(cache.alpha[r], &g_attn);
    }
    let mut dscores = vec![0.0; t];
    softmax_backward(
        cache.alpha.as_slice().unwrap(),
        dalpha.as_slice().unwrap(),
        &mut dscores,
    );
    for r in 0..t {
        let du = dscores[r];
        let tanh_row = cache.tanh.row(r);
        // score_r = tanh_r · w2
        dw2.scaled_add(du, &tanh_row);
        // dtanh = du · w2 ; dpre = dtanh ⊙ (1 − tanh²)
        let dpre =
            ndarray::Zip::from(&tanh_row).and(w2).map_collect(|&th, &w| du * w * (1.0 - th * th));
        // pre_r = h_r · W1
        for a in 0..d {
            let hv = seq[[r, a]];
            for b in 0..dpre.len() {
                dw1[[a, b]] += hv * dpre[b];
            }
        }
        let mut row = dh.row_mut(1 + r);
        row += &dpre.dot(&w1.t());
    }
    dh
}

// ---------------------------------------------------------------------------
// Classifier head with multi-pass dropout
// ---------------------------------------------------------------------------

pub struct HeadCache {
    /// Pooled inputs `(B × 4d)`.
    pub pooled: Array2<f64>,
    /// One inverted-dropout mask per pass (empty in eval mode).
    pub masks: Vec<Array2<f64>>,
}

/// Classifier logits. In training mode the head runs `passes` independent
/// dropout passes at `rate` and averages the logits; in eval mode it is a
/// single clean affine map.
pub fn classify(
    pooled: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    dropout: Option<(usize, f64, &mut ChaCha20Rng)>,
    keep_cache: bool,
) -> (Array2<f64>, HeadCache) {
    let dim = pooled.dim();
    let cache_input = if keep_cache { pooled.clone() } else { Array2::zeros((0, 0)) };
    match dropout {
        Some((passes, rate, rng)) if rate > 0.0 && passes > 0 => {
            let keep = 1.0 - rate;
            let mut masks = Vec::with_capacity(passes);
            let mut logits = Array2::zeros((dim.0, w.ncols()));
            for _ in 0..passes {
                let mask = Array2::from_shape_fn(dim, |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let dropped = pooled * &mask;
                logits += &dropped.dot(w);
                masks.push(mask);
            }
            logits /= passes as f64;
            for mut row in logits.axis_iter_mut(Axis(0)) {
                row += b;
            }
            (logits, HeadCache { pooled: cache_input, masks })
        }
        _ => {
            let mut logits = pooled.dot(w);
            for mut row in logits.axis_iter_mut(Axis(0)) {
                row += b;
            }
            (logits, HeadCache { pooled: cache_input, masks: Vec::new() })
        }
    }
}

/// Backward through the classifier head; returns `dpooled`.
pub fn classify_backward(
    cache: &HeadCache,
    w: &Array2<f64>,
    g: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *db += &g.sum_axis(Axis(0));
    if cache.masks.is_empty() {
        *dw += &cache.pooled.t().dot(g);
        g.dot(&w.t())
    } else {
        let k = cache.masks.len() as f64;
        let mut dpooled = Array2::zeros(cache.pooled.raw_dim());
        for mask in &cache.masks {
            let dropped = &cache.pooled * mask;
            dw.scaled_add(1.0 / k, &dropped.t().dot(g));
            dpooled += &(g.dot(&w.t()) * mask);
        }
        dpooled /= k;
        dpooled
    }
}

// ---------------------------------------------------------------------------
// Contrastive projection head
// ---------------------------------------------------------------------------

pub struct ProjectionCache {
    pub pooled: Array2<f64>,
    pub pre_relu: Array2<f64>,
    pub hidden: Array2<f64>,
    pub raw: Array2<f64>,
    pub norms: Array1<f64>,
    pub z: Array2<f64>,
}

/// Project pooled vectors onto the unit sphere: `L2(W2·ReLU(W1·p + b1) + b2)`.
pub fn project(
    pooled: &Array2<f64>,
    w1: &Array2<f64>,
    b1: &Array1<f64>,
    w2: &Array2<f64>,
    b2: &Array1<f64>,
) -> (Array2<f64>, ProjectionCache) {
    let mut pre_relu = pooled.dot(w1);
    for mut row in pre_relu.axis_iter_mut(Axis(0)) {
        row += b1;
    }
    let hidden = pre_relu.mapv(|v| v.max(0.0));
    let mut raw = hidden.dot(w2);
    for mut row in raw.axis_iter_mut(Axis(0)) {
        row += b2;
    }
    let (z, norms) = l2_normalize_rows(&raw);
    (
        z.clone(),
        ProjectionCache { pooled: pooled.clone(), pre_relu, hidden, raw, norms, z },
    )
}

#[allow(clippy::too_many_arguments)]
pub fn project_backward(
    cache: &ProjectionCache,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    g: &Array2<f64>,
    dw1: &mut Array2<f64>,
    db1: &mut Array1<f64>,
    dw2: &mut Array2<f64>,
    db2: &mut Array1<f64>,
) -> Array2<f64> {
    let draw = l2_normalize_backward(&cache.z, &cache.norms, g);
    *db2 += &draw.sum_axis(Axis(0));
    *dw2 += &cache.hidden.t().dot(&draw);
    let dhidden = draw.dot(&w2.t());
    let dpre = ndarray::Zip::from(&dhidden)
        .and(&cache.pre_relu)
        .map_collect(|&dh, &pre| if pre > 0.0 { dh } else { 0.0 });
    *db1 += &dpre.sum_axis(Axis(0));
    *dw1 += &cache.pooled.t().dot(&dpre);
    dpre.dot(&w1.t())
}

// ---------------------------------------------------------------------------
// Masked-feature prediction head
// ---------------------------------------------------------------------------

/// Linear map from encoder rows at masked positions to feature predictions.
pub fn predict_masked(rows: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    rows.dot(w)
}

/// Backward: returns gradient to the encoder rows, accumulates `dw`.
pub fn predict_masked_backward(
    rows: &Array2<f64>,
    w: &Array2<f64>,
    g: &Array2<f64>,
    dw: &mut Array2<f64>,
) -> Array2<f64> {
    *dw += &rows.t().dot(g);
    g.dot(&w.t())
}
