//! Numerical building blocks: activations, norms, linear maps, softmax.
//!
//! Everything is `f64` and hand-differentiated. Each forward returns what its
//! backward needs (no global tape); backward functions take the upstream
//! gradient and produce input gradients plus parameter-gradient
//! accumulations. Conventions: activations are time-major `(positions ×
//! channels)`; linear weights are stored `(in × out)` so `y = x · W`.

use ndarray::{Array1, Array2, Axis};

/// Numerical floor inside square roots of normalization layers.
pub const RMSNORM_EPS: f64 = 1e-6;
pub const GROUPNORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// `y = x · w (+ b)`, rows are positions.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array2<f64> {
    let mut y = x.dot(w);
    if let Some(b) = b {
        y += b;
    }
    y
}

/// Gradients of [`linear`]: returns `dx`, accumulates `dw` and `db`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    g: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    *dw += &x.t().dot(g);
    if let Some(db) = db {
        *db += &g.sum_axis(Axis(0));
    }
    g.dot(&w.t())
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

/// ReLU, returning the output (which doubles as the backward mask).
pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut dx = g.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// SiLU (swish): `x · σ(x)`.
pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

/// d/dx SiLU = σ(x)·(1 + x·(1−σ(x))).
pub fn silu_prime(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

// ---------------------------------------------------------------------------
// RMSNorm
// ---------------------------------------------------------------------------

/// Per-row RMSNorm with learned gain: `y = gain ⊙ x / rms(x)`.
pub struct RmsNormCache {
    /// Per-row root-mean-square (with epsilon).
    pub rms: Array1<f64>,
}

pub fn rmsnorm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, RmsNormCache) {
    let d = x.ncols() as f64;
    let rms = x.map_axis(Axis(1), |row| (row.dot(&row) / d + RMSNORM_EPS).sqrt());
    let mut y = x.clone();
    for (mut row, &r) in y.axis_iter_mut(Axis(0)).zip(rms.iter()) {
        row.mapv_inplace(|v| v / r);
        row *= gain;
    }
    (y, RmsNormCache { rms })
}

pub fn rmsnorm_backward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    cache: &RmsNormCache,
    g: &Array2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for (i, r) in cache.rms.iter().enumerate() {
        let xi = x.row(i);
        let gi = g.row(i);
        // dgain += g ⊙ x/r
        for (c, dg) in dgain.iter_mut().enumerate() {
            *dg += gi[c] * xi[c] / r;
        }
        // dx = (gain⊙g)/r − x · Σ((gain⊙g)⊙x) / (d·r³)
        let gg: Vec<f64> = (0..x.ncols()).map(|c| gain[c] * gi[c]).collect();
        let dot: f64 = gg.iter().zip(xi.iter()).map(|(a, b)| a * b).sum();
        let scale = dot / (d * r * r * r);
        for (c, v) in dx.row_mut(i).iter_mut().enumerate() {
            *v = gg[c] / r - xi[c] * scale;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GroupNorm (single group)
// ---------------------------------------------------------------------------

/// Single-group GroupNorm over one sample: statistics span every position
/// and channel, affine is per channel. Input is `(positions × channels)`.
pub struct GroupNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: f64,
}

pub fn groupnorm1(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, GroupNormCache) {
    let n = (x.len()) as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + GROUPNORM_EPS).sqrt();
    let xhat = x.mapv(|v| (v - mean) * inv_std);
    let mut y = xhat.clone();
    y *= gain;
    y += bias;
    (y, GroupNormCache { xhat, inv_std })
}

pub fn groupnorm1_backward(
    cache: &GroupNormCache,
    gain: &Array1<f64>,
    g: &Array2<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let n = g.len() as f64;
    *dbias += &g.sum_axis(Axis(0));
    *dgain += &(g * &cache.xhat).sum_axis(Axis(0));
    let dxhat = g * gain;
    let mean_dxhat = dxhat.sum() / n;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum() / n;
    let mut dx = dxhat;
    dx.zip_mut_with(&cache.xhat, |d, &xh| {
        *d = (*d - mean_dxhat - xh * mean_dxhat_xhat) * cache.inv_std;
    });
    dx
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax over a slice, in place.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of softmax `p` given upstream `g`: `p ⊙ (g − Σ g⊙p)`.
pub fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(g) {
        *o = pv * (gv - dot);
    }
}

// ---------------------------------------------------------------------------
// L2 normalization
// ---------------------------------------------------------------------------

/// Row-wise L2 normalization; rows with tiny norms are left unscaled.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |row| row.dot(&row).sqrt().max(1e-12));
    let mut y = x.clone();
    for (mut row, &n) in y.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

/// Backward of row L2 normalization: `dv = (g − z·(z∙g)) / ‖v‖`.
pub fn l2_normalize_backward(z: &Array2<f64>, norms: &Array1<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(z.raw_dim());
    for i in 0..z.nrows() {
        let zi = z.row(i);
        let gi = g.row(i);
        let dot = zi.dot(&gi);
        for (c, v) in dx.row_mut(i).iter_mut().enumerate() {
            *v = (gi[c] - zi[c] * dot) / norms[i];
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// positional encoding
// ---------------------------------------------------------------------------

/// Sinusoidal positional encodings, `(positions × dim)`.
pub fn sinusoidal_pe(positions: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((positions, dim));
    for pos in 0..positions {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, dim - 1]] = angle.sin();
        }
    }
    pe
}
