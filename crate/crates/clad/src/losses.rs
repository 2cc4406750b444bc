//! Training objectives: smoothed focal loss, supervised contrastive loss,
//! and the InfoNCE masked-feature objective.
//!
//! Each function returns the scalar loss together with its gradient with
//! respect to the primary input, so callers can hand the gradient straight
//! to the model's backward pass. All gradients are hand-derived and checked
//! against central finite differences in the tests.

use ndarray::{Array2, Axis};

use crate::model::nn::{l2_normalize_backward, l2_normalize_rows, softmax_backward, softmax_inplace};

/// Focal loss with label smoothing over two classes.
///
/// Per sample, with softmax probabilities `p` and smoothed targets
/// `ỹ_c = (1−ε)·1[c=y] + ε/2`, the loss is `Σ_c ỹ_c (1−p_c)^γ (−ln p_c)`;
/// the batch mean is returned along with `d loss / d logits`.
pub fn focal_loss(
    logits: &Array2<f64>,
    labels: &[u8],
    gamma: f64,
    label_smoothing: f64,
) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    assert_eq!(b, labels.len(), "one label per logit row");
    assert_eq!(logits.ncols(), 2, "binary classifier emits two logits");
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut p = [logits[[i, 0]], logits[[i, 1]]];
        softmax_inplace(&mut p);
        let smooth = [
            (1.0 - label_smoothing) * f64::from(y == 0) + label_smoothing / 2.0,
            (1.0 - label_smoothing) * f64::from(y == 1) + label_smoothing / 2.0,
        ];
        let mut dldp = [0.0f64; 2];
        for c in 0..2 {
            let pc = p[c];
            let focus = (1.0 - pc).powf(gamma);
            total += smooth[c] * focus * (-pc.ln());
            // d/dp [(1−p)^γ (−ln p)] = γ(1−p)^{γ−1} ln p − (1−p)^γ / p
            dldp[c] = if gamma == 0.0 {
                smooth[c] * (-1.0 / pc)
            } else {
                smooth[c] * (gamma * (1.0 - pc).powf(gamma - 1.0) * pc.ln() - focus / pc)
            };
        }
        let mut drow = [0.0f64; 2];
        softmax_backward(&p, &dldp, &mut drow);
        grad[[i, 0]] = drow[0] / b as f64;
        grad[[i, 1]] = drow[1] / b as f64;
    }
    (total / b as f64, grad)
}

/// Result of the supervised contrastive loss.
pub struct SupconOutcome {
    pub loss: f64,
    /// Gradient with respect to the (normalized) embeddings.
    pub grad: Array2<f64>,
    /// Number of anchors that had at least one same-label positive.
    pub contributing_anchors: usize,
}

impl SupconOutcome {
    /// True when no anchor had a positive, so the loss is identically 0.
    pub fn degenerate(&self) -> bool {
        self.contributing_anchors == 0
    }
}

/// Supervised contrastive loss over L2-normalized embeddings.
///
/// For each anchor `i` with positives `P(i) = {p ≠ i : y_p = y_i}`:
/// `L_i = −(1/|P_i|) Σ_{p∈P_i} ln( exp(z_i·z_p/τ) / Σ_{a≠i} exp(z_i·z_a/τ) )`,
/// averaged over anchors with `P(i) ≠ ∅`. Anchors without positives are
/// skipped; a batch with none returns loss 0 (degenerate).
pub fn supcon_loss(embeddings: &Array2<f64>, labels: &[u8], tau: f64) -> SupconOutcome {
    let b = embeddings.nrows();
    assert_eq!(b, labels.len(), "one label per embedding row");
    assert!(tau > 0.0, "temperature must be positive");
    let sim = embeddings.dot(&embeddings.t());

    let mut dsim = Array2::zeros((b, b));
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..b {
        let positives: Vec<usize> =
            (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        // Log-sum-exp over all a ≠ i, stabilized by the row max.
        let mut mx = f64::NEG_INFINITY;
        for a in 0..b {
            if a != i {
                mx = mx.max(sim[[i, a]] / tau);
            }
        }
        let mut denom = 0.0;
        for a in 0..b {
            if a != i {
                denom += ((sim[[i, a]] / tau) - mx).exp();
            }
        }
        let lse = mx + denom.ln();
        let inv_p = 1.0 / positives.len() as f64;
        for &p in &positives {
            total += -(sim[[i, p]] / tau - lse) * inv_p;
            dsim[[i, p]] += -inv_p / tau;
        }
        // The log-sum-exp term contributes softmax weights once per anchor
        // (the |P_i| positive terms share it, and the 1/|P_i| cancels).
        for a in 0..b {
            if a != i {
                let sigma = ((sim[[i, a]] / tau) - lse).exp();
                dsim[[i, a]] += sigma / tau;
            }
        }
    }

    if anchors == 0 {
        return SupconOutcome { loss: 0.0, grad: Array2::zeros(embeddings.raw_dim()), contributing_anchors: 0 };
    }
    let scale = 1.0 / anchors as f64;
    total *= scale;
    dsim *= scale;

    // sim_ia = z_i · z_a ⇒ dz = dsim·Z + dsimᵀ·Z.
    let grad = dsim.dot(embeddings) + dsim.t().dot(embeddings);
    SupconOutcome { loss: total, grad, contributing_anchors: anchors }
}

/// InfoNCE over masked-feature predictions and their detached targets.
///
/// Both inputs are L2-normalized internally. Returns `None` when fewer than
/// two masked positions are pooled (the loss is undefined; callers skip the
/// step). The gradient is with respect to the raw predictions only.
pub fn infonce_loss(
    predictions: &Array2<f64>,
    targets: &Array2<f64>,
    tau: f64,
) -> Option<(f64, Array2<f64>)> {
    let n = predictions.nrows();
    assert_eq!(predictions.dim(), targets.dim(), "predictions and targets must align");
    assert!(tau > 0.0, "temperature must be positive");
    if n < 2 {
        return None;
    }
    let (p_hat, p_norms) = l2_normalize_rows(predictions);
    let (t_hat, _) = l2_normalize_rows(targets);

    let mut sim = p_hat.dot(&t_hat.t());
    sim /= tau;

    let mut loss = 0.0;
    let mut dsim = Array2::zeros((n, n));
    for i in 0..n {
        let row = sim.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + denom.ln();
        loss += -(sim[[i, i]] - lse);
        for j in 0..n {
            let sigma = (sim[[i, j]] - lse).exp();
            dsim[[i, j]] = (sigma - f64::from(j == i)) / (n as f64 * tau);
        }
    }
    loss /= n as f64;

    let dp_hat = dsim.dot(&t_hat);
    let dpred = l2_normalize_backward(&p_hat, &p_norms, &dp_hat);
    Some((loss, dpred))
}

/// Plain cross-entropy with optional label smoothing — an independent oracle
/// used by tests to pin the γ=0 focal case.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u8], label_smoothing: f64) -> f64 {
    let b = logits.nrows();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = [logits[[i, 0]], logits[[i, 1]]];
        let mx = row[0].max(row[1]);
        let lse = mx + ((row[0] - mx).exp() + (row[1] - mx).exp()).ln();
        for (c, &logit) in row.iter().enumerate() {
            let smooth = (1.0 - label_smoothing) * f64::from(c == usize::from(y))
                + label_smoothing / 2.0;
            total += smooth * (lse - logit);
        }
    }
    total / b as f64
}

/// Mean per-row cosine alignment diagnostics are occasionally useful in
/// training logs; mean L2 row norm does the job cheaply.
pub fn mean_row_norm(x: &Array2<f64>) -> f64 {
    let n = x.nrows().max(1) as f64;
    x.map_axis(Axis(1), |row| row.dot(&row).sqrt()).sum() / n
}
