//! Epoch sampling and byte-level augmentation for fine-tuning.
//!
//! Each fine-tuning epoch trains on a subsample of the training split:
//! 40% of the draw comes from the priority pool (anomalous windows plus
//! their temporal ±3 neighbors) and 60% from the rest; about 20% of the
//! data is untouched each epoch. Span masking then corrupts short
//! contiguous byte runs of every sampled row with the MASK token.

use ndarray::ArrayViewMut1;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::model::MASK_ID;

/// Fraction of each epoch draw taken from the priority pool.
pub const PRIORITY_SHARE: f64 = 0.4;
/// Temporal neighborhood radius around each anomalous window.
pub const NEIGHBOR_RADIUS: usize = 3;
/// Span-mask span bounds (inclusive).
pub const SPAN_MIN: usize = 2;
pub const SPAN_MAX: usize = 5;

/// Union of closed ±`radius` neighborhoods of anomalous indices, clipped to
/// `0..labels.len()`. Returned sorted and deduplicated.
pub fn build_priority_pool(labels: &[u8], radius: usize) -> Vec<usize> {
    let n = labels.len();
    let mut member = vec![false; n];
    for (i, &label) in labels.iter().enumerate() {
        if label == 1 {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n.saturating_sub(1));
            for slot in member.iter_mut().take(hi + 1).skip(lo) {
                *slot = true;
            }
        }
    }
    member.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

fn draw_from(pool: &[usize], count: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    if count == 0 || pool.is_empty() {
        return Vec::new();
    }
    if pool.len() >= count {
        // Without replacement when the pool covers the quota.
        rand::seq::index::sample(rng, pool.len(), count).iter().map(|i| pool[i]).collect()
    } else {
        // With replacement when the pool is smaller than its quota.
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Draw one epoch's index multiset: `round(ρ·n)` indices, `round(0.4·ρ·n)`
/// from the priority pool and the rest from its complement. An empty pool
/// shifts the whole draw to the complement (logged); an empty complement
/// shifts it to the pool.
pub fn sample_epoch(n: usize, pool: &[usize], rho: f64, rng: &mut ChaCha20Rng) -> Vec<usize> {
    assert!(n >= 1);
    debug_assert!(pool.windows(2).all(|w| w[0] < w[1]), "pool must be sorted unique");
    let total = (rho * n as f64).round() as usize;
    let priority_quota = (PRIORITY_SHARE * rho * n as f64).round() as usize;

    let in_pool = {
        let mut mask = vec![false; n];
        for &i in pool {
            mask[i] = true;
        }
        mask
    };
    let complement: Vec<usize> = (0..n).filter(|&i| !in_pool[i]).collect();

    let mut draw = Vec::with_capacity(total);
    if pool.is_empty() {
        log::warn!("priority pool is empty; drawing the whole epoch from the complement");
        draw.extend(draw_from(&complement, total, rng));
    } else if complement.is_empty() {
        log::warn!("every window is in the priority pool; drawing the whole epoch from it");
        draw.extend(draw_from(pool, total, rng));
    } else {
        draw.extend(draw_from(pool, priority_quota.min(total), rng));
        draw.extend(draw_from(&complement, total - priority_quota.min(total), rng));
    }
    draw
}

/// Mask non-overlapping spans of 2–5 bytes in one token row until at least
/// `⌊ratio·length⌋` positions are masked (the final span may overshoot by at
/// most `SPAN_MAX − 1`). Position 0 (CLS) and padding are never touched.
/// Returns the number of masked positions.
pub fn span_mask_row(
    mut row: ArrayViewMut1<'_, u16>,
    length: usize,
    ratio: f64,
    rng: &mut ChaCha20Rng,
) -> usize {
    let budget = (ratio * length as f64).floor() as usize;
    if budget == 0 || length < SPAN_MIN {
        return 0;
    }
    let mut taken = vec![false; length];
    let mut masked = 0usize;
    let mut attempts = 0usize;
    let max_attempts = 50 + 20 * budget;
    while masked < budget && attempts < max_attempts {
        attempts += 1;
        let span = rng.random_range(SPAN_MIN..=SPAN_MAX);
        if span > length {
            continue;
        }
        let start = rng.random_range(0..=length - span);
        if taken[start..start + span].iter().any(|&t| t) {
            continue;
        }
        for slot in taken.iter_mut().skip(start).take(span) {
            *slot = true;
        }
        for j in start..start + span {
            row[1 + j] = MASK_ID;
        }
        masked += span;
    }
    masked
}
