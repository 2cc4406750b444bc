//! Optimization machinery: decoupled-weight-decay adaptive moments, global
//! gradient clipping, the warmup-cosine learning-rate schedule, the cosine
//! contrastive-weight schedule, the EMA shadow, and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParameters;

/// Optimizer hyperparameters, shared by pretraining and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub warmup_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_epochs: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("optimizer: learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer: moment coefficients must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("optimizer: eps and clip_norm must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer: weight_decay must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moments mirror the parameter shapes.
pub struct AdamW {
    config: OptimizerConfig,
    m: ModelParameters,
    v: ModelParameters,
    t: u64,
}

impl AdamW {
    pub fn new(template: &ModelParameters, config: OptimizerConfig) -> AdamW {
        AdamW { config, m: template.zeros_like(), v: template.zeros_like(), t: 0 }
    }

    /// One update: `p ← p − lr·( m̂/(√v̂+ε) + wd·p )` with bias-corrected
    /// moments. `lr` comes from the schedule, not the config.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f64) {
        self.t += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = self.config.weight_decay;
        let eps = self.config.eps;

        let g = grads.tensors();
        let mut p = params.tensors_mut();
        let mut m = self.m.tensors_mut();
        let mut v = self.v.tensors_mut();
        for i in 0..g.len() {
            debug_assert_eq!(g[i].0, p[i].0, "tensor order must match");
            let gs = g[i].2;
            let ps = &mut p[i].1;
            let ms = &mut m[i].1;
            let vs = &mut v[i].1;
            for j in 0..gs.len() {
                ms[j] = b1 * ms[j] + (1.0 - b1) * gs[j];
                vs[j] = b2 * vs[j] + (1.0 - b2) * gs[j] * gs[j];
                let m_hat = ms[j] / bc1;
                let v_hat = vs[j] / bc2;
                ps[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * ps[j]);
            }
        }
    }
}

/// Euclidean norm over every gradient tensor at once.
pub fn global_norm(grads: &ModelParameters) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, _, v)| v.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ModelParameters, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, slice) in grads.tensors_mut() {
            for v in slice {
                *v *= scale;
            }
        }
    }
    norm
}

/// Learning rate for a 1-indexed epoch: linear warmup over the first
/// `warmup` epochs up to `base`, then cosine decay reaching exactly 0 at
/// epoch `total`.
pub fn lr_schedule(epoch: usize, warmup: usize, total: usize, base: f64) -> f64 {
    assert!(epoch >= 1 && epoch <= total, "epoch {} outside 1..={}", epoch, total);
    if warmup > 0 && epoch <= warmup {
        return base * epoch as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Contrastive-weight schedule in completed epochs `t ∈ [0, T]`:
/// `λ(t) = λ_min + ½(λ0 − λ_min)(1 + cos(πt/T))`.
pub fn lambda_schedule(t: usize, total: usize, lambda0: f64, lambda_min: f64) -> f64 {
    assert!(t <= total, "t {} outside 0..={}", t, total);
    let progress = t as f64 / total.max(1) as f64;
    lambda_min + 0.5 * (lambda0 - lambda_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Exponentially averaged copy of the parameters, used for validation,
/// testing, and the shipped checkpoint. Never receives gradients.
pub struct EmaShadow {
    pub params: ModelParameters,
    decay: f64,
}

impl EmaShadow {
    /// Initialize the shadow as a copy of the live parameters.
    pub fn new(params: &ModelParameters, decay: f64) -> EmaShadow {
        assert!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1)");
        EmaShadow { params: params.clone(), decay }
    }

    /// `shadow ← β·shadow + (1−β)·params`, per scalar.
    pub fn update(&mut self, params: &ModelParameters) {
        let src = params.tensors();
        let mut dst = self.params.tensors_mut();
        assert_eq!(src.len(), dst.len(), "EMA shadow shapes must mirror the parameters");
        for i in 0..src.len() {
            let s = src[i].2;
            let d = &mut dst[i].1;
            assert_eq!(s.len(), d.len(), "EMA shadow shapes must mirror the parameters");
            for j in 0..s.len() {
                d[j] = self.decay * d[j] + (1.0 - self.decay) * s[j];
            }
        }
    }
}

/// Stops training after `patience` consecutive epochs without improvement.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_improvement: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        assert!(patience >= 1, "patience must be ≥ 1");
        EarlyStopper { patience, best: f64::NEG_INFINITY, since_improvement: 0 }
    }

    /// Record an epoch score; returns true when it improved on the best.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Composite model-selection score: `F1_val − 0.2·L_val − 0.1·L_train`.
pub fn selection_score(f1_val: f64, loss_val: f64, loss_train: f64) -> f64 {
    f1_val - 0.2 * loss_val - 0.1 * loss_train
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::tiny_params;
    use approx::assert_abs_diff_eq;

    // ---- schedules ------------------------------------------------------------

    #[test]
    fn lambda_schedule_hits_the_pinned_endpoints() {
        let t_total = 50;
        assert_abs_diff_eq!(lambda_schedule(0, t_total, 0.05, 0.005), 0.05, epsilon = 0.0);
        assert_abs_diff_eq!(lambda_schedule(t_total, t_total, 0.05, 0.005), 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(lambda_schedule(25, t_total, 0.05, 0.005), 0.0275, epsilon = 1e-15);
    }

    #[test]
    fn learning_rate_warms_up_then_decays_to_zero() {
        let base = 3e-4;
        assert_abs_diff_eq!(lr_schedule(1, 3, 50, base), base / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lr_schedule(2, 3, 50, base), 2.0 * base / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lr_schedule(3, 3, 50, base), base, epsilon = 1e-15);
        assert_abs_diff_eq!(lr_schedule(50, 3, 50, base), 0.0, epsilon = 1e-18);
        // Monotone nonincreasing after warmup.
        let mut prev = f64::INFINITY;
        for e in 3..=50 {
            let lr = lr_schedule(e, 3, 50, base);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    // ---- EMA ------------------------------------------------------------------

    #[test]
    fn one_ema_step_from_zero_gives_one_minus_beta() {
        let mut zero = tiny_params(0);
        for (_, s) in zero.tensors_mut() {
            s.fill(0.0);
        }
        let mut ones = tiny_params(0);
        for (_, s) in ones.tensors_mut() {
            s.fill(1.0);
        }
        let mut shadow = EmaShadow::new(&zero, 0.998);
        shadow.update(&ones);
        for (name, _, v) in shadow.params.tensors() {
            for x in v {
                assert_abs_diff_eq!(*x, 0.002, epsilon = 1e-15);
            }
            let _ = name;
        }
    }

    #[test]
    fn beta_zero_copies_parameters_in_one_step() {
        let a = tiny_params(1);
        let b = tiny_params(2);
        let mut shadow = EmaShadow::new(&a, 0.0);
        shadow.update(&b);
        for ((_, _, s), (_, _, p)) in shadow.params.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(s, p);
        }
    }

    #[test]
    fn shadow_contracts_geometrically_toward_constant_parameters() {
        let target = tiny_params(3);
        let start = tiny_params(4);
        let mut shadow = EmaShadow::new(&start, 0.9);
        let dist = |shadow: &EmaShadow| -> f64 {
            shadow
                .params
                .tensors()
                .iter()
                .zip(target.tensors().iter())
                .map(|((_, _, a), (_, _, b))| {
                    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&shadow);
        shadow.update(&target);
        let d1 = dist(&shadow);
        shadow.update(&target);
        let d2 = dist(&shadow);
        assert_abs_diff_eq!(d1 / d0, 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(d2 / d1, 0.9, epsilon = 1e-9);
    }

    // ---- AdamW ----------------------------------------------------------------

    #[test]
    fn first_step_moves_each_weight_by_roughly_the_learning_rate() {
        // With wd=0, the bias-corrected first step is lr·g/(|g|+ε) ≈ ±lr.
        let mut params = tiny_params(5);
        let before = params.clone();
        let mut grads = params.zeros_like();
        for (_, s) in grads.tensors_mut() {
            for (i, v) in s.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.5 } else { -0.25 };
            }
        }
        let config = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut opt = AdamW::new(&params, config);
        opt.step(&mut params, &grads, 1e-3);
        for ((_, _, b), ((_, _, a), (_, _, g))) in
            before.tensors().iter().zip(params.tensors().iter().zip(grads.tensors().iter()))
        {
            for i in 0..a.len() {
                let moved = b[i] - a[i];
                let expected = 1e-3 * g[i].signum();
                assert_abs_diff_eq!(moved, expected, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut params = tiny_params(6);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut opt = AdamW::new(&params, OptimizerConfig::default());
        opt.step(&mut params, &grads, 1e-2);
        for ((_, _, b), (_, _, a)) in before.tensors().iter().zip(params.tensors().iter()) {
            for i in 0..a.len() {
                assert_abs_diff_eq!(a[i], b[i] * (1.0 - 1e-2 * 0.01), epsilon = 1e-12);
            }
        }
    }

    // ---- clipping -------------------------------------------------------------

    #[test]
    fn clipping_rescales_to_the_threshold_norm() {
        let mut grads = tiny_params(7);
        let norm_before = global_norm(&grads);
        assert!(norm_before > 1.0, "fixture gradient should exceed the clip norm");
        let reported = clip_global_norm(&mut grads, 1.0);
        assert_abs_diff_eq!(reported, norm_before, epsilon = 1e-12);
        assert_abs_diff_eq!(global_norm(&grads), 1.0, epsilon = 1e-9);
        // Below the threshold nothing changes.
        let copy = grads.clone();
        let small = clip_global_norm(&mut grads, 10.0);
        assert_abs_diff_eq!(small, 1.0, epsilon = 1e-9);
        for ((_, _, a), (_, _, b)) in grads.tensors().iter().zip(copy.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    // ---- early stopping ---------------------------------------------------------

    #[test]
    fn stops_after_exactly_patience_flat_epochs() {
        let scores = [0.1, 0.5, 0.4, 0.45, 0.49, 0.2, 0.1, 0.3, 0.0];
        let mut stopper = EarlyStopper::new(7);
        let mut stopped_at = None;
        for (i, &s) in scores.iter().enumerate() {
            stopper.observe(s);
            if stopper.should_stop() {
                stopped_at = Some(i);
                break;
            }
        }
        // Improvement at index 1 (0.5); the 7 epochs after never improve.
        assert_eq!(stopped_at, Some(8));
        assert_abs_diff_eq!(stopper.best(), 0.5, epsilon = 0.0);
    }

    #[test]
    fn improvement_resets_the_counter() {
        let mut stopper = EarlyStopper::new(2);
        assert!(stopper.observe(1.0));
        assert!(!stopper.observe(0.5));
        assert!(stopper.observe(2.0));
        assert!(!stopper.should_stop());
        assert!(!stopper.observe(1.0));
        assert!(!stopper.observe(1.5));
        assert!(stopper.should_stop());
    }

    // ---- selection score ---------------------------------------------------------

    #[test]
    fn selection_score_matches_the_formula() {
        assert_abs_diff_eq!(selection_score(1.0, 0.0, 0.0), 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(selection_score(0.95, 0.1, 0.2), 0.91, epsilon = 1e-12);
        assert!(selection_score(0.9, 0.2, 0.1) < selection_score(0.9, 0.1, 0.1));
        assert!(selection_score(0.9, 0.1, 0.2) < selection_score(0.9, 0.1, 0.1));
    }
}
