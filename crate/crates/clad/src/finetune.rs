//! Supervised fine-tuning: smoothed focal classification plus a cosine-
//! annealed supervised contrastive term, trained on priority-weighted
//! epoch subsamples with span-masked inputs, tracked by an EMA shadow
//! that supplies the validated and shipped weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate_streams, validation_focal_loss};
use crate::losses::{focal_loss, supcon_loss};
use crate::model::{backward, forward, ByteBatch, ForwardRequest, Mode, ModelConfig, ModelParameters};
use crate::optim::{
    clip_global_norm, lambda_schedule, lr_schedule, selection_score, AdamW, EarlyStopper,
    EmaShadow, OptimizerConfig,
};
use crate::sampler::{build_priority_pool, sample_epoch, span_mask_row, NEIGHBOR_RADIUS};
use crate::seeding::derive_rng;

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Focal-loss focusing exponent.
    pub gamma: f64,
    pub label_smoothing: f64,
    /// Supervised-contrastive temperature.
    pub supcon_temperature: f64,
    /// Contrastive weight at epoch 1 and its annealed floor.
    pub lambda0: f64,
    pub lambda_min: f64,
    pub epochs: usize,
    /// Fraction of the training split drawn each epoch.
    pub sample_fraction: f64,
    /// Fraction of each sampled stream's bytes hidden by span masking.
    pub span_mask_ratio: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            gamma: 2.0,
            label_smoothing: 0.05,
            supcon_temperature: 0.07,
            lambda0: 0.05,
            lambda_min: 0.005,
            epochs: 50,
            sample_fraction: 0.8,
            span_mask_ratio: 0.15,
            batch_size: 32,
            ema_decay: 0.998,
            patience: 7,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config("finetune: gamma must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("finetune: label_smoothing must lie in [0, 1)".into()));
        }
        if self.supcon_temperature <= 0.0 {
            return Err(Error::Config("finetune: supcon_temperature must be > 0".into()));
        }
        if !(self.lambda_min >= 0.0 && self.lambda_min < self.lambda0) {
            return Err(Error::Config("finetune: need 0 ≤ lambda_min < lambda0".into()));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config("finetune: sample_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.span_mask_ratio) {
            return Err(Error::Config("finetune: span_mask_ratio must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("finetune: ema_decay must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "finetune: epochs, batch_size, and patience must be ≥ 1".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub train_focal: f64,
    pub train_supcon: f64,
    pub train_joint: f64,
    pub val_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub score: f64,
    pub improved: bool,
}

/// Outcome of a fine-tuning run. `params` holds the best EMA snapshot by
/// selection score.
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub params: ModelParameters,
    pub best_score: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Minimum training-set size for fine-tuning.
pub const MIN_TRAIN_WINDOWS: usize = 5;

/// Fine-tune `params` in place on labeled compressed streams, selecting the
/// best EMA snapshot by validation score.
pub fn finetune(
    config: &ModelConfig,
    params: &mut ModelParameters,
    train: &[(Vec<u8>, u8)],
    val: &[(Vec<u8>, u8)],
    fc: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    fc.validate()?;
    if train.len() < MIN_TRAIN_WINDOWS {
        return Err(Error::Config(format!(
            "fine-tuning needs at least {MIN_TRAIN_WINDOWS} training windows, got {}",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::Config("fine-tuning needs a non-empty validation split".into()));
    }

    let labels: Vec<u8> = train.iter().map(|&(_, y)| y).collect();
    let pool = build_priority_pool(&labels, NEIGHBOR_RADIUS);
    let val_items: Vec<(&[u8], u8)> = val.iter().map(|(s, y)| (s.as_slice(), *y)).collect();

    let mut optimizer = AdamW::new(params, fc.optimizer.clone());
    let mut ema = EmaShadow::new(params, fc.ema_decay);
    let mut stopper = EarlyStopper::new(fc.patience);
    let mut history = Vec::new();
    let mut best: Option<ModelParameters> = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=fc.epochs {
        let lambda = lambda_schedule(epoch - 1, fc.epochs, fc.lambda0, fc.lambda_min);
        let lr = lr_schedule(epoch, fc.optimizer.warmup_epochs, fc.epochs, fc.optimizer.learning_rate);
        let mut rng = derive_rng(seed, "finetune-epoch", epoch as u64);
        let indices = sample_epoch(train.len(), &pool, fc.sample_fraction, &mut rng);

        let mut sum_focal = 0.0;
        let mut sum_supcon = 0.0;
        let mut sum_joint = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(fc.batch_size) {
            let items: Vec<(&[u8], u8)> =
                chunk.iter().map(|&i| (train[i].0.as_slice(), train[i].1)).collect();
            let mut batch = ByteBatch::from_streams(&items, config);
            for row in 0..chunk.len() {
                let length = batch.lengths[row];
                span_mask_row(batch.tokens.row_mut(row), length, fc.span_mask_ratio, &mut rng);
            }
            let out = forward(
                config,
                params,
                &batch,
                ForwardRequest {
                    mode: Mode::Train,
                    rng: Some(&mut rng),
                    mask_ratio: None,
                    want_logits: true,
                    want_projection: true,
                },
            );
            let logits = out.logits.as_ref().expect("fine-tuning forward yields logits");
            let projection = out.projection.as_ref().expect("fine-tuning forward yields projections");
            let (focal, dlogits) = focal_loss(logits, &batch.labels, fc.gamma, fc.label_smoothing);
            let contrastive = supcon_loss(projection, &batch.labels, fc.supcon_temperature);
            let joint = focal + lambda * contrastive.loss;
            if !joint.is_finite() {
                return Err(Error::Train(format!("non-finite training loss in epoch {epoch}")));
            }
            let mut dprojection = contrastive.grad;
            dprojection.mapv_inplace(|v| v * lambda);
            let mut grads = params.zeros_like();
            backward(config, params, &out.trace, Some(&dlogits), Some(&dprojection), None, &mut grads);
            clip_global_norm(&mut grads, fc.optimizer.clip_norm);
            optimizer.step(params, &grads, lr);
            ema.update(params);

            let weight = chunk.len() as f64;
            sum_focal += focal * weight;
            sum_supcon += contrastive.loss * weight;
            sum_joint += joint * weight;
            seen += chunk.len();
        }
        let train_focal = sum_focal / seen as f64;
        let train_supcon = sum_supcon / seen as f64;
        let train_joint = sum_joint / seen as f64;

        let report = evaluate_streams("val", config, &ema.params, &val_items, fc.batch_size)?;
        let val_loss = validation_focal_loss(
            config,
            &ema.params,
            &val_items,
            fc.batch_size,
            fc.gamma,
            fc.label_smoothing,
        )?;
        let score = selection_score(report.f1, val_loss, train_joint);
        if !score.is_finite() {
            return Err(Error::Train(format!("non-finite selection score in epoch {epoch}")));
        }
        let improved = stopper.observe(score);
        if improved {
            best = Some(ema.params.clone());
            best_score = score;
            best_epoch = epoch;
        }
        log::info!(
            "finetune epoch {epoch}/{}: lr {lr:.3e}, λ {lambda:.4}, joint {train_joint:.4}, \
             val F1 {:.4}, score {score:.4}{}",
            fc.epochs,
            report.f1,
            if improved { " *" } else { "" }
        );
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            lambda,
            train_focal,
            train_supcon,
            train_joint,
            val_loss,
            val_precision: report.precision,
            val_recall: report.recall,
            val_f1: report.f1,
            score,
            improved,
        });
        if stopper.should_stop() {
            stopped_early = true;
            log::info!("stopping early after {} non-improving epochs", fc.patience);
            break;
        }
    }

    Ok(FinetuneOutcome {
        params: best.expect("at least one epoch ran"),
        best_score,
        best_epoch,
        history,
        stopped_early,
    })
}
