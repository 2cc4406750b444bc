//! Self-supervised pretraining: masked compressed-feature prediction.
//!
//! Each step masks a fraction of every sample's post-CNN feature rows,
//! asks the encoder to reconstruct them, and scores the reconstructions
//! against the detached clean features with a temperature-scaled
//! contrastive objective. Labels are never consulted.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::infonce_loss;
use crate::model::{backward, forward, ByteBatch, ForwardRequest, Mode, ModelConfig, ModelParameters};
use crate::optim::{clip_global_norm, lr_schedule, AdamW, OptimizerConfig};
use crate::seeding::derive_rng;

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Fraction of each sample's feature rows to mask.
    pub mask_ratio: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_ratio: 0.15,
            temperature: 0.1,
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config("pretrain: mask_ratio must lie in (0, 1)".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("pretrain: temperature must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretrain: epochs and batch_size must be ≥ 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Outcome of a pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean contrastive loss per epoch, over contributing batches.
    pub epoch_losses: Vec<f64>,
    /// Batches skipped because they yielded fewer than two masked rows.
    pub skipped_batches: usize,
    pub steps: usize,
}

/// Run masked-feature pretraining over unlabeled byte streams, updating
/// `params` in place.
pub fn pretrain(
    config: &ModelConfig,
    params: &mut ModelParameters,
    streams: &[Vec<u8>],
    pc: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    config.validate()?;
    pc.validate()?;
    if streams.is_empty() {
        return Err(Error::Config("pretraining needs at least one stream".into()));
    }
    let mut optimizer = AdamW::new(params, pc.optimizer.clone());
    let mut report = PretrainReport { epoch_losses: Vec::new(), skipped_batches: 0, steps: 0 };

    for epoch in 1..=pc.epochs {
        let mut rng = derive_rng(seed, "pretrain-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..streams.len()).collect();
        order.shuffle(&mut rng);
        let lr = lr_schedule(epoch, pc.optimizer.warmup_epochs, pc.epochs, pc.optimizer.learning_rate);

        let mut epoch_loss = 0.0;
        let mut contributing = 0usize;
        for chunk in order.chunks(pc.batch_size) {
            let items: Vec<(&[u8], u8)> = chunk.iter().map(|&i| (streams[i].as_slice(), 0)).collect();
            let batch = ByteBatch::from_streams(&items, config);
            let out = forward(
                config,
                params,
                &batch,
                ForwardRequest {
                    mode: Mode::Train,
                    rng: Some(&mut rng),
                    mask_ratio: Some(pc.mask_ratio),
                    want_logits: false,
                    want_projection: false,
                },
            );
            let predictions = out.predictions.as_ref().expect("pretraining forward yields predictions");
            let targets = out.targets.as_ref().expect("pretraining forward yields targets");
            let Some((loss, dpredictions)) = infonce_loss(predictions, targets, pc.temperature)
            else {
                report.skipped_batches += 1;
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Train(format!("non-finite pretraining loss in epoch {epoch}")));
            }
            let mut grads = params.zeros_like();
            backward(config, params, &out.trace, None, None, Some(&dpredictions), &mut grads);
            clip_global_norm(&mut grads, pc.optimizer.clip_norm);
            optimizer.step(params, &grads, lr);
            epoch_loss += loss;
            contributing += 1;
            report.steps += 1;
        }
        if contributing == 0 {
            return Err(Error::Train(format!(
                "every batch in pretraining epoch {epoch} was skipped; enlarge the batch size"
            )));
        }
        let mean = epoch_loss / contributing as f64;
        log::info!(
            "pretrain epoch {epoch}/{}: lr {lr:.3e}, loss {mean:.4}, skipped {}",
            pc.epochs,
            report.skipped_batches
        );
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
