//! Pretraining of the frozen reference network on the real-styled
//! 12-family pretext task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{input_batch, Network};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::scm::{mix, strong_augment, AugmentConfig, Sample, PRETEXT_FAMILIES};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{cosine_lr, task_loss, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Peak learning rate, cosine-decayed to zero over the run.
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional light augmentation of pretext images.
    pub augment: Option<AugmentConfig>,
    /// Accuracy the reference is expected to reach.
    pub target_accuracy: f64,
    /// Below this the run is rejected.
    pub abort_below: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 17,
            augment: Some(AugmentConfig {
                n_ops: 1,
                magnitude: 0.3,
            }),
            target_accuracy: 0.90,
            abort_below: 0.70,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub reached_target: bool,
}

/// Train a fresh 12-way classifier on the pretext split and return it with
/// its validation history. Fails if validation accuracy ends below
/// `abort_below`.
pub fn pretrain_reference(
    train: &[Sample],
    val: &[Sample],
    cfg: &PretrainConfig,
) -> Result<(Network, PretrainReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut net = Network::classifier(PRETEXT_FAMILIES.len(), mix(cfg.seed, 0x7e));
    let mut opt = Sgd::new(&net, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<Tensor> = batch
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(a) => strong_augment(
                        &train[i].image,
                        mix(mix(cfg.seed, epoch as u64), (b * cfg.batch_size + i) as u64),
                        a,
                    ),
                    None => train[i].image.clone(),
                })
                .collect();
            opt.lr = cosine_lr(cfg.lr, epoch * steps_per_epoch + b, total_steps);
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let x = tape.constant(input_batch(&refs)?);
            let feats = bound.forward_staged(&x)?;
            let loss = task_loss(&bound.logits(&feats.pooled)?, &labels)?;
            if !loss.item().is_finite() {
                return Err(Error::Divergence {
                    step: (epoch * steps_per_epoch + b) as u64,
                    detail: "reference pretraining loss is not finite".into(),
                });
            }
            let grads = tape.backward(loss)?;
            let g = bound.grads(&grads);
            opt.step(&mut net, &g)?;
        }
        let acc = accuracy(&net, val)?;
        log::info!("reference pretraining epoch {epoch}: val accuracy {acc:.4}");
        history.push(acc);
    }
    let final_accuracy = *history.last().unwrap_or(&0.0);
    if final_accuracy < cfg.abort_below {
        return Err(Error::PretrainFailed {
            accuracy: final_accuracy,
        });
    }
    let report = PretrainReport {
        reached_target: final_accuracy >= cfg.target_accuracy,
        epoch_accuracy: history,
        final_accuracy,
    };
    Ok((net, report))
}
