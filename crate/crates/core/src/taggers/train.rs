use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LossNorm, SequenceTagger, TaggerError};
use crate::corpus::Sentence;
use crate::eval::argmin_earliest;
use crate::numgrad::{seeded_rng, AdamW, AdamWConfig, Grads, NumError, SgdMomentum, Tape, WarmupSchedule};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    AdamWConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamWConfig::default().beta2
}
fn default_eps() -> f64 {
    AdamWConfig::default().eps
}
fn default_weight_decay() -> f64 {
    AdamWConfig::default().weight_decay
}

impl OptimizerSpec {
    pub fn adamw(lr: f64) -> Self {
        let c = AdamWConfig::default();
        OptimizerSpec::Adamw {
            lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adamw { lr, .. } => lr,
        }
    }
}

/// Multiplies the learning rate by `factor` for every epoch after
/// `after_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub after_epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Experiment configs replace this with their top-level seed.
    #[serde(default)]
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    /// Linear warmup length in optimizer steps; clamped to the total.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    /// Step at which the post-warmup decay reaches zero; defaults to
    /// epochs × batches per epoch.
    #[serde(default)]
    pub total_steps: Option<usize>,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    /// Sentences per independently taped work unit within a batch.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

fn default_chunk() -> usize {
    16
}

impl TrainConfig {
    pub fn transformer() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerSpec::Sgd {
                lr: 0.001,
                momentum: 0.9,
            },
            warmup_steps: None,
            total_steps: None,
            lr_decay: None,
            chunk_size: default_chunk(),
        }
    }

    pub fn bilstm() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            optimizer: OptimizerSpec::adamw(1e-3),
            ..Self::transformer()
        }
    }

    pub fn bertlike() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            optimizer: OptimizerSpec::adamw(3e-5),
            warmup_steps: Some(2500),
            ..Self::transformer()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Rate used for the epoch's last update.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub seed: u64,
}

/// 1-based epoch of the minimum validation loss, earliest on ties.
pub fn select_checkpoint(valid_losses: &[f64]) -> Option<usize> {
    argmin_earliest(valid_losses).map(|i| i + 1)
}

enum Optimizer {
    Sgd(SgdMomentum),
    AdamW(AdamW),
}

fn chunk_seed(seed: u64, epoch: usize, batch: usize, chunk: usize) -> u64 {
    let k = ((epoch as u64) << 40) ^ ((batch as u64) << 16) ^ chunk as u64;
    seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Summed chunk losses and merged gradients, in chunk order.
fn batch_gradient<M: SequenceTagger>(
    model: &M,
    sentences: &[&Sentence],
    norm: &LossNorm,
    chunk_size: usize,
    seed: Option<(u64, usize, usize)>,
) -> Result<(f64, Grads), TaggerError> {
    let parts = par::map_chunks(sentences, chunk_size, |ci, chunk| -> Result<(f64, Grads), TaggerError> {
        let mut rng = seed.map(|(s, e, b)| seeded_rng(chunk_seed(s, e, b, ci)));
        let mut tape = Tape::new();
        let loss = model.chunk_loss(&mut tape, chunk, norm, rng.as_mut())?;
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?))
    });
    let mut total = 0.0;
    let mut grads = Grads::new();
    for p in parts {
        let (l, g) = p?;
        total += l;
        grads.merge(g);
    }
    Ok((total, grads))
}

/// Mean loss over `sentences` in inference mode.
pub(crate) fn dataset_loss<M: SequenceTagger>(model: &M, sentences: &[Sentence], chunk_size: usize) -> Result<f64, TaggerError> {
    let refs: Vec<&Sentence> = sentences.iter().collect();
    let norm = model.loss_norm(&refs)?;
    if norm.categorical == 0.0 {
        return Ok(0.0);
    }
    let parts = par::map_chunks(&refs, chunk_size, |_, chunk| -> Result<f64, TaggerError> {
        let mut tape = Tape::new();
        let loss = model.chunk_loss(&mut tape, chunk, &norm, None)?;
        Ok(tape.value(loss).item())
    });
    parts.into_iter().sum()
}

/// Mini-batch training with seeded shuffling. After every epoch the
/// validation loss is measured and `on_epoch` sees the record and the
/// current model. On return the model holds the parameters of the epoch
/// with the lowest validation loss (earliest on ties); this also holds when
/// training diverges.
pub fn train_tagger<M: SequenceTagger>(
    model: &mut M,
    train: &[Sentence],
    valid: &[Sentence],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &M),
) -> Result<TrainRun, TaggerError> {
    if train.is_empty() || valid.is_empty() {
        return Err(TaggerError::Config("training and validation sets must be non-empty".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 || config.chunk_size == 0 || !(config.optimizer.lr() > 0.0) {
        return Err(TaggerError::Config(
            "epochs, batch_size, chunk_size and lr must be positive".into(),
        ));
    }
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total = config.total_steps.unwrap_or(config.epochs * batches_per_epoch).max(1);
    let schedule = match config.warmup_steps {
        Some(w) => {
            if w > total {
                log::warn!("warmup of {w} steps exceeds the {total} total steps; clamping");
            }
            Some(WarmupSchedule::new(config.optimizer.lr(), w.clamp(1, total), total)?)
        }
        None => None,
    };
    let mut opt = match config.optimizer {
        OptimizerSpec::Sgd { momentum, .. } => Optimizer::Sgd(SgdMomentum::new(momentum)),
        OptimizerSpec::Adamw {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } => Optimizer::AdamW(AdamW::new(AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        })),
    };

    let mut shuffle_rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, crate::numgrad::ParamStore)> = None;
    let mut step = 0usize;
    let restore = |model: &mut M, best: Option<(f64, usize, crate::numgrad::ParamStore)>| {
        if let Some((_, _, p)) = best {
            *model.params_mut() = p;
        }
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let decay = match config.lr_decay {
            Some(d) if epoch > d.after_epoch => d.factor,
            _ => 1.0,
        };
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut lr = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let sentences: Vec<&Sentence> = idx.iter().map(|&i| &train[i]).collect();
            let norm = model.loss_norm(&sentences)?;
            if norm.categorical == 0.0 {
                log::debug!("epoch {epoch} batch {bi}: nothing to learn from, skipped");
                continue;
            }
            let (loss, grads) = batch_gradient(&*model, &sentences, &norm, config.chunk_size, Some((config.seed, epoch, bi)))?;
            if !loss.is_finite() {
                restore(model, best);
                return Err(TaggerError::Diverged { epoch });
            }
            step += 1;
            lr = decay
                * match &schedule {
                    Some(s) => s.lr(step.min(total))?,
                    None => config.optimizer.lr(),
                };
            let result = match &mut opt {
                Optimizer::Sgd(o) => o.step(model.params_mut(), &grads, lr),
                Optimizer::AdamW(o) => o.step(model.params_mut(), &grads, lr),
            };
            match result {
                Ok(()) => {}
                Err(NumError::NonFiniteGradient(name)) => {
                    log::error!("non-finite gradient for `{name}`");
                    restore(model, best);
                    return Err(TaggerError::Diverged { epoch });
                }
                Err(e) => return Err(e.into()),
            }
            loss_sum += loss;
            used += 1;
        }
        let train_loss = if used == 0 { 0.0 } else { loss_sum / used as f64 };
        let valid_loss = dataset_loss(&*model, valid, config.chunk_size)?;
        if !valid_loss.is_finite() || !model.params().iter().all(|(_, t)| t.is_finite()) {
            restore(model, best);
            return Err(TaggerError::Diverged { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            lr,
        };
        log::info!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6} lr {lr:e}");
        if best.as_ref().is_none_or(|(b, _, _)| valid_loss < *b) {
            best = Some((valid_loss, epoch, model.params().clone()));
        }
        records.push(record);
        on_epoch(&record, model);
    }
    let best_epoch = best.as_ref().map_or(config.epochs, |b| b.1);
    restore(model, best);
    Ok(TrainRun {
        epochs: records,
        best_epoch,
        seed: config.seed,
    })
}
