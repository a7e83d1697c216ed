//! Teacher-forced training, fine-tuning and held-out loss evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{loss_and_grads, loss_terms, next_token_targets, LossBreakdown, LossWeights};
use super::network::{self, Batch};
use super::optim::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::{stream_fields, TokenFields, TokenizerConfig};
use crate::trace::TraceDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            grad_clip: adam.grad_clip,
            checkpoint_every: 5,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 || self.epochs < self.checkpoint_every {
            return Err(Error::Config(format!(
                "need epochs ({}) >= checkpoint_every ({}) >= 1",
                self.epochs, self.checkpoint_every
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        self.loss_weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub terms: LossBreakdown,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub history: Vec<EpochStats>,
}

/// Tokenizes the trainable streams: length-1 streams and streams longer than
/// `max_context` are dropped.
pub fn prepare_sequences(dataset: &TraceDataset, tok: &TokenizerConfig, max_context: usize) -> Result<Vec<Vec<TokenFields>>> {
    if dataset.generation() != tok.generation {
        return Err(Error::Config(format!(
            "dataset generation {} does not match tokenizer generation {}",
            dataset.generation(),
            tok.generation
        )));
    }
    let mut out = Vec::with_capacity(dataset.len());
    let (mut short, mut long) = (0, 0);
    for s in dataset.streams() {
        if s.len() < 2 {
            short += 1;
        } else if s.len() > max_context {
            long += 1;
        } else {
            out.push(stream_fields(s, tok)?);
        }
    }
    if short + long > 0 {
        log::info!("dropped {short} length-1 streams and {long} streams longer than {max_context}");
    }
    Ok(out)
}

fn batch_targets(seqs: &[&Vec<TokenFields>]) -> Vec<Option<TokenFields>> {
    seqs.iter().flat_map(|s| next_token_targets(s)).collect()
}

/// Forward, loss and backward for one packed batch; `grads` is overwritten.
fn step(ckpt: &Checkpoint, seqs: &[&Vec<TokenFields>], w: &LossWeights, grads: &mut [f32]) -> Result<LossBreakdown> {
    let m = &ckpt.model;
    let batch = Batch::<f32>::from_fields(seqs, m.config().vocab_size());
    let (out, cache) = network::forward(m.config(), m.layout(), m.params(), &batch);
    let (terms, hg) = loss_and_grads(&out, &batch_targets(seqs), w)?;
    grads.fill(0.0);
    network::backward(m.config(), m.layout(), m.params(), &batch, &cache, &hg, grads);
    Ok(terms)
}

/// Trains from `ckpt` (continuing its optimizer state if present) and returns
/// one checkpoint every `checkpoint_every` epochs.
pub fn train(ckpt: &Checkpoint, dataset: &TraceDataset, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let seqs = prepare_sequences(dataset, &ckpt.tokenizer, ckpt.config().max_context)?;
    if seqs.is_empty() {
        return Err(Error::Empty("no trainable streams (all length 1 or over max_context)"));
    }
    let adam = tcfg.adam();
    let mut cur = ckpt.clone();
    let mut opt = cur.optimizer.take().unwrap_or_else(|| AdamState::new(cur.model.param_count()));
    let mut grads = vec![0f32; cur.model.param_count()];
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut out = TrainOutcome {
        checkpoints: Vec::new(),
        history: Vec::new(),
    };

    for e in 0..tcfg.epochs {
        let epoch = ckpt.epoch + e + 1;
        order.sort_unstable();
        order.shuffle(&mut seeded(derive_seed(tcfg.seed, epoch as u64)));
        let mut parts = Vec::new();
        let mut norm_sum = 0.0;
        for (bi, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<&Vec<TokenFields>> = chunk.iter().map(|i| &seqs[*i]).collect();
            let terms = step(&cur, &batch, &tcfg.loss_weights, &mut grads)?;
            let total = terms.total(&tcfg.loss_weights);
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            norm_sum += opt.update(&adam, cur.model.params_mut(), &grads);
            parts.push(terms);
        }
        let terms = LossBreakdown::merge(&parts);
        let stats = EpochStats {
            epoch,
            loss: terms.total(&tcfg.loss_weights),
            terms,
            mean_grad_norm: norm_sum / parts.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (event {:.4}, arrival {:.4}, stop {:.4})",
            stats.loss,
            terms.event,
            terms.arrival,
            terms.stop
        );
        out.history.push(stats);
        cur.epoch = epoch;
        if (e + 1) % tcfg.checkpoint_every == 0 {
            let mut snap = cur.clone();
            snap.optimizer = Some(opt.clone());
            out.checkpoints.push(snap);
        }
    }
    Ok(out)
}

/// Trains from `ckpt`'s weights on a new dataset with a fresh optimizer.
/// Zero epochs returns `ckpt` unchanged.
pub fn finetune(ckpt: &Checkpoint, dataset: &TraceDataset, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.generation() != ckpt.tokenizer.generation {
        return Err(Error::Config(format!(
            "checkpoint is for {} but the dataset is {}",
            ckpt.tokenizer.generation,
            dataset.generation()
        )));
    }
    if tcfg.epochs == 0 {
        return Ok(TrainOutcome {
            checkpoints: vec![ckpt.clone()],
            history: Vec::new(),
        });
    }
    let mut start = ckpt.clone();
    start.optimizer = None;
    train(&start, dataset, tcfg)
}

/// Mean per-field loss of `ckpt` on `dataset` without updating weights.
pub fn evaluate_loss(ckpt: &Checkpoint, dataset: &TraceDataset) -> Result<LossBreakdown> {
    let seqs = prepare_sequences(dataset, &ckpt.tokenizer, ckpt.config().max_context)?;
    let m = &ckpt.model;
    let mut parts = Vec::new();
    for chunk in seqs.chunks(64) {
        let refs: Vec<&Vec<TokenFields>> = chunk.iter().collect();
        let batch = Batch::<f32>::from_fields(&refs, m.config().vocab_size());
        let (out, _) = network::forward(m.config(), m.layout(), m.params(), &batch);
        parts.push(loss_terms(&out, &batch_targets(&refs))?);
    }
    Ok(LossBreakdown::merge(&parts))
}
