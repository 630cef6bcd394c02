//! Mini-batch NLL training loop: per-epoch seeded shuffling, dropout,
//! batch-mean gradients, optimizer steps, dev-set tracking and best
//! checkpointing.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, encode, LabelSet, LabeledSentence, Vocabulary, UNK_ID};
use crate::crf::{self, bio_constraint_mask, viterbi_decode, TransitionModel};
use crate::error::{Error, Result};
use crate::eval::{extract_spans, score};
use crate::nn::{
    init_params, sentence_backward, sentence_forward, ForwardOpts, GradientStore, ModelParams,
};
use crate::optim::{init_state, step, OptimizerConfig, OptimizerKind};
use crate::tagger::Tagger;

/// Training hyperparameters. Defaults: embedding 200, hidden 100 per
/// direction, max length 300, 300 epochs, batch 16, dropout 0.5 and Adam
/// at lr 0.001.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub min_count: usize,
    pub seed: u64,
    pub hard_bio_constraints: bool,
    pub tanh_projection: bool,
    pub optimizer: OptimizerConfig,
    /// Optional pretrained vectors overriding the random init for known
    /// characters.
    pub pretrained_embeddings: Option<Vec<(char, Vec<f64>)>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 200,
            hidden_dim: 100,
            max_len: 300,
            epochs: 300,
            batch_size: 16,
            dropout: 0.5,
            min_count: 1,
            seed: 1,
            hard_bio_constraints: false,
            tanh_projection: true,
            optimizer: OptimizerConfig::for_kind(OptimizerKind::Adam),
            pretrained_embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed-dim", self.embed_dim),
            ("hidden-dim", self.hidden_dim),
            ("max-len", self.max_len),
            ("batch-size", self.batch_size),
            ("min-count", self.min_count),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        self.optimizer.validate()?;
        if let Some(pre) = &self.pretrained_embeddings {
            if let Some((c, v)) = pre.iter().find(|(_, v)| v.len() != self.embed_dim) {
                return Err(Error::InvalidConfig(format!(
                    "pretrained vector for {c:?} has {} dims, expected {}",
                    v.len(),
                    self.embed_dim
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch progress record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_f1: Option<f64>,
}

/// A checkpoint selected on dev micro-F1.
#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub dev_f1: f64,
    pub tagger: Tagger,
}

/// Result of a training run: the final model (canonical), the best-dev
/// checkpoint when a dev set was given, and the epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tagger: Tagger,
    pub best: Option<BestCheckpoint>,
    pub history: Vec<EpochStats>,
}

/// Mean NLL over a batch of `(char_ids, gold_label_ids)` pairs (unpadded),
/// accumulating `d(mean loss)/d(params)` into `grads`.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[(&[usize], &[usize])],
    opts: &ForwardOpts,
    rng: &mut impl Rng,
    grads: &mut GradientStore,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for (ids, gold) in batch {
        let cache = sentence_forward(params, ids, opts, rng)?;
        let (loss, cg) = crf::nll_loss(&cache.emissions, gold, &params.transitions)?;
        loss_sum += loss;
        sentence_backward(params, &cache, &(cg.d_emissions * scale), grads)?;
        grads.trans.scaled_add(scale, &cg.d_trans);
        grads.start.scaled_add(scale, &cg.d_start);
        grads.stop.scaled_add(scale, &cg.d_stop);
    }
    Ok(loss_sum * scale)
}

/// Mean NLL over a batch without gradients (used by the finite-difference
/// oracle).
pub fn batch_loss(
    params: &ModelParams,
    batch: &[(&[usize], &[usize])],
    opts: &ForwardOpts,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut loss_sum = 0.0;
    for (ids, gold) in batch {
        let cache = sentence_forward(params, ids, opts, rng)?;
        let (loss, _) = crf::nll_loss(&cache.emissions, gold, &params.transitions)?;
        loss_sum += loss;
    }
    Ok(loss_sum / batch.len() as f64)
}

fn decode_labels(
    params: &ModelParams,
    vocab: &Vocabulary,
    label_set: &LabelSet,
    chars: &[char],
    tanh_projection: bool,
    trans: &TransitionModel,
) -> Result<Vec<String>> {
    let ids: Vec<usize> = chars.iter().map(|&c| vocab.id_of(c)).collect();
    let opts = ForwardOpts {
        dropout: 0.0,
        training: false,
        tanh_projection,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = sentence_forward(params, &ids, &opts, &mut rng)?;
    let best = viterbi_decode(&cache.emissions, trans)?;
    Ok(best
        .tags
        .into_iter()
        .map(|t| label_set.label(t).to_owned())
        .collect())
}

/// Dev-set micro-F1 of the current parameters.
fn dev_f1(
    params: &ModelParams,
    vocab: &Vocabulary,
    label_set: &LabelSet,
    dev: &[LabeledSentence],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut trans = params.transitions.clone();
    if cfg.hard_bio_constraints {
        trans.apply_mask(&bio_constraint_mask(label_set)?)?;
    }
    let mut gold = Vec::with_capacity(dev.len());
    let mut pred = Vec::with_capacity(dev.len());
    for s in dev {
        gold.push(extract_spans(&s.labels)?);
        let labels = decode_labels(
            params,
            vocab,
            label_set,
            &s.chars,
            cfg.tanh_projection,
            &trans,
        )?;
        pred.push(extract_spans(&labels)?);
    }
    Ok(score(&gold, &pred)?.overall.f1())
}

/// Trains a model from scratch. `on_epoch` sees every epoch's stats and
/// may stop training early by returning `ControlFlow::Break`.
///
/// Reproducibility: all randomness (init, shuffling, dropout) comes from
/// one stream seeded with `cfg.seed`, so identical inputs produce an
/// identical model.
pub fn train(
    cfg: &TrainConfig,
    label_set: &LabelSet,
    train_sents: &[LabeledSentence],
    dev_sents: Option<&[LabeledSentence]>,
    mut on_epoch: impl FnMut(&EpochStats) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = build_vocab(train_sents, cfg.min_count)?;
    let encoded = encode(train_sents, &vocab, label_set, cfg.max_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(
        vocab.len(),
        cfg.embed_dim,
        cfg.hidden_dim,
        label_set.len(),
        &mut rng,
    )?;
    if let Some(pre) = &cfg.pretrained_embeddings {
        for (c, vec) in pre {
            let id = vocab.id_of(*c);
            if id != UNK_ID {
                for (slot, v) in params.embedding.row_mut(id).iter_mut().zip(vec) {
                    *slot = *v;
                }
            }
        }
    }

    let mut opt_state = init_state(&params, &cfg.optimizer);
    let mut grads = GradientStore::zeros_like(&params);
    let opts = ForwardOpts {
        dropout: cfg.dropout,
        training: true,
        tanh_projection: cfg.tanh_projection,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut indices: Vec<usize> = (0..train_sents.len()).collect();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            grads.zero();
            let batch: Vec<(&[usize], &[usize])> = chunk
                .iter()
                .map(|&i| {
                    let n = encoded.lengths[i];
                    (&encoded.char_ids[i][..n], &encoded.label_ids[i][..n])
                })
                .collect();
            let batch_mean = batch_loss_and_grads(&params, &batch, &opts, &mut rng, &mut grads)?;
            if !batch_mean.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "loss became {batch_mean} at epoch {epoch}; aborting training"
                )));
            }
            step(&mut params, &grads, &mut opt_state, &cfg.optimizer)?;
            epoch_loss_sum += batch_mean * chunk.len() as f64;
        }

        let stats = EpochStats {
            epoch,
            mean_loss: epoch_loss_sum / train_sents.len() as f64,
            dev_f1: match dev_sents {
                Some(dev) => Some(dev_f1(&params, &vocab, label_set, dev, cfg)?),
                None => None,
            },
        };
        if let Some(f1) = stats.dev_f1 {
            if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
                best = Some((epoch, f1, params.clone()));
            }
        }
        history.push(stats);
        if on_epoch(&stats).is_break() {
            break;
        }
    }

    let best = match best {
        Some((epoch, f1, p)) => Some(BestCheckpoint {
            epoch,
            dev_f1: f1,
            tagger: Tagger::new(
                p,
                vocab.clone(),
                label_set.clone(),
                cfg.hard_bio_constraints,
                cfg.tanh_projection,
            )?,
        }),
        None => None,
    };
    let tagger = Tagger::new(
        params,
        vocab,
        label_set.clone(),
        cfg.hard_bio_constraints,
        cfg.tanh_projection,
    )?;
    Ok(TrainOutcome {
        tagger,
        best,
        history,
    })
}
