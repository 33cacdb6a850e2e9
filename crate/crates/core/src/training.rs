//! Sampled binary cross-entropy training in either direction.
//!
//! Forward training predicts the next item at every position of a window.
//! Reverse training is forward training on reversed sequences, so the model
//! learns to predict the item that came *before*.

use std::io::Write;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::AugmentedSequence;
use crate::dataset::{pad_truncate, Sequence, PAD};
use crate::encoder::{Dropout, ModelParams, Trace};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, AdamState, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub direction: Direction,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub negatives_per_position: usize,
    pub seed: u64,
    /// Drop positions whose target is a pseudo-prior item from the loss.
    pub exclude_pseudo_targets: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            direction: Direction::Forward,
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.001,
            dropout: 0.7,
            negatives_per_position: 1,
            seed: 42,
            exclude_pseudo_targets: false,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.negatives_per_position == 0 {
            return Err(Error::Config("epochs, batch_size and negatives_per_position must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Windows with per-position targets and sampled negatives. Targets and
/// negatives at invalid positions are [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub windows: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    /// `n × negatives_per_position` ids per row, position-major.
    pub negatives: Vec<Vec<u32>>,
    pub valid: Vec<Vec<bool>>,
    pub negatives_per_position: usize,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn valid_positions(&self) -> usize {
        self.valid.iter().flatten().filter(|&&v| v).count()
    }

    pub fn negatives_at(&self, row: usize, pos: usize) -> &[u32] {
        let k = self.negatives_per_position;
        &self.negatives[row][pos * k..(pos + 1) * k]
    }

    /// Invalidates positions whose target lies inside the first `prefix_len`
    /// items of the (forward-ordered) sequence of length `seq_len`.
    pub fn exclude_prefix_targets(&mut self, row: usize, seq_len: usize, prefix_len: usize) {
        let n = self.windows[row].len();
        for p in 0..n {
            // target at window position p is sequence index seq_len - n + p
            if (seq_len + p) < n + prefix_len {
                self.valid[row][p] = false;
            }
        }
    }
}

/// Builds shifted-target windows.
///
/// Forward: input is `pad_truncate(seq[..T-1])`, the target at each position
/// is the following item. Reverse: the same construction on the reversed
/// sequence. One uniform negative (distinct from the target) is drawn per
/// negative slot of every valid position, in row then position order.
pub fn make_batch<R: Rng + ?Sized>(
    sequences: &[&[u32]],
    direction: Direction,
    n: usize,
    vocab_size: usize,
    negatives_per_position: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if vocab_size < 2 {
        return Err(Error::Config("negative sampling needs at least two items".into()));
    }
    let k = negatives_per_position;
    let mut batch = TrainingBatch {
        windows: Vec::with_capacity(sequences.len()),
        targets: Vec::with_capacity(sequences.len()),
        negatives: Vec::with_capacity(sequences.len()),
        valid: Vec::with_capacity(sequences.len()),
        negatives_per_position: k,
    };
    for seq in sequences {
        let ordered: Vec<u32> = match direction {
            Direction::Forward => seq.to_vec(),
            Direction::Reverse => seq.iter().rev().copied().collect(),
        };
        let (window, targets) = if ordered.len() < 2 {
            (vec![PAD; n], vec![PAD; n])
        } else {
            (
                pad_truncate(&ordered[..ordered.len() - 1], n),
                pad_truncate(&ordered[1..], n),
            )
        };
        let valid: Vec<bool> = window.iter().zip(&targets).map(|(&w, &t)| w != PAD && t != PAD).collect();
        let mut negatives = vec![PAD; n * k];
        for p in 0..n {
            if !valid[p] {
                continue;
            }
            for slot in &mut negatives[p * k..(p + 1) * k] {
                *slot = loop {
                    let candidate = rng.random_range(1..=vocab_size as u32);
                    if candidate != targets[p] {
                        break candidate;
                    }
                };
            }
        }
        batch.windows.push(window);
        batch.targets.push(targets);
        batch.negatives.push(negatives);
        batch.valid.push(valid);
    }
    Ok(batch)
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Mean over valid positions. Zero when there are none.
    pub loss: f64,
    pub grads: ModelParams,
    pub valid_positions: usize,
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sampled BCE in evaluation mode (no dropout).
pub fn training_loss(batch: &TrainingBatch, params: &ModelParams) -> Result<LossAndGrad> {
    loss_impl(batch, params, 0.0, None)
}

pub fn training_loss_with_dropout(batch: &TrainingBatch, params: &ModelParams, rate: f64, rng: &mut dyn RngCore) -> Result<LossAndGrad> {
    loss_impl(batch, params, rate, Some(rng))
}

fn loss_impl(batch: &TrainingBatch, params: &ModelParams, rate: f64, mut rng: Option<&mut dyn RngCore>) -> Result<LossAndGrad> {
    let mut grads = params.zeros_like();
    let count = batch.valid_positions();
    if count == 0 {
        return Ok(LossAndGrad {
            loss: 0.0,
            grads,
            valid_positions: 0,
        });
    }
    let vocab = params.config().vocab_size;
    let scale = 1.0 / count as f64;
    let mut total = 0.0;

    for row in 0..batch.len() {
        let window = &batch.windows[row];
        let valid = &batch.valid[row];
        let Some(first) = valid.iter().position(|&v| v) else {
            continue;
        };
        for &id in window.iter().chain(&batch.targets[row]).chain(&batch.negatives[row]) {
            if id as usize > vocab {
                return Err(Error::ItemOutOfRange { id, vocab_size: vocab });
            }
        }
        // valid positions always hold real items; start at the first real one
        let start = window.iter().position(|&id| id != PAD).unwrap_or(first).min(first);
        let dropout = match (&mut rng, rate > 0.0) {
            (Some(r), true) => Some(Dropout { rate, rng: &mut **r }),
            _ => None,
        };
        let trace = Trace::run(window, start, params, dropout);
        let mut d_hidden = Matrix::zeros(window.len() - start, params.config().hidden);

        for p in first..window.len() {
            if !valid[p] {
                continue;
            }
            let h = trace.hidden_at(p);
            let dh = d_hidden.row_mut(p - start);
            let target = batch.targets[row][p] as usize;
            let logit = dot(h, params.item_embeddings.row(target));
            total += softplus(-logit);
            let g = (sigmoid(logit) - 1.0) * scale;
            axpy(g, params.item_embeddings.row(target), dh);
            axpy(g, h, grads.item_embeddings.row_mut(target));
            for &neg in batch.negatives_at(row, p) {
                let neg = neg as usize;
                let logit = dot(h, params.item_embeddings.row(neg));
                total += softplus(logit);
                let g = sigmoid(logit) * scale;
                axpy(g, params.item_embeddings.row(neg), dh);
                axpy(g, h, grads.item_embeddings.row_mut(neg));
            }
        }
        trace.backward(params, &d_hidden, &mut grads);
    }

    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss",
            detail: format!("{loss} over {count} positions"),
        });
    }
    Ok(LossAndGrad {
        loss,
        grads,
        valid_positions: count,
    })
}

/// Training sequences with the number of pseudo-prior items at the front of each.
#[derive(Debug, Clone, Default)]
pub struct TrainCorpus<'a> {
    pub sequences: Vec<&'a [u32]>,
    pub prefix_lens: Vec<usize>,
}

impl<'a> TrainCorpus<'a> {
    pub fn from_sequences(seqs: &'a [Sequence]) -> Self {
        TrainCorpus {
            sequences: seqs.iter().map(|s| s.items.as_slice()).collect(),
            prefix_lens: vec![0; seqs.len()],
        }
    }

    pub fn from_augmented(seqs: &'a [AugmentedSequence]) -> Self {
        TrainCorpus {
            sequences: seqs.iter().map(|s| s.items.as_slice()).collect(),
            prefix_lens: seqs.iter().map(|s| s.prefix_len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall_at_5: Option<f64>,
    pub wall_seconds: f64,
}

pub fn write_epoch_log<W: Write>(records: &[EpochRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,valid_recall@5,wall_seconds")?;
    for r in records {
        let recall = r.valid_recall_at_5.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{:.3}", r.epoch, r.train_loss, recall, r.wall_seconds)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 if no step improved on the start).
    pub best_epoch: usize,
}

/// Validation hook: returns Recall@5 for the given parameters.
pub type Validator<'v> = &'v mut dyn FnMut(&ModelParams) -> Result<f64>;

/// Mini-batch Adam training from `params`.
///
/// With a validator, the parameters of the epoch with the best validation
/// Recall@5 are returned; otherwise those after the last epoch. The
/// optimizer state always starts fresh.
pub fn train(corpus: &TrainCorpus<'_>, mut params: ModelParams, config: &TrainConfig, mut validator: Option<Validator<'_>>) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = *params.config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&params.shapes(), config.learning_rate);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let epoch_start = params.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut positions = 0usize;

        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| corpus.sequences[i]).collect();
            let mut batch = make_batch(&seqs, config.direction, cfg.max_len, cfg.vocab_size, config.negatives_per_position, &mut rng)?;
            if config.exclude_pseudo_targets && config.direction == Direction::Forward {
                for (row, &i) in chunk.iter().enumerate() {
                    batch.exclude_prefix_targets(row, corpus.sequences[i].len(), corpus.prefix_lens[i]);
                }
            }
            if batch.valid_positions() == 0 {
                continue;
            }
            let step = match training_loss_with_dropout(&batch, &params, config.dropout, &mut rng) {
                Ok(step) => step,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        last_good: Box::new(epoch_start),
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += step.loss * step.valid_positions as f64;
            positions += step.valid_positions;
            adam.step(&mut params.arrays_mut(), &step.grads.arrays())?;
            params.zero_padding_row();
        }

        if positions == 0 {
            // nothing to learn from
            return Ok(TrainOutcome {
                params,
                log,
                best_epoch: 0,
            });
        }

        let recall = match validator.as_mut() {
            Some(v) => Some(v(&params)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / positions as f64,
            valid_recall_at_5: recall,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "{:?} epoch {epoch}: loss {:.5} valid recall@5 {}",
            config.direction,
            record.train_loss,
            recall.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into())
        );
        log.push(record);

        if let Some(r) = recall {
            if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                best = Some((r, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }

    Ok(match best {
        Some((_, epoch, p)) => TrainOutcome {
            params: p,
            log,
            best_epoch: epoch,
        },
        None => TrainOutcome {
            params,
            best_epoch: config.epochs.min(log.len()),
            log,
        },
    })
}
