//! Mini-batch training with early stopping, and chunked inference.

use std::fmt::Write as _;

use log::info;
use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Dropout, Mode, Model};
use super::optim::{adam_step, AdamConfig, AdamState};
use crate::audio::{EventRoll, FRAME_HOP_SECONDS};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_by_context, ScoredRecording, SEGMENT_SECONDS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sequence_length: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Smallest validation F gain that counts as an improvement.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sequence_length: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            dropout: 0.5,
            patience: 50,
            max_epochs: 200,
            seed: 0,
            threshold: 0.5,
            min_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 || self.batch_size == 0 {
            return Err(Error::validation("sequence length and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::validation("max epochs and patience must be positive"));
        }
        Ok(())
    }
}

/// One recording's aligned model inputs and frame targets.
#[derive(Debug, Clone)]
pub struct LabeledSequence {
    /// One `(T, L, C)` volume per branch, in architecture order.
    pub inputs: Vec<Array3<f64>>,
    /// `(T, K)` binary targets.
    pub targets: Array2<f64>,
    pub context: String,
}

impl LabeledSequence {
    pub fn frames(&self) -> usize {
        self.targets.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f: f64,
    /// `None` when the validation split has no reference events.
    pub val_er: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// Plain-text table: epoch, train loss, validation F and ER.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>6} {:>12} {:>8} {:>8}\n", "epoch", "train_loss", "val_f", "val_er");
        for e in &self.epochs {
            let er = e.val_er.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{:>6} {:>12.6} {:>8.4} {:>8}", e.epoch, e.train_loss, e.val_f, er);
        }
        let _ = writeln!(out, "best_epoch={}", self.best_epoch);
        out
    }
}

fn check_sequences(model: &Model, data: &[LabeledSequence], what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::validation(format!("{what} split is empty")));
    }
    let k = model.arch.classes.len();
    for (i, seq) in data.iter().enumerate() {
        if seq.inputs.len() != model.arch.branches.len() {
            return Err(Error::validation(format!(
                "{what} sequence {i} has {} inputs, model has branches [{}]",
                seq.inputs.len(),
                model.arch.branch_names().join(", ")
            )));
        }
        if seq.targets.ncols() != k || seq.inputs.iter().any(|x| x.dim().0 != seq.frames()) {
            return Err(Error::validation(format!("{what} sequence {i} is misaligned")));
        }
    }
    Ok(())
}

/// Non-overlapping `(recording, start, length)` chunks.
fn chunks(data: &[LabeledSequence], len: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (r, seq) in data.iter().enumerate() {
        let mut start = 0;
        while start < seq.frames() {
            let n = len.min(seq.frames() - start);
            out.push((r, start, n));
            start += len;
        }
    }
    out
}

struct Batch {
    inputs: Vec<Array4<f64>>,
    targets: Array3<f64>,
    mask: Array2<f64>,
}

fn assemble(data: &[LabeledSequence], picks: &[(usize, usize, usize)], len: usize) -> Batch {
    let first = &data[picks[0].0];
    let mut inputs: Vec<Array4<f64>> = first
        .inputs
        .iter()
        .map(|x| Array4::zeros((picks.len(), len, x.dim().1, x.dim().2)))
        .collect();
    let mut targets = Array3::zeros((picks.len(), len, first.targets.ncols()));
    let mut mask = Array2::zeros((picks.len(), len));
    for (n, &(r, start, count)) in picks.iter().enumerate() {
        let seq = &data[r];
        for (dst, src) in inputs.iter_mut().zip(&seq.inputs) {
            dst.slice_mut(s![n, ..count, .., ..]).assign(&src.slice(s![start..start + count, .., ..]));
        }
        targets
            .slice_mut(s![n, ..count, ..])
            .assign(&seq.targets.slice(s![start..start + count, ..]));
        mask.slice_mut(s![n, ..count]).fill(1.0);
    }
    Batch { inputs, targets, mask }
}

/// Train with Adam on shuffled fixed-length chunks, validating with
/// segment-based F after every epoch. Returns the best-F model.
pub fn train(
    mut model: Model,
    train_set: &[LabeledSequence],
    validation: &[LabeledSequence],
    cfg: &TrainConfig,
) -> Result<(Model, History)> {
    cfg.validate()?;
    check_sequences(&model, train_set, "training")?;
    check_sequences(&model, validation, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = chunks(train_set, cfg.sequence_length);
    let mut adam = AdamState::new();
    let mut history = History::default();
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut cell_sum = 0.0;
        for picks in order.chunks(cfg.batch_size) {
            let batch = assemble(train_set, picks, cfg.sequence_length);
            let views: Vec<_> = batch.inputs.iter().map(|a| a.view()).collect();
            let dropout = Some(Dropout { rate: cfg.dropout, rng: &mut rng });
            let (_, cache) = model.forward(&views, Mode::Train, dropout)?;
            let (loss, grads) = model.backward(&cache, batch.targets.view(), batch.mask.view())?;
            model.apply_batch_stats(&cache);
            adam_step(&mut model.params, &grads, &mut adam, &cfg.adam);
            let cells = batch.mask.sum();
            loss_sum += loss * cells;
            cell_sum += cells;
        }
        let report = evaluate_sequences(&model, validation, cfg)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / cell_sum,
            val_f: report.0,
            val_er: report.1,
        };
        info!(
            "epoch {epoch}: loss {:.5} val F {:.4} ER {}",
            record.train_loss,
            record.val_f,
            record.val_er.map_or("nan".into(), |v| format!("{v:.4}"))
        );
        history.epochs.push(record);
        let improved = best.as_ref().is_none_or(|(f, _)| record.val_f >= f + cfg.min_delta);
        if improved {
            best = Some((record.val_f, model.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

/// Segment-based `(F, ER)` of thresholded predictions against the targets.
pub fn evaluate_sequences(model: &Model, data: &[LabeledSequence], cfg: &TrainConfig) -> Result<(f64, Option<f64>)> {
    let mut refs = Vec::with_capacity(data.len());
    let mut syss = Vec::with_capacity(data.len());
    for seq in data {
        let views: Vec<_> = seq.inputs.iter().map(|a| a.view()).collect();
        syss.push(predict(model, &views, cfg.threshold, cfg.sequence_length)?);
        refs.push(targets_to_roll(&seq.targets, &model.arch.classes)?);
    }
    let scored: Vec<_> = data
        .iter()
        .zip(refs.iter().zip(&syss))
        .map(|(seq, (r, s))| ScoredRecording {
            context: &seq.context,
            reference: r,
            system: s,
        })
        .collect();
    let report = evaluate_by_context(&scored, SEGMENT_SECONDS)?;
    Ok((report.f, report.er))
}

/// Binary `(T, K)` targets as an event roll at the standard hop.
pub fn targets_to_roll(targets: &Array2<f64>, classes: &[String]) -> Result<EventRoll> {
    EventRoll::new(targets.mapv(|v| v > 0.5), FRAME_HOP_SECONDS, classes.to_vec())
}

/// Frame probabilities `(T, K)` for one recording, computed chunk by chunk.
/// The final chunk runs at its true length.
pub fn predict_proba(model: &Model, inputs: &[ArrayView3<f64>], chunk: usize) -> Result<Array2<f64>> {
    if inputs.len() != model.arch.branches.len() {
        return Err(Error::validation(format!(
            "model expects inputs for branches [{}], got {}",
            model.arch.branch_names().join(", "),
            inputs.len()
        )));
    }
    if chunk == 0 {
        return Err(Error::validation("chunk length must be positive"));
    }
    let frames = inputs[0].dim().0;
    let mut out = Array2::zeros((frames, model.arch.classes.len()));
    let mut start = 0;
    while start < frames {
        let end = (start + chunk).min(frames);
        let views: Vec<_> = inputs
            .iter()
            .map(|x| x.slice(s![start..end, .., ..]).insert_axis(Axis(0)))
            .collect();
        let p = model.predict_proba(&views)?;
        out.slice_mut(s![start..end, ..]).assign(&p.index_axis(Axis(0), 0));
        start = end;
    }
    Ok(out)
}

/// Threshold probabilities: active iff `p > threshold`.
pub fn threshold_roll(probs: &Array2<f64>, threshold: f64, classes: &[String]) -> Result<EventRoll> {
    EventRoll::new(probs.mapv(|p| p > threshold), FRAME_HOP_SECONDS, classes.to_vec())
}

/// Event roll for one recording.
pub fn predict(model: &Model, inputs: &[ArrayView3<f64>], threshold: f64, chunk: usize) -> Result<EventRoll> {
    let probs = predict_proba(model, inputs, chunk)?;
    threshold_roll(&probs, threshold, &model.arch.classes)
}
