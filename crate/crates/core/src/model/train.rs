//! Training loop with dev-based checkpoint selection.

use std::fmt::Write as _;

use super::decode::decode_many;
use super::forward::Noise;
use super::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
use super::params::{Params, Transformer};
use super::tensor::Scalar;
use super::ModelError;
use crate::sampler::Vocab;
use crate::sampler::{encode_source, Batch, EpochPlan};
use crate::triples::TripleSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub adam: AdamConfig,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Evaluate on dev after every this many epochs.
    pub eval_every_epochs: usize,
    /// Additional evaluation every this many steps, for large pools.
    pub eval_every_steps: Option<usize>,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
    /// Stop once the dev metric reaches 100; later checkpoints could only tie.
    pub stop_at_perfect: bool,
    /// Rows per forward pass; gradients of a batch are accumulated over
    /// slices of this size. Does not change the loss being optimized.
    pub micro_batch: usize,
    pub seed: u64,
    /// Sources decoded together during dev evaluation.
    pub decode_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            max_epochs: 960,
            eval_every_epochs: 1,
            eval_every_steps: None,
            patience: None,
            stop_at_perfect: true,
            micro_batch: 64,
            seed: 0,
            decode_chunk: 64,
        }
    }
}

/// Source of shuffled batches, one list per epoch.
pub trait BatchSource {
    fn batches_per_epoch(&self) -> usize;
    fn batches(&self, epoch: u64) -> Vec<Batch>;
}

impl BatchSource for EpochPlan {
    fn batches_per_epoch(&self) -> usize {
        EpochPlan::batches_per_epoch(self)
    }

    fn batches(&self, epoch: u64) -> Vec<Batch> {
        EpochPlan::batches(self, epoch)
    }
}

/// Encoded dev items of one language.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub language: String,
    pub sources: Vec<Vec<u32>>,
    pub golds: Vec<String>,
}

impl DevSet {
    pub fn from_triples(set: &TripleSet, vocab: &Vocab) -> Self {
        let mut sources = Vec::with_capacity(set.len());
        let mut golds = Vec::with_capacity(set.len());
        for t in set.iter() {
            sources.push(encode_source(t.lemma, &t.tags(), set.language(), vocab));
            golds.push(t.form.to_owned());
        }
        Self {
            language: set.language().to_owned(),
            sources,
            golds,
        }
    }

    pub fn len(&self) -> usize {
        self.golds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.golds.is_empty()
    }
}

/// Exact-match percentage of greedy predictions on one dev set.
pub fn dev_accuracy<T: Scalar>(model: &Transformer<T>, vocab: &Vocab, dev: &DevSet, chunk: usize) -> Result<f64, ModelError> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let sources: Vec<&[u32]> = dev.sources.iter().map(Vec::as_slice).collect();
    // A prediction longer than every gold form is wrong whatever follows, so
    // decoding past that length cannot change the score.
    let longest = dev.golds.iter().map(|g| g.chars().count()).max().unwrap_or(0);
    let cap = (longest + 1).min(model.config.max_target_len);
    let preds = decode_many(model, vocab, &sources, cap, chunk)?;
    let hits = preds.iter().zip(&dev.golds).filter(|(p, g)| &p.form == *g).count();
    Ok(100.0 * hits as f64 / dev.len() as f64)
}

/// Unweighted mean of per-language dev accuracies.
pub fn dev_macro<T: Scalar>(model: &Transformer<T>, vocab: &Vocab, devs: &[DevSet], chunk: usize) -> Result<Option<f64>, ModelError> {
    let nonempty: Vec<&DevSet> = devs.iter().filter(|d| !d.is_empty()).collect();
    if nonempty.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for d in &nonempty {
        sum += dev_accuracy(model, vocab, d, chunk)?;
    }
    Ok(Some(sum / nonempty.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Token-weighted mean training loss since the previous row.
    pub loss: f64,
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tstep\tlr\tloss\tdev_metric\n");
        for r in &self.rows {
            let dev = r.dev_metric.map_or_else(|| "NA".to_owned(), |m| format!("{m:.2}"));
            let _ = writeln!(out, "{}\t{}\t{:.9}\t{:.6}\t{}", r.epoch, r.step, r.lr, r.loss, dev);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best dev metric (earliest on ties), or the final
    /// parameters when no dev set was given.
    pub model: Transformer<f32>,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub best_step: u64,
    pub epochs_run: usize,
    pub log: TrainLog,
}

fn accumulate(into: &mut Params<f32>, g: &Params<f32>) {
    for (a, (_, b)) in into.tensors_mut().into_iter().zip(g.named()) {
        for (x, &y) in a.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
}

/// Stream index of the dropout generator for one micro-batch.
fn noise_stream(step: u64, slice: usize) -> u64 {
    (step << 16) | slice as u64
}

struct Selection {
    best: Option<(f64, usize, u64, Params<f32>)>,
    stale: usize,
}

/// Trains `model` in place of a copy. `progress` sees every log row as it is
/// written.
pub fn train(
    model: Transformer<f32>,
    source: &dyn BatchSource,
    vocab: &Vocab,
    config: &TrainConfig,
    devs: &[DevSet],
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome, ModelError> {
    let mut model = model;
    let mut adam = Adam::new(&model.config, config.adam.clone());
    let total_steps = (config.max_epochs * source.batches_per_epoch()) as u64;
    let mut log = TrainLog::default();
    let mut sel = Selection { best: None, stale: 0 };
    let mut step: u64 = 0;
    let mut loss_sum = 0.0;
    let mut loss_tokens = 0usize;
    let mut last_lr = config.initial_lr;
    let mut epochs_run = 0;

    // Evaluates, logs and updates the selection; returns true to stop.
    let mut checkpoint = |model: &Transformer<f32>,
                          epoch: usize,
                          step: u64,
                          lr: f64,
                          loss_sum: &mut f64,
                          loss_tokens: &mut usize,
                          evaluate: bool,
                          log: &mut TrainLog,
                          sel: &mut Selection|
     -> Result<bool, ModelError> {
        let metric = if evaluate {
            dev_macro(model, vocab, devs, config.decode_chunk)?
        } else {
            None
        };
        let loss = if *loss_tokens > 0 { *loss_sum / *loss_tokens as f64 } else { 0.0 };
        let row = LogRow { epoch, step, lr, loss, dev_metric: metric };
        progress(&row);
        log.rows.push(row);
        *loss_sum = 0.0;
        *loss_tokens = 0;
        let Some(m) = metric else { return Ok(false) };
        if sel.best.as_ref().is_none_or(|b| m > b.0) {
            sel.best = Some((m, epoch, step, model.params.clone()));
            sel.stale = 0;
        } else {
            sel.stale += 1;
        }
        let perfect = config.stop_at_perfect && m >= 100.0;
        let patience = config.patience.is_some_and(|p| sel.stale >= p);
        Ok(perfect || patience)
    };

    'epochs: for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        for (bi, batch) in source.batches(epoch as u64).into_iter().enumerate() {
            let lr = cosine_lr(config.initial_lr, step, total_steps);
            last_lr = lr;
            let tokens = batch.target_tokens();
            let mut grads = Params::<f32>::zeros(&model.config);
            let mut batch_loss = 0.0;
            for (si, slice) in batch.split_rows(config.micro_batch.max(1)).iter().enumerate() {
                let noise = Noise::new(&model.config, config.seed, noise_stream(step, si));
                let (l, g) = model.loss_and_grads(slice, Some(noise), tokens)?;
                batch_loss += l;
                accumulate(&mut grads, &g);
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: bi });
            }
            clip_grad_norm(&mut grads, config.grad_clip_norm);
            adam.step(&mut model.params, &grads, lr, config.weight_decay);
            loss_sum += batch_loss * tokens as f64;
            loss_tokens += tokens;
            step += 1;
            if config.eval_every_steps.is_some_and(|n| n > 0 && step.is_multiple_of(n as u64))
                && checkpoint(&model, epoch, step, lr, &mut loss_sum, &mut loss_tokens, true, &mut log, &mut sel)?
            {
                break 'epochs;
            }
        }
        let evaluate = (epoch + 1) % config.eval_every_epochs.max(1) == 0 || epoch + 1 == config.max_epochs;
        if checkpoint(&model, epoch, step, last_lr, &mut loss_sum, &mut loss_tokens, evaluate, &mut log, &mut sel)? {
            break;
        }
    }

    let (best_metric, best_epoch, best_step, params) = match sel.best {
        Some((m, e, s, p)) => (Some(m), e, s, p),
        None => (None, epochs_run.saturating_sub(1), step, model.params.clone()),
    };
    Ok(TrainOutcome {
        model: Transformer::from_params(model.config.clone(), params)?,
        best_metric,
        best_epoch,
        best_step,
        epochs_run,
        log,
    })
}
