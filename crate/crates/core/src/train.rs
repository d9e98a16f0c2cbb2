//! Adapter training with early stopping on validation WER, prediction by
//! greedy decoding, and the learning-rate sweep.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::ToyAcoustic;
use crate::exec::Exec;
use crate::fusion::{FusionError, Path};
use crate::hypotheses::HypothesisRecord;
use crate::lm::{LmError, ToyLm};
use crate::metrics::{EvalReport, MetricError, Pooling, Scored};
use crate::numerics::Tensor;
use crate::optim::{batch_gradient, Adam, AdamConfig};
use crate::params::{ParamSet, Phase};
use crate::prompt::{build_prompt, build_sample, prompt_ids, PromptError, PromptSample};
use crate::seed::rng_for;
use crate::tokenizer::CharTokenizer;

pub const LEARNING_RATES: [f64; 3] = [1e-2, 1e-3, 5e-4];
pub const EPOCHS: usize = 25;
pub const BATCH_SIZE: usize = 32;
pub const WEIGHT_DECAY: f64 = 1e-2;

/// Where the acoustic stream fed to the language model comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Strong encoder output for the utterance.
    Acoustic,
    /// Standard-normal noise of the same shape, seeded per utterance.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Effective batch; gradients are accumulated over this many samples.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// Allows values outside the standard recipe.
    pub allow_override: bool,
    /// Leading hypotheses shown in each prompt.
    pub prompt_hypotheses: usize,
    /// Restrict the loss to the response.
    pub masked: bool,
    pub template: String,
    pub features: FeatureSource,
    pub max_new_tokens: usize,
    pub pooling: Pooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: EPOCHS,
            batch_size: BATCH_SIZE,
            weight_decay: WEIGHT_DECAY,
            patience: 5,
            seed: 0,
            allow_override: false,
            prompt_hypotheses: 5,
            masked: true,
            template: "v1".into(),
            features: FeatureSource::Acoustic,
            max_new_tokens: 48,
            pooling: Pooling::Corpus,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 || self.prompt_hypotheses == 0 {
            return Err(TrainError::Config("batch size, epochs and prompt hypotheses must be positive".into()));
        }
        if self.allow_override {
            return Ok(());
        }
        if !LEARNING_RATES.contains(&self.learning_rate) {
            return Err(TrainError::Config(format!(
                "learning rate {} is not one of {LEARNING_RATES:?}; pass --override to use it",
                self.learning_rate
            )));
        }
        if self.epochs != EPOCHS || self.batch_size != BATCH_SIZE || self.weight_decay != WEIGHT_DECAY {
            return Err(TrainError::Config(format!(
                "epochs/batch/weight decay must be {EPOCHS}/{BATCH_SIZE}/{WEIGHT_DECAY}; pass --override to change them"
            )));
        }
        Ok(())
    }
}

/// State captured when the loss stops being finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub recent_losses: Vec<f64>,
    pub gates: Vec<(String, f64)>,
    pub grad_norm: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged at epoch {} step {} (loss {})", .0.epoch, .0.step, .0.loss)]
    Divergent(Box<Divergence>),
    #[error("no trainable example left after excluding ground-truth-only lists")]
    NoExamples,
}

/// A record with the acoustic stream the language model attends to.
#[derive(Clone, Debug)]
pub struct Example {
    pub record: HypothesisRecord,
    /// `[1, frames, audio width]`.
    pub h_audio: Tensor,
}

/// Pairs records with strong-encoder outputs (or seeded noise).
pub fn prepare_examples(
    strong: &ToyAcoustic,
    records: &[HypothesisRecord],
    features: &[Tensor],
    source: FeatureSource,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Example>, FusionError> {
    let pairs: Vec<(&HypothesisRecord, &Tensor)> = records.iter().zip(features).collect();
    exec.try_map(&pairs, |(record, f)| {
        let h_audio = match source {
            FeatureSource::Acoustic => strong.encode(f)?,
            FeatureSource::Random => {
                let shape = [1, strong.config.frames, strong.config.width];
                Tensor::randn(&shape, 1.0, &mut rng_for(seed, "random-features", &record.id))
            }
        };
        Ok(Example { record: (*record).clone(), h_audio })
    })
}

fn prompt_for(record: &HypothesisRecord, config: &TrainConfig) -> Result<String, PromptError> {
    let hyps: Vec<String> = record.texts().into_iter().take(config.prompt_hypotheses).collect();
    build_prompt(&hyps, &config.template)
}

pub fn training_sample(example: &Example, config: &TrainConfig) -> Result<PromptSample, PromptError> {
    build_sample(&CharTokenizer::lm(), &prompt_for(&example.record, config)?, &example.record.ground_truth, config.masked)
}

/// Greedy transcript from the response header, cut at the first newline.
pub fn predict(lm: &ToyLm, example: &Example, config: &TrainConfig) -> Result<String, TrainError> {
    let tok = CharTokenizer::lm();
    let newline = tok.newline().expect("lm tokenizer has a newline");
    let ids = prompt_ids(&tok, &prompt_for(&example.record, config)?);
    let out = lm.generate_greedy(&ids, Some(&example.h_audio), Path::Fused, config.max_new_tokens, newline)?;
    let text = tok.detokenize(&out);
    Ok(text.split('\n').next().unwrap_or("").to_string())
}

pub fn predict_all(lm: &ToyLm, examples: &[Example], config: &TrainConfig, exec: Exec) -> Result<Vec<String>, TrainError> {
    exec.try_map(examples, |e| predict(lm, e, config))
}

pub fn report(label: &str, examples: &[Example], predictions: &[String], pooling: Pooling) -> Result<EvalReport, MetricError> {
    let records: Vec<&HypothesisRecord> = examples.iter().map(|e| &e.record).collect();
    report_records(label, &records, predictions, pooling)
}

/// Scores `predictions` against `records`, which pair up in order.
pub fn report_records(
    label: &str,
    records: &[&HypothesisRecord],
    predictions: &[String],
    pooling: Pooling,
) -> Result<EvalReport, MetricError> {
    let texts: Vec<Vec<String>> = records.iter().map(|r| r.texts()).collect();
    let items: Vec<Scored<'_>> = records
        .iter()
        .zip(&texts)
        .zip(predictions)
        .map(|((r, hyps), p)| Scored { id: &r.id, ground_truth: &r.ground_truth, hypotheses: hyps, one_best: &r.one_best, prediction: p })
        .collect();
    EvalReport::build(label, &items, pooling)
}

pub fn evaluate(lm: &ToyLm, examples: &[Example], config: &TrainConfig, label: &str, exec: Exec) -> Result<EvalReport, TrainError> {
    let predictions = predict_all(lm, examples, config, exec)?;
    Ok(report(label, examples, &predictions, config.pooling)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub learning_rate: f64,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_wer: f64,
    pub val_wers: Vec<f64>,
    pub loss_curve: Vec<LossPoint>,
}

impl TrainOutcome {
    /// Mean loss over the last `n` steps.
    pub fn final_loss(&self, n: usize) -> f64 {
        let tail = &self.loss_curve[self.loss_curve.len().saturating_sub(n)..];
        tail.iter().map(|p| p.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn trainable_snapshot(lm: &ToyLm) -> Vec<Tensor> {
    let mut out = Vec::new();
    lm.visit_params(&mut |_, p| {
        if p.trainable {
            out.push(p.value().clone());
        }
    });
    out
}

fn restore(lm: &mut ToyLm, snapshot: &[Tensor]) {
    let mut it = snapshot.iter();
    lm.visit_params_mut(&mut |_, p| {
        if p.trainable {
            p.set(it.next().expect("snapshot matches trainable set").clone());
        }
    });
}

fn gates(lm: &ToyLm) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    lm.visit_params(&mut |name, p| {
        if name.contains(".gates.") {
            out.push((name, p.value().item()));
        }
    });
    out
}

/// Trains the adapters of `lm` on `train`, evaluating `val` after each
/// epoch. On return `lm` holds the weights of the best validation epoch.
pub fn train(lm: &mut ToyLm, train: &[Example], val: &[Example], config: &TrainConfig, exec: Exec) -> Result<TrainOutcome, TrainError> {
    train_with(lm, train, val, config, exec, &mut |_, _| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_with(
    lm: &mut ToyLm,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    exec: Exec,
    on_step: &mut dyn FnMut(&ToyLm, &LossPoint),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let items: Vec<(PromptSample, &Tensor)> = train
        .iter()
        .filter(|e| !e.record.train_excluded)
        .map(|e| Ok((training_sample(e, config)?, &e.h_audio)))
        .collect::<Result<_, PromptError>>()?;
    if items.is_empty() {
        return Err(TrainError::NoExamples);
    }
    lm.set_phase(Phase::Adapt);
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate, config.weight_decay));
    let mut outcome = TrainOutcome {
        learning_rate: config.learning_rate,
        best_epoch: 0,
        best_val_wer: f64::INFINITY,
        val_wers: Vec::new(),
        loss_curve: Vec::new(),
    };
    let mut best = trainable_snapshot(lm);
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng_for(config.seed, "train-order", &epoch.to_string()));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&(PromptSample, &Tensor)> = chunk.iter().map(|&i| &items[i]).collect();
            let model: &ToyLm = lm;
            let (loss, grads) = batch_gradient(exec, &batch, |(s, h)| model.loss_and_grads(s, Some(h), Path::Fused))?;
            step += 1;
            if !loss.is_finite() || !grads.global_norm().is_finite() {
                let recent = outcome.loss_curve.iter().rev().take(20).map(|p| p.loss).collect();
                lm.set_phase(Phase::Frozen);
                return Err(TrainError::Divergent(Box::new(Divergence {
                    epoch,
                    step,
                    loss,
                    recent_losses: recent,
                    gates: gates(lm),
                    grad_norm: grads.global_norm(),
                })));
            }
            adam.step(lm, &grads);
            let point = LossPoint { epoch, step, loss };
            outcome.loss_curve.push(point);
            on_step(lm, &point);
        }
        let val_wer = evaluate(lm, val, config, "validation", exec)?.wer_raw;
        log::info!("epoch {epoch}: val wer {val_wer:.2}, last loss {:.4}", outcome.final_loss(1));
        outcome.val_wers.push(val_wer);
        if val_wer < outcome.best_val_wer {
            outcome.best_val_wer = val_wer;
            outcome.best_epoch = epoch;
            best = trainable_snapshot(lm);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    restore(lm, &best);
    lm.set_phase(Phase::Frozen);
    Ok(outcome)
}

/// One run per learning rate in the sweep, starting from the same model;
/// the lowest best validation WER wins (earlier rate on ties).
pub fn sweep(
    base: &ToyLm,
    train_set: &[Example],
    val: &[Example],
    config: &TrainConfig,
    exec: Exec,
) -> Result<(ToyLm, TrainOutcome, Vec<TrainOutcome>), TrainError> {
    let mut best: Option<(ToyLm, TrainOutcome)> = None;
    let mut all = Vec::new();
    for lr in LEARNING_RATES {
        let mut lm = base.clone();
        let outcome = train(&mut lm, train_set, val, &TrainConfig { learning_rate: lr, ..config.clone() }, exec)?;
        all.push(outcome.clone());
        if best.as_ref().is_none_or(|(_, b)| outcome.best_val_wer < b.best_val_wer) {
            best = Some((lm, outcome));
        }
    }
    let (lm, outcome) = best.expect("sweep is non-empty");
    Ok((lm, outcome, all))
}
