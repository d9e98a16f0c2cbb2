//! The experiment end to end: corpora, pretraining, hypothesis generation,
//! adapter training and evaluation, all driven by one seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ablation::Ablation;
use crate::acoustic::ToyAcoustic;
use crate::config::ModelConfig;
use crate::exec::Exec;
use crate::fusion::FusionError;
use crate::hypotheses::{generate_record, HypothesisRecord, SamplingConfig};
use crate::init_bridge::AdapterInit;
use crate::lm::{LmError, ToyLm};
use crate::metrics::EvalReport;
use crate::numerics::Tensor;
use crate::params::{ParamSet, Role};
use crate::pretrain::{pretrain_toy_models, PretrainConfig, PretrainError, Pretrained};
use crate::seed::rng_for;
use crate::synth::{synth_corpus, SynthConfig, SyntheticUtterance};
use crate::train::{evaluate, prepare_examples, train, Example, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self { train: 2000, val: 100, test: 200 }
    }
}

/// Every knob of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub splits: Splits,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

impl ExperimentConfig {
    pub fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.splits.train,
            "val" => self.splits.val,
            _ => self.splits.test,
        }
    }

    /// Utterances of one split; the split name is the id prefix.
    pub fn corpus(&self, split: &str) -> Vec<SyntheticUtterance> {
        let cfg = SynthConfig { id_prefix: split.into(), ..self.synth.clone() };
        synth_corpus(&cfg, self.split_size(split), self.seed)
    }

    pub fn pretrain(&self, exec: Exec) -> Result<Pretrained, PipelineError> {
        Ok(pretrain_toy_models(&self.synth, &self.model, &self.pretrain, &self.sampling, self.seed, exec)?)
    }
}

/// Hypothesis records plus the features they were generated from.
#[derive(Clone, Debug)]
pub struct Split {
    pub records: Vec<HypothesisRecord>,
    pub features: Vec<Tensor>,
}

/// n-best lists for `utterances`; feature paths point into `features_dir`.
pub fn hypgen(
    model: &ToyAcoustic,
    utterances: &[SyntheticUtterance],
    sampling: &SamplingConfig,
    seed: u64,
    features_dir: &str,
    exec: Exec,
) -> Result<Split, FusionError> {
    let records = exec.try_map(utterances, |u| {
        let path = format!("{features_dir}/{}.bin", u.id);
        generate_record(model, &u.id, &u.ground_truth, &u.features, &path, sampling, seed)
    })?;
    Ok(Split { records, features: utterances.iter().map(|u| u.features.clone()).collect() })
}

/// Train, validation and test lists from one acoustic model.
#[derive(Clone, Debug)]
pub struct HypothesisSets {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl HypothesisSets {
    pub fn generate(model: &ToyAcoustic, config: &ExperimentConfig, exec: Exec) -> Result<Self, FusionError> {
        let one = |split: &str| hypgen(model, &config.corpus(split), &config.sampling, config.seed, "features", exec);
        Ok(Self { train: one("train")?, val: one("val")?, test: one("test")? })
    }
}

/// A trainable copy of `base` shaped by `model`: base weights are copied by
/// name, adapters freshly initialized from the seed, acoustic branches
/// transplanted from `strong`.
pub fn fusion_model(base: &ToyLm, model: &ModelConfig, strong: &ToyAcoustic, init: AdapterInit, seed: u64) -> Result<ToyLm, LmError> {
    let mut lm = ToyLm::new(model, &mut rng_for(seed, "adapter-init", "prefix"))?;
    let base_tensors: std::collections::HashMap<String, Tensor> = base.named_tensors().into_iter().collect();
    lm.visit_params_mut(&mut |name, p| {
        if p.role == Role::Base {
            if let Some(t) = base_tensors.get(&name) {
                p.set(t.clone());
            }
        }
    });
    lm.attach_acoustic(strong, init, &mut rng_for(seed, "adapter-init", "acoustic"))?;
    Ok(lm)
}

pub struct RunResult {
    pub label: String,
    pub lm: ToyLm,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains one fusion model (optionally ablated) and evaluates it on the
/// test split.
pub fn run(
    label: &str,
    base: &ToyLm,
    strong: &ToyAcoustic,
    sets: &HypothesisSets,
    config: &ExperimentConfig,
    ablation: Option<Ablation>,
    exec: Exec,
) -> Result<RunResult, PipelineError> {
    let mut model = config.model.clone();
    let mut train_cfg = TrainConfig { seed: config.seed, ..config.train.clone() };
    let init = match ablation {
        Some(a) => a.apply(&mut model, &mut train_cfg),
        None => AdapterInit::Bridge,
    };
    let mut lm = fusion_model(base, &model, strong, init, config.seed)?;
    let examples = |s: &Split| -> Result<Vec<Example>, FusionError> {
        prepare_examples(strong, &s.records, &s.features, train_cfg.features, config.seed, exec)
    };
    let (tr, va, te) = (examples(&sets.train)?, examples(&sets.val)?, examples(&sets.test)?);
    let outcome = train(&mut lm, &tr, &va, &train_cfg, exec)?;
    let report = evaluate(&lm, &te, &train_cfg, label, exec)?;
    Ok(RunResult { label: label.into(), lm, outcome, report })
}
