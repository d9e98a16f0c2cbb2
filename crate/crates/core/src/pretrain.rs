//! Pretraining of the toy stand-ins: acoustic transcribers on synthetic
//! utterances, the language model on transcript text plus instruction-style
//! correction demonstrations built from the weak transcriber's n-best lists.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{AcousticConfig, ToyAcoustic};
use crate::config::ModelConfig;
use crate::exec::Exec;
use crate::fusion::{FusionError, Path};
use crate::hypotheses::{dedupe_rank, sample_hypotheses, SamplingConfig};
use crate::lm::{LmError, ToyLm};
use crate::numerics::{Graph, Tensor};
use crate::optim::{batch_gradient, gather_grads, Adam, AdamConfig};
use crate::params::{ParamSet, Phase};
use crate::prompt::{build_prompt, build_sample, PromptError, PromptSample};
use crate::seed::rng_for;
use crate::synth::{synth_corpus, synth_texts, SynthConfig, SyntheticUtterance};
use crate::tokenizer::{CharTokenizer, BOS, EOS, PAD};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{model} pretraining diverged at step {step} (loss {loss})")]
    Divergent { model: String, step: usize, loss: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Utterances in the acoustic pretraining corpus (disjoint from the
    /// fusion train/test ids).
    pub acoustic_utterances: usize,
    pub acoustic_batch: usize,
    pub acoustic_lr: f64,
    pub weak_steps: usize,
    pub strong_steps: usize,
    pub lm_texts: usize,
    pub lm_demos: usize,
    pub lm_batch: usize,
    pub lm_lr: f64,
    pub lm_steps: usize,
    /// Upper bound on the leading hypotheses shown in a correction
    /// demonstration; each demonstration draws its count uniformly.
    pub demo_hypotheses: usize,
    /// Feature noise of the demonstration corpora, one corpus per level.
    pub demo_noise_sigmas: Vec<f64>,
    /// Share of demonstrations whose list comes from the strong transcriber.
    pub demo_strong_share: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            acoustic_utterances: 2000,
            acoustic_batch: 32,
            acoustic_lr: 3e-3,
            weak_steps: 1000,
            strong_steps: 600,
            lm_texts: 2000,
            lm_demos: 2000,
            lm_batch: 16,
            lm_lr: 3e-3,
            lm_steps: 1800,
            demo_hypotheses: 5,
            demo_noise_sigmas: vec![0.5, 0.25],
            demo_strong_share: 0.5,
        }
    }
}

pub struct Pretrained {
    pub lm: ToyLm,
    pub weak: ToyAcoustic,
    pub strong: ToyAcoustic,
    pub lm_losses: Vec<f64>,
    pub weak_losses: Vec<f64>,
    pub strong_losses: Vec<f64>,
}

fn check(model: &str, step: usize, loss: f64) -> Result<f64, PretrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(PretrainError::Divergent { model: model.into(), step, loss })
    }
}

/// Mean teacher-forced transcription loss of a batch and its gradients.
pub fn acoustic_batch_grads(model: &ToyAcoustic, batch: &[&SyntheticUtterance]) -> Result<(f64, crate::params::GradSet), FusionError> {
    let tok = CharTokenizer::acoustic();
    let cfg = &model.config;
    let seqs: Vec<Vec<usize>> = batch.iter().map(|u| tok.tokenize(&u.ground_truth)).collect();
    let t = seqs.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let mut inputs = Vec::with_capacity(batch.len() * t);
    let mut targets = Vec::with_capacity(batch.len() * t);
    let mut weights = Vec::with_capacity(batch.len() * t);
    for s in &seqs {
        for i in 0..t {
            inputs.push(if i == 0 { BOS } else { s.get(i - 1).copied().unwrap_or(PAD) });
            let target = match i.cmp(&s.len()) {
                std::cmp::Ordering::Less => s[i],
                std::cmp::Ordering::Equal => EOS,
                std::cmp::Ordering::Greater => PAD,
            };
            targets.push(target);
            weights.push(if target == PAD { 0.0 } else { 1.0 });
        }
    }
    let mut data = Vec::with_capacity(batch.len() * cfg.frames * cfg.feat_dim);
    for u in batch {
        data.extend_from_slice(u.features.data());
    }
    let mut g = Graph::new();
    let w = model.bind(&mut g);
    let features = g.constant(Tensor::new(vec![batch.len(), cfg.frames, cfg.feat_dim], data)?);
    let h = model.encode_var(&mut g, &w, features)?;
    let cross = model.cross_kv_vars(&mut g, &w, h)?;
    let logits = model.decode_var(&mut g, &w, &inputs, batch.len(), 0, &cross, None)?;
    let logits = g.reshape(logits, &[batch.len() * t, cfg.vocab_size])?;
    let loss = g.cross_entropy(logits, &targets, &weights)?;
    g.backward(loss)?;
    let mut vars = Vec::new();
    w.visit(&mut |_, v| vars.push(*v));
    Ok((g.value(loss).item(), gather_grads(&g, model, &vars)))
}

/// Trains every base weight of `model` for `steps` mini-batches drawn by
/// reshuffling `corpus` each pass. Returns the per-step losses.
pub fn train_acoustic(
    model: &mut ToyAcoustic,
    corpus: &[SyntheticUtterance],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    label: &str,
) -> Result<Vec<f64>, PretrainError> {
    model.set_phase(Phase::Pretrain);
    let mut adam = Adam::new(AdamConfig::new(lr, 0.0));
    let mut rng = rng_for(seed, "acoustic-order", label);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if order.len() < batch {
            let mut pass: Vec<usize> = (0..corpus.len()).collect();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        let idx: Vec<usize> = order.drain(..batch.min(order.len())).collect();
        let items: Vec<&SyntheticUtterance> = idx.iter().map(|&i| &corpus[i]).collect();
        let (loss, grads) = acoustic_batch_grads(model, &items)?;
        losses.push(check(label, step, loss)?);
        adam.step(model, &grads);
    }
    model.set_phase(Phase::Frozen);
    Ok(losses)
}

/// Language-model pretraining samples: plain transcripts with the loss on
/// every token, then response-masked correction demonstrations whose
/// n-best lists come from `weak` (or, for a share of them, `strong`) on
/// separate synthetic corpora. Demo lists keep the ground truth when it was
/// sampled, so the model learns both to copy and to repair.
pub fn lm_pretraining_samples(
    synth: &SynthConfig,
    config: &PretrainConfig,
    weak: &ToyAcoustic,
    strong: &ToyAcoustic,
    sampling: &SamplingConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<PromptSample>, PretrainError> {
    let tok = CharTokenizer::lm();
    let mut samples = Vec::with_capacity(config.lm_texts + config.lm_demos);
    for text in synth_texts(synth, config.lm_texts, seed, "lm-text") {
        samples.push(build_sample(&tok, "", &text, false)?);
    }
    let mut corpus = Vec::with_capacity(config.lm_demos);
    let levels = config.demo_noise_sigmas.len().max(1);
    for (i, &sigma) in config.demo_noise_sigmas.iter().enumerate() {
        let n = config.lm_demos / levels + usize::from(i < config.lm_demos % levels);
        let demo = SynthConfig { id_prefix: format!("demo{i}"), noise_sigma: sigma, ..synth.clone() };
        corpus.extend(synth_corpus(&demo, n, seed));
    }
    let demos = exec.try_map(&corpus, |u| -> Result<PromptSample, PretrainError> {
        let source = if rng_for(seed, "demo-source", &u.id).gen_bool(config.demo_strong_share.clamp(0.0, 1.0)) { strong } else { weak };
        let samples = sample_hypotheses(source, &u.features, sampling, &mut rng_for(seed, "demo-hypgen", &u.id))?;
        let shown = rng_for(seed, "demo-size", &u.id).gen_range(1..=config.demo_hypotheses.max(1));
        let hyps: Vec<String> = dedupe_rank(&samples, shown).into_iter().map(|h| h.text).collect();
        Ok(build_sample(&tok, &build_prompt(&hyps, "v1")?, &u.ground_truth, true)?)
    })?;
    samples.extend(demos);
    Ok(samples)
}

/// Trains the base weights of `lm` on `samples`; adapters stay untouched.
pub fn train_lm(
    lm: &mut ToyLm,
    samples: &[PromptSample],
    config: &PretrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<f64>, PretrainError> {
    lm.set_phase(Phase::Pretrain);
    let mut adam = Adam::new(AdamConfig::new(config.lm_lr, 0.0));
    let mut rng = rng_for(seed, "lm-order", "");
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.lm_steps);
    for step in 0..config.lm_steps {
        if order.len() < config.lm_batch {
            let mut pass: Vec<usize> = (0..samples.len()).collect();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        let batch: Vec<&PromptSample> = order.drain(..config.lm_batch.min(order.len())).map(|i| &samples[i]).collect();
        let model: &ToyLm = lm;
        let (loss, grads) = batch_gradient(exec, &batch, |s| model.loss_and_grads(s, None, Path::Base))?;
        losses.push(check("lm", step, loss)?);
        adam.step(lm, &grads);
    }
    lm.set_phase(Phase::Frozen);
    Ok(losses)
}

/// Pretrains the language model and both acoustic models, then freezes them.
pub fn pretrain_toy_models(
    synth: &SynthConfig,
    model: &ModelConfig,
    config: &PretrainConfig,
    sampling: &SamplingConfig,
    seed: u64,
    exec: Exec,
) -> Result<Pretrained, PretrainError> {
    let pre = SynthConfig { id_prefix: "pre".into(), ..synth.clone() };
    let corpus = synth_corpus(&pre, config.acoustic_utterances, seed);

    let mut weak = ToyAcoustic::new(&AcousticConfig::weak(synth.feat_dim, synth.frames), &mut rng_for(seed, "init", "weak"));
    let weak_losses = train_acoustic(&mut weak, &corpus, config.weak_steps, config.acoustic_batch, config.acoustic_lr, seed, "weak")?;
    let mut strong = ToyAcoustic::new(&AcousticConfig::strong(synth.feat_dim, synth.frames), &mut rng_for(seed, "init", "strong"));
    let strong_losses =
        train_acoustic(&mut strong, &corpus, config.strong_steps, config.acoustic_batch, config.acoustic_lr, seed, "strong")?;

    let mut lm = ToyLm::new(model, &mut rng_for(seed, "init", "lm"))?;
    let samples = lm_pretraining_samples(synth, config, &weak, &strong, sampling, seed, exec)?;
    let lm_losses = train_lm(&mut lm, &samples, config, seed, exec)?;
    Ok(Pretrained { lm, weak, strong, lm_losses, weak_losses, strong_losses })
}
