//! N-best hypothesis generation: top-k temperature sampling from the
//! acoustic model, deduplication, ranking and ground-truth removal.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::ToyAcoustic;
use crate::fusion::FusionError;
use crate::numerics::Tensor;
use crate::seed::rng_for;
use crate::tokenizer::{CharTokenizer, BOS, EOS, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub text: String,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: String,
    pub ground_truth: String,
    /// Relative to the manifest's directory.
    pub features_path: String,
    pub hypotheses: Vec<ScoredHypothesis>,
    /// Best-scoring hypothesis before ground-truth removal.
    #[serde(default)]
    pub one_best: String,
    /// Set when removing the ground truth emptied the list; the record then
    /// keeps its original list and is used for evaluation only.
    #[serde(default)]
    pub train_excluded: bool,
}

impl HypothesisRecord {
    pub fn texts(&self) -> Vec<String> {
        self.hypotheses.iter().map(|h| h.text.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k: usize,
    pub count: usize,
    pub temp_range: (f64, f64),
    pub n_select: usize,
    /// Rank by mean instead of summed token log-probability.
    pub length_normalize: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { k: 200, count: 40, temp_range: (0.7, 0.8), n_select: 15, length_normalize: false }
    }
}

/// Probabilities of `logits / temperature` restricted to the `k` largest
/// logits and renormalized. Ties at the cut keep the lower index.
pub fn top_k_probs(logits: &[f64], k: usize, temperature: f64) -> Vec<f64> {
    let k = k.clamp(1, logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let kept = &order[..k];
    let max = logits[kept[0]] / temperature;
    let mut probs = vec![0.0; logits.len()];
    let mut z = 0.0;
    for &i in kept {
        let e = (logits[i] / temperature - max).exp();
        probs[i] = e;
        z += e;
    }
    probs.iter_mut().for_each(|p| *p /= z);
    probs
}

/// Draws an index from a categorical distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}

/// `count` sequences sampled autoregressively, each with its own
/// temperature drawn from `temp_range`. Scores are the model's untempered
/// log-probabilities of the realized tokens, EOS included. PAD, UNK and BOS
/// are never emitted.
pub fn sample_hypotheses(
    model: &ToyAcoustic,
    features: &Tensor,
    config: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Vec<ScoredHypothesis>, FusionError> {
    let vocab = model.config.vocab_size;
    let k = if config.k > vocab {
        log::warn!("top-k {} exceeds vocabulary {vocab}; clamping", config.k);
        vocab
    } else {
        config.k
    };
    let b = config.count;
    let (lo, hi) = config.temp_range;
    let temps: Vec<f64> = (0..b).map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect();
    let mut session = model.session(features, b)?;
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut scores = vec![0.0; b];
    let mut done = vec![false; b];
    let mut feed = vec![BOS; b];
    while session.step_index() < session.max_tokens() - 1 && done.iter().any(|d| !d) {
        let logits = session.step(&feed)?;
        for i in 0..b {
            if done[i] {
                continue;
            }
            let mut row = logits.data()[i * vocab..(i + 1) * vocab].to_vec();
            for special in [PAD, UNK, BOS] {
                row[special] = f64::NEG_INFINITY;
            }
            let next = sample_categorical(&top_k_probs(&row, k, temps[i]), rng);
            scores[i] += log_softmax_at(&row, next);
            if next == EOS {
                done[i] = true;
            } else {
                tokens[i].push(next);
            }
            feed[i] = next;
        }
    }
    let tok = CharTokenizer::acoustic();
    Ok(tokens
        .iter()
        .zip(scores)
        .map(|(t, s)| {
            let log_prob = if config.length_normalize { s / (t.len() + 1) as f64 } else { s };
            ScoredHypothesis { text: tok.detokenize(t), log_prob }
        })
        .collect())
}

/// Exact-string dedup keeping each string's best score, sorted by
/// descending score then text, truncated to `n_select`.
pub fn dedupe_rank(samples: &[ScoredHypothesis], n_select: usize) -> Vec<ScoredHypothesis> {
    let mut best: HashMap<&str, f64> = HashMap::new();
    for s in samples {
        let e = best.entry(&s.text).or_insert(f64::NEG_INFINITY);
        *e = e.max(s.log_prob);
    }
    let mut out: Vec<ScoredHypothesis> = best.into_iter().map(|(t, l)| ScoredHypothesis { text: t.to_string(), log_prob: l }).collect();
    out.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.text.cmp(&b.text)));
    out.truncate(n_select);
    out
}

/// Removes hypotheses equal to the ground truth. When nothing is left the
/// record keeps its list and is marked as excluded from training.
pub fn strip_ground_truth(mut record: HypothesisRecord) -> HypothesisRecord {
    let kept: Vec<ScoredHypothesis> = record.hypotheses.iter().filter(|h| h.text != record.ground_truth).cloned().collect();
    if kept.is_empty() && !record.hypotheses.is_empty() {
        log::warn!("{}: every hypothesis equals the ground truth; excluded from training", record.id);
        record.train_excluded = true;
    } else {
        record.hypotheses = kept;
    }
    record
}

/// Full per-utterance pipeline: sample, rank, strip. The random stream is
/// keyed by `(seed, id)`.
pub fn generate_record(
    model: &ToyAcoustic,
    id: &str,
    ground_truth: &str,
    features: &Tensor,
    features_path: &str,
    config: &SamplingConfig,
    seed: u64,
) -> Result<HypothesisRecord, FusionError> {
    let mut rng = rng_for(seed, "hypgen", id);
    let samples = sample_hypotheses(model, features, config, &mut rng)?;
    let hypotheses = dedupe_rank(&samples, config.n_select);
    let one_best = hypotheses.first().map(|h| h.text.clone()).unwrap_or_default();
    Ok(strip_ground_truth(HypothesisRecord {
        id: id.into(),
        ground_truth: ground_truth.into(),
        features_path: features_path.into(),
        hypotheses,
        one_best,
        train_excluded: false,
    }))
}
