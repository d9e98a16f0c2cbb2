//! Word error rate and the derived report metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("reference has no words")]
    EmptyReference,
    #[error("no hypotheses to score")]
    NoHypotheses,
    #[error("{predictions} predictions for {records} records")]
    Length { predictions: usize, records: usize },
}

/// Lowercase, drop `. - ? '`, collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    let kept: String = s.chars().filter(|c| !matches!(c, '.' | '-' | '?' | '\'')).flat_map(char::to_lowercase).collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word-level Levenshtein distance with unit costs.
pub fn word_edits(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()]
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Edits divided by reference word count; may exceed 1.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, MetricError> {
    let n = word_count(reference);
    if n == 0 {
        return Err(MetricError::EmptyReference);
    }
    Ok(word_edits(reference, hypothesis) as f64 / n as f64)
}

/// Lowest WER of any hypothesis in the list.
pub fn oracle_wer(reference: &str, hypotheses: &[String]) -> Result<f64, MetricError> {
    let mut best = f64::INFINITY;
    for h in hypotheses {
        best = best.min(wer(reference, h)?);
    }
    if best.is_infinite() {
        return Err(MetricError::NoHypotheses);
    }
    Ok(best)
}

/// `(oracle − wer) / oracle × 100`, both given in percent.
pub fn werr(oracle_avg: f64, wer_avg: f64) -> f64 {
    (oracle_avg - wer_avg) / oracle_avg * 100.0
}

/// Percentage of predictions equal to their reference.
pub fn gtmr(references: &[String], predictions: &[String], normalized: bool) -> Result<f64, MetricError> {
    if references.len() != predictions.len() {
        return Err(MetricError::Length { predictions: predictions.len(), records: references.len() });
    }
    if references.is_empty() {
        return Ok(0.0);
    }
    let hits = references
        .iter()
        .zip(predictions)
        .filter(|(r, p)| if normalized { normalize_text(r) == normalize_text(p) } else { r == p })
        .count();
    Ok(100.0 * hits as f64 / references.len() as f64)
}

/// How per-utterance errors are combined into one percentage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Total edits over total reference words.
    #[default]
    Corpus,
    /// Mean of per-utterance WER.
    Utterance,
}

/// Aggregate WER in percent over `(reference, hypothesis)` pairs.
pub fn aggregate_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>, pooling: Pooling) -> Result<f64, MetricError> {
    let (mut edits, mut words, mut sum, mut n) = (0usize, 0usize, 0.0, 0usize);
    for (r, h) in pairs {
        let w = word_count(r);
        if w == 0 {
            return Err(MetricError::EmptyReference);
        }
        let e = word_edits(r, h);
        edits += e;
        words += w;
        sum += e as f64 / w as f64;
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(100.0
        * match pooling {
            Pooling::Corpus => edits as f64 / words as f64,
            Pooling::Utterance => sum / n as f64,
        })
}

/// Per-utterance oracle choice: the hypothesis with the fewest edits
/// (first one on ties).
pub fn oracle_choice<'a>(reference: &str, hypotheses: &'a [String]) -> Option<&'a str> {
    hypotheses.iter().min_by_key(|h| word_edits(reference, h)).map(String::as_str)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDetail {
    pub id: String,
    pub ground_truth: String,
    pub prediction: String,
    pub one_best: String,
    pub wer: f64,
    pub oracle_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub pooling: Pooling,
    pub utterances: usize,
    pub wer_raw: f64,
    pub wer_normalized: f64,
    pub one_best_wer: f64,
    pub oracle_wer: f64,
    pub werr: f64,
    pub gtmr_raw: f64,
    pub gtmr_normalized: f64,
    pub details: Vec<UtteranceDetail>,
}

/// One evaluated utterance: reference, n-best list, model output.
pub struct Scored<'a> {
    pub id: &'a str,
    pub ground_truth: &'a str,
    /// The n-best list the model saw (ground truth removed).
    pub hypotheses: &'a [String],
    /// Top hypothesis of the acoustic model before ground-truth removal.
    pub one_best: &'a str,
    pub prediction: &'a str,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl EvalReport {
    pub fn build(label: &str, items: &[Scored<'_>], pooling: Pooling) -> Result<Self, MetricError> {
        let norm = |s: &str| normalize_text(s);
        let mut details = Vec::with_capacity(items.len());
        for it in items {
            details.push(UtteranceDetail {
                id: it.id.into(),
                ground_truth: it.ground_truth.into(),
                prediction: it.prediction.into(),
                one_best: it.one_best.into(),
                wer: wer(it.ground_truth, it.prediction)?,
                oracle_wer: oracle_wer(it.ground_truth, it.hypotheses)?,
            });
        }
        let wer_raw = aggregate_wer(items.iter().map(|i| (i.ground_truth, i.prediction)), pooling)?;
        let normed: Vec<(String, String)> = items.iter().map(|i| (norm(i.ground_truth), norm(i.prediction))).collect();
        let wer_normalized = aggregate_wer(normed.iter().map(|(r, p)| (r.as_str(), p.as_str())), pooling)?;
        let one_best_wer = aggregate_wer(details.iter().map(|d| (d.ground_truth.as_str(), d.one_best.as_str())), pooling)?;
        let oracle_wer =
            aggregate_wer(items.iter().map(|i| (i.ground_truth, oracle_choice(i.ground_truth, i.hypotheses).unwrap_or(""))), pooling)?;
        let refs: Vec<String> = items.iter().map(|i| i.ground_truth.to_string()).collect();
        let preds: Vec<String> = items.iter().map(|i| i.prediction.to_string()).collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.into(),
            pooling,
            utterances: items.len(),
            wer_raw,
            wer_normalized,
            one_best_wer,
            oracle_wer,
            werr: if oracle_wer > 0.0 { werr(oracle_wer, wer_raw) } else { 0.0 },
            gtmr_raw: gtmr(&refs, &preds, false)?,
            gtmr_normalized: gtmr(&refs, &preds, true)?,
            details,
        })
    }

    /// Human-readable one-block summary.
    pub fn table(&self) -> String {
        format!(
            "{:<16} n={:<5} wer={:>6.2} wer_norm={:>6.2} 1best={:>6.2} oracle={:>6.2} werr={:>7.2} gtmr={:>6.2}/{:>6.2}",
            self.label,
            self.utterances,
            self.wer_raw,
            self.wer_normalized,
            self.one_best_wer,
            self.oracle_wer,
            self.werr,
            self.gtmr_raw,
            self.gtmr_normalized
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum edit-script cost by exhaustive recursion over the operation
    /// at the front of both sequences.
    fn brute(r: &[&str], h: &[&str]) -> usize {
        match (r, h) {
            ([], _) => h.len(),
            (_, []) => r.len(),
            _ => {
                let keep = brute(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
                let del = brute(&r[1..], h) + 1;
                let ins = brute(r, &h[1..]) + 1;
                keep.min(del).min(ins)
            }
        }
    }

    #[test]
    fn dp_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let words = ["a", "b", "c", "d"];
        for _ in 0..200 {
            let r: Vec<&str> = (0..rng.gen_range(0..=5)).map(|_| words[rng.gen_range(0..4)]).collect();
            let h: Vec<&str> = (0..rng.gen_range(0..=5)).map(|_| words[rng.gen_range(0..4)]).collect();
            assert_eq!(word_edits(&r.join(" "), &h.join(" ")), brute(&r, &h));
        }
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert!((wer("the cat sat", "the cat").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer("a b", "c d e").unwrap(), 1.5);
        assert_eq!(wer("", "a"), Err(MetricError::EmptyReference));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("I'd like ATIS."), "id like atis");
        assert_eq!(normalize_text("id like atis"), "id like atis");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  a -  b?"), "a b");
    }

    #[test]
    fn oracle_properties() {
        let hyps: Vec<String> = ["a x c", "a b c", "q"].iter().map(|s| s.to_string()).collect();
        assert_eq!(oracle_wer("a b c", &hyps).unwrap(), 0.0);
        assert_eq!(oracle_wer("a b c", &hyps[..1]).unwrap(), wer("a b c", "a x c").unwrap());
        let mut rev = hyps.clone();
        rev.reverse();
        assert_eq!(oracle_wer("a b d", &hyps).unwrap(), oracle_wer("a b d", &rev).unwrap());
        assert_eq!(oracle_wer("a", &[]), Err(MetricError::NoHypotheses));
    }

    #[test]
    fn werr_matches_reference_rows() {
        for (wer_avg, expected) in [(15.03, 30.52), (13.48, 37.66), (14.144, 34.62), (15.39, 28.83), (14.45, 33.21)] {
            assert!((werr(21.64, wer_avg) - expected).abs() < 0.1, "{wer_avg}");
        }
        assert_eq!(werr(21.64, 21.64), 0.0);
    }

    #[test]
    fn gtmr_bounds() {
        let r: Vec<String> = vec!["I'd go".into(), "b".into()];
        assert_eq!(gtmr(&r, &r, false).unwrap(), 100.0);
        assert_eq!(gtmr(&r, &["x".into(), "y".into()], false).unwrap(), 0.0);
        let p: Vec<String> = vec!["id go".into(), "c".into()];
        assert_eq!(gtmr(&r, &p, false).unwrap(), 0.0);
        assert_eq!(gtmr(&r, &p, true).unwrap(), 50.0);
    }

    #[test]
    fn report_pools_edits() {
        let h1: Vec<String> = vec!["a b".into(), "a c".into()];
        let h2: Vec<String> = vec!["x y z w".into()];
        let items = [
            Scored { id: "1", ground_truth: "a c", hypotheses: &h1, one_best: "a b", prediction: "a c" },
            Scored { id: "2", ground_truth: "x y z", hypotheses: &h2, one_best: "x y z w", prediction: "x y z" },
        ];
        let r = EvalReport::build("t", &items, Pooling::Corpus).unwrap();
        assert_eq!(r.wer_raw, 0.0);
        assert!((r.one_best_wer - 40.0).abs() < 1e-12);
        assert!((r.oracle_wer - 20.0).abs() < 1e-12);
        assert_eq!(r.gtmr_raw, 100.0);
        let u = EvalReport::build("t", &items, Pooling::Utterance).unwrap();
        assert!((u.one_best_wer - 100.0 * (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
