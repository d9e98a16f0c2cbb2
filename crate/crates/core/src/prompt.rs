//! Instruction prompts, loss masks and the masked cross-entropy.

use thiserror::Error;

use crate::lm::line_positions;
use crate::numerics::{Graph, NumericsError, Var};
use crate::tokenizer::{CharTokenizer, BOS, EOS};

const TEMPLATE_V1: &str = include_str!("../assets/prompt_v1.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("no hypotheses to build a prompt from")]
    NoHypotheses,
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("sample has no response tokens")]
    EmptyResponse,
    #[error("hypothesis contains a newline: {0:?}")]
    Multiline(String),
}

pub fn template(template_id: &str) -> Result<&'static str, PromptError> {
    match template_id {
        "v1" => Ok(TEMPLATE_V1),
        other => Err(PromptError::UnknownTemplate(other.into())),
    }
}

/// Fills the template with one hypothesis per line, in the given order.
/// The result ends with the response header.
pub fn build_prompt(hypotheses: &[String], template_id: &str) -> Result<String, PromptError> {
    let t = template(template_id)?;
    if hypotheses.is_empty() {
        return Err(PromptError::NoHypotheses);
    }
    let mut lines = String::new();
    for h in hypotheses {
        if h.contains('\n') {
            return Err(PromptError::Multiline(h.clone()));
        }
        lines.push_str(h);
        lines.push('\n');
    }
    Ok(t.replace("{hypotheses}", &lines))
}

/// A tokenized prompt/response pair ready for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSample {
    /// `BOS, prompt.., response.., EOS`.
    pub token_ids: Vec<usize>,
    /// `[start, end)` of the response tokens inside `token_ids`.
    pub response_span: (usize, usize),
    /// One entry per target (`token_ids[1..]`).
    pub loss_mask: Vec<f64>,
}

impl PromptSample {
    pub fn inputs(&self) -> &[usize] {
        &self.token_ids[..self.token_ids.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.token_ids[1..]
    }

    pub fn positions(&self, newline: usize, max: usize) -> Vec<usize> {
        line_positions(self.inputs(), newline, max)
    }

    /// Prompt tokens only, for generation.
    pub fn prompt_ids(&self) -> &[usize] {
        &self.token_ids[..self.response_span.0]
    }
}

/// 1 on every target inside the response span plus the closing EOS.
pub fn build_loss_mask(token_ids: &[usize], response_span: (usize, usize)) -> Result<Vec<f64>, PromptError> {
    let (start, end) = response_span;
    if end <= start {
        return Err(PromptError::EmptyResponse);
    }
    // target j predicts token j + 1
    Ok((1..token_ids.len()).map(|i| if i >= start && i <= end { 1.0 } else { 0.0 }).collect())
}

pub fn build_sample(tok: &CharTokenizer, prompt: &str, response: &str, masked: bool) -> Result<PromptSample, PromptError> {
    let mut token_ids = vec![BOS];
    token_ids.extend(tok.tokenize(prompt));
    let start = token_ids.len();
    token_ids.extend(tok.tokenize(response));
    let end = token_ids.len();
    token_ids.push(EOS);
    let mut loss_mask = build_loss_mask(&token_ids, (start, end))?;
    if !masked {
        loss_mask.iter_mut().for_each(|m| *m = 1.0);
    }
    Ok(PromptSample { token_ids, response_span: (start, end), loss_mask })
}

/// Prompt with no response, for generation.
pub fn prompt_ids(tok: &CharTokenizer, prompt: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tok.tokenize(prompt));
    ids
}

/// Mean cross-entropy over the positions where `mask` is 1.
pub fn masked_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var, NumericsError> {
    g.cross_entropy(logits, targets, mask)
}
