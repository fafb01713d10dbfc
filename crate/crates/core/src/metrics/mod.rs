//! Report-generation metrics: BLEU, ROUGE-L, simplified METEOR, multi-label
//! F1 over chest observations, and the GREEN aggregate.

mod bleu;
mod clinical;
mod green;
mod meteor;
mod rouge;

use serde::Serialize;
use thiserror::Error;

pub use bleu::{bleu, BLEU_EPS};
pub use clinical::{
    ce_f1, f1_table_csv, F1Report, ObservationLabels, ObservationScore, Prf, CX5, OBSERVATIONS,
};
pub use green::{green_score, GreenCounts, GreenScore, GreenSummary};
pub use meteor::{meteor_sentence, meteor_simplified};
pub use rouge::{lcs_len, rouge_l, rouge_l_sentence, ROUGE_BETA};

use crate::corpus::text::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
}

/// Lowercased word tokens with punctuation dropped.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

pub(crate) fn check_aligned<A, B>(c: &[A], r: &[B]) -> Result<(), MetricError> {
    if c.len() != r.len() {
        return Err(MetricError::LengthMismatch {
            candidates: c.len(),
            references: r.len(),
        });
    }
    if c.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub n: usize,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce14: Option<F1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce5: Option<F1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub green: Option<GreenSummary>,
}

/// Language metrics over raw text pairs.
pub fn language_metrics(
    candidates: &[String],
    references: &[String],
) -> Result<(usize, [f64; 4], f64, f64), MetricError> {
    check_aligned(candidates, references)?;
    let c: Vec<Vec<String>> = candidates.iter().map(|s| metric_tokens(s)).collect();
    let r: Vec<Vec<String>> = references.iter().map(|s| metric_tokens(s)).collect();
    Ok((
        c.len(),
        bleu(&c, &r, 4)?.try_into().expect("four orders"),
        rouge_l(&c, &r)?,
        meteor_simplified(&c, &r)?,
    ))
}
