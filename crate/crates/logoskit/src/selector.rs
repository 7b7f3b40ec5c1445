//! Multi-source decoding orchestration and confidence-based answer
//! selection.
//!
//! Each OCR source supplies its own detections, fused vectors, and copy
//! positions; the decoder produces one independent answer per source. A
//! candidate's confidence is the product of its stepwise emitted-token
//! probabilities, kept in the log domain; the answer with the highest score
//! wins, with ties broken by a configured source priority order.

use serde::Serialize;

use crate::corpus::{Dataset, QAItem};
use crate::metrics::Prediction;
use crate::model::{DecodedAnswer, ItemView, Model};
use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// One OCR source's decoded answer with its log-confidence.
#[derive(Debug, Clone)]
pub struct SourceAnswer {
    pub source_id: String,
    pub answer: DecodedAnswer,
    pub log_score: f64,
}

/// Log-domain product of stepwise probabilities. Every probability must
/// lie in (0, 1]; appending any factor below one strictly lowers the score.
pub fn answer_confidence(step_probs: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &p in step_probs {
        if p <= 0.0 || p > 1.0 {
            return Err(Error::Contract(format!(
                "step probability {p} outside (0, 1]"
            )));
        }
        total += p.ln();
    }
    Ok(total)
}

fn score_answer(answer: &DecodedAnswer) -> Result<f64> {
    if answer.tokens.is_empty() {
        // An empty answer is scored by the <end> emission that produced it
        // so every candidate stays comparable.
        let p = answer.end_prob.ok_or_else(|| {
            Error::Contract("empty answer without a recorded <end> probability".into())
        })?;
        answer_confidence(&[p])
    } else {
        answer_confidence(&answer.step_probs)
    }
}

/// Highest log-score wins; on exact ties the candidate whose source
/// appears first in `priority` does. Sources absent from the priority list
/// rank after all listed ones, in candidate order.
pub fn select_source<'a>(
    candidates: &'a [SourceAnswer],
    priority: &[String],
) -> Result<&'a SourceAnswer> {
    if candidates.is_empty() {
        return Err(Error::Contract("select_source needs a candidate".into()));
    }
    let rank = |c: &SourceAnswer| {
        priority
            .iter()
            .position(|s| *s == c.source_id)
            .unwrap_or(priority.len())
    };
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        if c.log_score > best.log_score
            || (c.log_score == best.log_score && rank(c) < rank(best))
        {
            best = c;
        }
    }
    Ok(best)
}

/// The full multi-source record for one item.
#[derive(Debug, Clone)]
pub struct PredictionAudit {
    pub question_id: String,
    pub selected: usize,
    pub candidates: Vec<SourceAnswer>,
}

impl PredictionAudit {
    pub fn selected_answer(&self) -> &SourceAnswer {
        &self.candidates[self.selected]
    }

    pub fn to_prediction(&self) -> Prediction {
        Prediction {
            question_id: self.question_id.clone(),
            answer: self.selected_answer().answer.surface(),
        }
    }
}

#[derive(Serialize)]
struct CandidateOut<'a> {
    source: &'a str,
    answer: String,
    log_score: f64,
}

impl PredictionAudit {
    /// One canonical JSONL record:
    /// `{"question_id","answer","selected_source","candidates":[...]}`.
    pub fn to_jsonl(&self) -> String {
        let sel = self.selected_answer();
        let candidates: Vec<CandidateOut> = self
            .candidates
            .iter()
            .map(|c| CandidateOut {
                source: &c.source_id,
                answer: c.answer.surface(),
                log_score: round6(c.log_score),
            })
            .collect();
        format!(
            r#"{{"question_id":{},"answer":{},"selected_source":{},"candidates":{}}}"#,
            serde_json::to_string(&self.question_id).expect("infallible"),
            serde_json::to_string(&sel.answer.surface()).expect("infallible"),
            serde_json::to_string(&sel.source_id).expect("infallible"),
            serde_json::to_string(&candidates).expect("infallible"),
        )
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Decode one item independently per source, score each answer, and pick
/// the winner.
pub fn predict_with_selection(
    model: &Model,
    dataset: &Dataset,
    item: &QAItem,
    sources: &[String],
    epsilon: f64,
    priority: &[String],
) -> Result<PredictionAudit> {
    if sources.is_empty() {
        return Err(Error::Contract("need at least one OCR source".into()));
    }
    let mut candidates = Vec::with_capacity(sources.len());
    for source in sources {
        let view = ItemView::build(dataset, item, source, epsilon, &model.cfg)?;
        let ctx = model.encode_item(&view)?;
        let answer = model.decode_greedy(&ctx)?;
        let log_score = score_answer(&answer)?;
        candidates.push(SourceAnswer {
            source_id: source.clone(),
            answer,
            log_score,
        });
    }
    let selected_id = select_source(&candidates, priority)?.source_id.clone();
    let selected = candidates
        .iter()
        .position(|c| c.source_id == selected_id)
        .expect("selected candidate comes from the list");
    Ok(PredictionAudit {
        question_id: item.question_id.clone(),
        selected,
        candidates,
    })
}

/// Predict every item of a dataset. Items may be processed in parallel;
/// results keep dataset order, so output bytes are independent of the
/// thread count.
pub fn predict_dataset(
    model: &Model,
    dataset: &Dataset,
    epsilon: f64,
    priority: &[String],
) -> Result<Vec<PredictionAudit>> {
    let sources = dataset.source_ids();
    let run = |item: &QAItem| {
        predict_with_selection(model, dataset, item, &sources, epsilon, priority)
    };
    #[cfg(feature = "parallel")]
    let out: Result<Vec<_>> = dataset.items.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let out: Result<Vec<_>> = dataset.items.iter().map(run).collect();
    out
}
