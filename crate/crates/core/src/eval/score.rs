//! P-Score / F-Score / Overall aggregation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::contrast::{QAInstance, QaKind};
use crate::error::{Error, Result};

/// One judged question in a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub qa_id: String,
    pub kind: QaKind,
    /// `None` means unjudged; counted incorrect, tallied separately.
    pub correct: Option<bool>,
}

/// Accuracy percentages over the two question kinds.
///
/// A score is absent when its kind has zero questions; `overall` is the
/// arithmetic mean of the two sub-scores and is absent when either is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub p_score: Option<f64>,
    pub f_score: Option<f64>,
    pub overall: Option<f64>,
    pub n_personalized: usize,
    pub n_factual: usize,
    pub n_unjudged: usize,
    pub per_question: Vec<ScoreRow>,
}

/// Join verdicts with their questions and aggregate.
///
/// Verdicts are `(qa_id, correct)`; every id must resolve to a question.
pub fn score(verdicts: &[(String, Option<bool>)], qas: &[QAInstance]) -> Result<ScoreReport> {
    let by_id: HashMap<&str, &QAInstance> = qas.iter().map(|q| (q.qa_id.as_str(), q)).collect();
    let mut rows = Vec::with_capacity(verdicts.len());
    for (qa_id, correct) in verdicts {
        let qa = by_id
            .get(qa_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("verdict for unknown qa {qa_id}")))?;
        rows.push(ScoreRow {
            qa_id: qa_id.clone(),
            kind: qa.kind,
            correct: *correct,
        });
    }
    // Deterministic report order regardless of input order.
    rows.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    Ok(score_rows(rows))
}

pub fn score_rows(rows: Vec<ScoreRow>) -> ScoreReport {
    let mut n_p = 0usize;
    let mut n_f = 0usize;
    let mut correct_p = 0usize;
    let mut correct_f = 0usize;
    let mut n_unjudged = 0usize;
    for row in &rows {
        let hit = match row.correct {
            Some(c) => c,
            None => {
                n_unjudged += 1;
                false
            }
        };
        match row.kind {
            QaKind::Personalized => {
                n_p += 1;
                correct_p += usize::from(hit);
            }
            QaKind::Factual => {
                n_f += 1;
                correct_f += usize::from(hit);
            }
        }
    }
    let pct = |hits: usize, n: usize| {
        if n == 0 {
            None
        } else {
            Some(100.0 * hits as f64 / n as f64)
        }
    };
    let p_score = pct(correct_p, n_p);
    let f_score = pct(correct_f, n_f);
    let overall = match (p_score, f_score) {
        (Some(p), Some(f)) => Some((p + f) / 2.0),
        _ => None,
    };
    ScoreReport {
        p_score,
        f_score,
        overall,
        n_personalized: n_p,
        n_factual: n_f,
        n_unjudged,
        per_question: rows,
    }
}
