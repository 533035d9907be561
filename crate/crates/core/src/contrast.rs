//! With/without-history contrastive examples.
//!
//! For every question we hold the personalized prompt and its history-free
//! counterpart, generate an answer under both, judge both answers, and label
//! the pair: personalization either corrupted a factual answer
//! (`FactualDegraded`), enabled a personalized one
//! (`PersonalizedBeneficial`), or made no difference (`Neutral`).
//! These labeled groups feed the layer scan, the prober, and the steering
//! vector.

use serde::{Deserialize, Serialize};

use crate::backend::{generated_suffix, Backend};
use crate::error::{Error, Result};
use crate::eval::judge::Judge;
use crate::eval::prompts::PromptBuilder;

/// One chat session inside a user's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    /// ISO-8601 style timestamp; compared lexicographically.
    pub timestamp: String,
    /// (speaker, utterance) pairs in order.
    pub turns: Vec<(String, String)>,
}

impl ChatSession {
    /// Flat text rendering used for embedding and prompt context.
    pub fn rendered(&self) -> String {
        self.turns
            .iter()
            .map(|(speaker, text)| format!("{speaker}: {text}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A user's ordered history plus their personalized QA pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub sessions: Vec<ChatSession>,
    pub personalized_qa: QAInstance,
}

impl UserRecord {
    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "user {} has no sessions",
                self.user_id
            )));
        }
        for pair in self.sessions.windows(2) {
            if pair[1].timestamp < pair[0].timestamp {
                return Err(Error::InvalidArgument(format!(
                    "user {} session timestamps decrease at {}",
                    self.user_id, pair[1].session_id
                )));
            }
        }
        self.personalized_qa.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    Personalized,
    Factual,
}

/// One question with its gold answer and owning user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub qa_id: String,
    pub user_id: String,
    pub kind: QaKind,
    pub question: String,
    pub gold_answer: String,
}

impl QAInstance {
    pub fn validate(&self) -> Result<()> {
        if self.gold_answer.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "qa {} has empty gold answer",
                self.qa_id
            )));
        }
        Ok(())
    }
}

/// Entanglement label of a contrastive example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    FactualDegraded,
    PersonalizedBeneficial,
    Neutral,
    /// Judging failed for at least one side; excluded from labeled groups.
    Unjudged,
}

/// Pure labeling rule over the two verdicts and the question kind.
pub fn label_example(verdict_with: bool, verdict_without: bool, kind: QaKind) -> Label {
    match (kind, verdict_with, verdict_without) {
        (QaKind::Factual, false, true) => Label::FactualDegraded,
        (QaKind::Personalized, true, false) => Label::PersonalizedBeneficial,
        _ => Label::Neutral,
    }
}

/// A question scored under both prompt conditions.
///
/// Prompts are carried inline so downstream stages (layer scan, feature
/// extraction, steering-vector construction) replay forwards without
/// re-resolving users or personalization method state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveExample {
    pub qa: QAInstance,
    pub method: String,
    pub prompt_with: String,
    pub prompt_without: String,
    pub answer_with: String,
    pub answer_without: String,
    pub verdict_with: Option<bool>,
    pub verdict_without: Option<bool>,
    pub label: Label,
}

impl ContrastiveExample {
    /// Label consistency with the truth table (or `Unjudged` when a verdict
    /// is missing).
    pub fn check_label(&self) -> Result<()> {
        let expected = match (self.verdict_with, self.verdict_without) {
            (Some(w), Some(wo)) => label_example(w, wo, self.qa.kind),
            _ => Label::Unjudged,
        };
        if expected != self.label {
            return Err(Error::InvalidArgument(format!(
                "example {} label {:?} inconsistent with verdicts",
                self.qa.qa_id, self.label
            )));
        }
        Ok(())
    }
}

pub struct ContrastOptions {
    pub max_new_tokens: usize,
    /// Build fails when more than this fraction of examples end up unjudged.
    pub max_unjudged_frac: f64,
}

impl Default for ContrastOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 500,
            max_unjudged_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastCorpus {
    pub examples: Vec<ContrastiveExample>,
    pub n_unjudged: usize,
}

impl ContrastCorpus {
    pub fn group(&self, label: Label) -> Vec<&ContrastiveExample> {
        self.examples.iter().filter(|e| e.label == label).collect()
    }
}

/// Generate, judge, and label one example per question.
///
/// Examples are processed in qa_id order, which keeps scripted
/// sequence-mock judges deterministic. Judge failures mark the example
/// unjudged rather than aborting; the build errors only past the configured
/// unjudged fraction.
pub fn build_contrast_corpus(
    records: &[UserRecord],
    qas: &[QAInstance],
    builder: &PromptBuilder,
    backend: &dyn Backend,
    judge: &Judge,
    opts: &ContrastOptions,
) -> Result<ContrastCorpus> {
    let by_user: std::collections::HashMap<&str, &UserRecord> = records
        .iter()
        .map(|r| (r.user_id.as_str(), r))
        .collect();

    let mut ordered: Vec<&QAInstance> = qas.iter().collect();
    ordered.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));

    let mut examples = Vec::with_capacity(ordered.len());
    let mut n_unjudged = 0usize;
    for qa in ordered {
        let user = by_user
            .get(qa.user_id.as_str())
            .ok_or_else(|| Error::UnknownUser(qa.user_id.clone()))?;
        let pair = builder.build(qa, user)?;

        let with_tokens = backend.encode(&pair.with_history);
        let without_tokens = backend.encode(&pair.without_history);
        let gen_with = backend.generate(&with_tokens, None, opts.max_new_tokens)?;
        let gen_without = backend.generate(&without_tokens, None, opts.max_new_tokens)?;
        let answer_with = backend.decode(&generated_suffix(&gen_with, with_tokens.len()));
        let answer_without = backend.decode(&generated_suffix(&gen_without, without_tokens.len()));

        let verdict_with = judge
            .judge(&qa.question, &qa.gold_answer, &answer_with)
            .correct;
        let verdict_without = judge
            .judge(&qa.question, &qa.gold_answer, &answer_without)
            .correct;

        let label = match (verdict_with, verdict_without) {
            (Some(w), Some(wo)) => label_example(w, wo, qa.kind),
            _ => {
                n_unjudged += 1;
                Label::Unjudged
            }
        };

        examples.push(ContrastiveExample {
            qa: qa.clone(),
            method: builder.method_id().to_string(),
            prompt_with: pair.with_history,
            prompt_without: pair.without_history,
            answer_with,
            answer_without,
            verdict_with,
            verdict_without,
            label,
        });
    }

    let total = examples.len().max(1);
    if n_unjudged as f64 / total as f64 > opts.max_unjudged_frac {
        return Err(Error::InvalidArgument(format!(
            "{n_unjudged} of {} examples unjudged, above the {:.0}% integrity floor",
            examples.len(),
            opts.max_unjudged_frac * 100.0
        )));
    }

    Ok(ContrastCorpus {
        examples,
        n_unjudged,
    })
}
