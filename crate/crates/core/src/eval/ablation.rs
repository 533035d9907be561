//! History-length ablation for retrieval-augmented personalization.
//!
//! For each ratio r on the grid, the retrieval context keeps the top
//! ceil(r * K) of the user's K sessions by retrieval score. r = 0 emits the
//! history-free prompt; r = 1 emits the full personalized prompt. A
//! chronological truncation mode exists behind a flag.

use serde::{Deserialize, Serialize};

use crate::backend::{generated_suffix, Backend};
use crate::bench::embed::Embedder;
use crate::bench::BenchmarkRecord;
use crate::contrast::{ChatSession, QAInstance, UserRecord};
use crate::error::{Error, Result};
use crate::eval::judge::Judge;
use crate::eval::prompts::{
    rag_prompt_for_sessions, rank_sessions_by_question, without_history_prompt,
};
use crate::eval::score::{score, ScoreReport};
use crate::steer::{steered_decode, SteerOptions, SteeringArtifact};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// Keep the highest-scoring retrieved sessions (the ablation default).
    #[default]
    TopScore,
    /// Keep the chronologically earliest sessions instead.
    Chronological,
}

/// The ablation prompt at one ratio. Shares the RAG renderer with the full
/// builder, so r = 1 is byte-identical to the full personalized prompt and
/// r = 0 to the history-free prompt.
pub fn rag_prompt_at_ratio(
    qa: &QAInstance,
    user: &UserRecord,
    embedder: &dyn Embedder,
    current_date: &str,
    ratio: f64,
    mode: TruncationMode,
) -> Result<String> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "history ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let total = user.sessions.len();
    let keep = (ratio * total as f64).ceil() as usize;
    if keep == 0 {
        return Ok(without_history_prompt(&qa.question));
    }
    let kept: Vec<&ChatSession> = match mode {
        TruncationMode::TopScore => rank_sessions_by_question(&qa.question, user, embedder)?
            .into_iter()
            .take(keep)
            .collect(),
        TruncationMode::Chronological => user.sessions.iter().take(keep).collect(),
    };
    Ok(rag_prompt_for_sessions(&qa.question, &kept, current_date))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPoint {
    pub ratio: f64,
    pub report: ScoreReport,
    pub total_context_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub points: Vec<AblationPoint>,
    pub mode: TruncationMode,
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("ratio,p_score,f_score,overall,total_context_tokens\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.ratio,
                fmt(p.report.p_score),
                fmt(p.report.f_score),
                fmt(p.report.overall),
                p.total_context_tokens
            ));
        }
        out
    }
}

pub struct AblationOptions {
    pub current_date: String,
    pub mode: TruncationMode,
    pub max_new_tokens: usize,
    pub steer: SteerOptions,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            current_date: "2025-01-01".into(),
            mode: TruncationMode::default(),
            max_new_tokens: 500,
            steer: SteerOptions::default(),
        }
    }
}

/// Evaluate every benchmark question at each ratio on the grid.
pub fn history_length_ablation(
    grid: &[f64],
    records: &[BenchmarkRecord],
    users: &[UserRecord],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    judge: &Judge,
    artifact: Option<&SteeringArtifact>,
    opts: &AblationOptions,
) -> Result<AblationReport> {
    let by_user: std::collections::HashMap<&str, &UserRecord> =
        users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    let mut qas: Vec<&QAInstance> = Vec::new();
    for r in records {
        qas.push(&r.personalized_qa);
        qas.push(&r.factual_qa);
    }
    qas.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));

    let mut points = Vec::with_capacity(grid.len());
    for &ratio in grid {
        let mut verdicts = Vec::with_capacity(qas.len());
        let mut total_tokens = 0usize;
        for qa in &qas {
            let user = by_user
                .get(qa.user_id.as_str())
                .ok_or_else(|| Error::UnknownUser(qa.user_id.clone()))?;
            let prompt = rag_prompt_at_ratio(
                qa,
                user,
                embedder,
                &opts.current_date,
                ratio,
                opts.mode,
            )?;
            let tokens = backend.encode(&prompt);
            total_tokens += tokens.len();
            let response = match artifact {
                Some(artifact) => {
                    let without = without_history_prompt(&qa.question);
                    let mut steer_opts = opts.steer.clone();
                    steer_opts.max_new_tokens = opts.max_new_tokens;
                    steered_decode(&prompt, &without, artifact, backend, &steer_opts)?.text
                }
                None => {
                    let full = backend.generate(&tokens, None, opts.max_new_tokens)?;
                    backend.decode(&generated_suffix(&full, tokens.len()))
                }
            };
            let verdict = judge.judge(&qa.question, &qa.gold_answer, &response);
            verdicts.push((qa.qa_id.clone(), verdict.correct));
        }
        let owned: Vec<QAInstance> = qas.iter().map(|q| (*q).clone()).collect();
        points.push(AblationPoint {
            ratio,
            report: score(&verdicts, &owned)?,
            total_context_tokens: total_tokens,
        });
    }
    Ok(AblationReport {
        points,
        mode: opts.mode,
    })
}
