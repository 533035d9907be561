//! Evaluation harness: baseline prompt builders, LLM-as-judge scoring,
//! metric aggregation, the history-length ablation, and the
//! representation-entanglement analysis.

pub mod ablation;
pub mod cluster;
pub mod entangle;
pub mod judge;
pub mod prompts;
pub mod score;
pub mod stats;

use serde::{Deserialize, Serialize};

use crate::backend::{generated_suffix, Backend};
use crate::bench::BenchmarkRecord;
use crate::contrast::{QAInstance, UserRecord};
use crate::error::{Error, Result};
use crate::steer::{steered_generate, SteerOptions, SteeringArtifact};

use judge::Judge;
use prompts::PromptBuilder;
use score::{score, ScoreReport};

/// One evaluated benchmark question with its generated response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub qa_id: String,
    pub response: String,
    pub correct: Option<bool>,
    pub p_hat: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub method: String,
    pub steered: bool,
    pub report: ScoreReport,
    pub rows: Vec<EvalRow>,
}

pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub steer: SteerOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 500,
            steer: SteerOptions::default(),
        }
    }
}

/// Evaluate both questions of every benchmark record under one
/// personalization method, optionally wrapped with steering. Questions are
/// processed in qa_id order so scripted judges stay deterministic.
pub fn run_eval(
    records: &[BenchmarkRecord],
    users: &[UserRecord],
    builder: &PromptBuilder,
    backend: &dyn Backend,
    judge: &Judge,
    artifact: Option<&SteeringArtifact>,
    opts: &EvalOptions,
) -> Result<EvalRun> {
    let by_user: std::collections::HashMap<&str, &UserRecord> =
        users.iter().map(|u| (u.user_id.as_str(), u)).collect();

    let mut qas: Vec<&QAInstance> = Vec::new();
    for record in records {
        record.validate()?;
        qas.push(&record.personalized_qa);
        qas.push(&record.factual_qa);
    }
    qas.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));

    let mut rows = Vec::with_capacity(qas.len());
    let mut verdicts = Vec::with_capacity(qas.len());
    for qa in &qas {
        let user = by_user
            .get(qa.user_id.as_str())
            .ok_or_else(|| Error::UnknownUser(qa.user_id.clone()))?;
        let (response, p_hat) = match artifact {
            Some(artifact) => {
                let mut steer_opts = opts.steer.clone();
                steer_opts.max_new_tokens = opts.max_new_tokens;
                let out = steered_generate(qa, user, builder, artifact, backend, &steer_opts)?;
                (out.text, Some(out.p_hat))
            }
            None => {
                let pair = builder.build(qa, user)?;
                let tokens = backend.encode(&pair.with_history);
                let full = backend.generate(&tokens, None, opts.max_new_tokens)?;
                (backend.decode(&generated_suffix(&full, tokens.len())), None)
            }
        };
        let verdict = judge.judge(&qa.question, &qa.gold_answer, &response);
        verdicts.push((qa.qa_id.clone(), verdict.correct));
        rows.push(EvalRow {
            qa_id: qa.qa_id.clone(),
            response,
            correct: verdict.correct,
            p_hat,
        });
    }

    let owned: Vec<QAInstance> = qas.iter().map(|q| (*q).clone()).collect();
    Ok(EvalRun {
        method: builder.method_id().to_string(),
        steered: artifact.is_some(),
        report: score(&verdicts, &owned)?,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Hyperparameter grid search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub gamma: f64,
    pub tau: f64,
    pub overall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_gamma: f64,
    pub best_tau: f64,
    pub best_overall: f64,
    pub points: Vec<GridPoint>,
}

impl GridSearchResult {
    pub fn csv(&self) -> String {
        let mut out = String::from("gamma,tau,overall\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{}\n",
                p.gamma,
                p.tau,
                p.overall.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

/// Inclusive arithmetic grid, rounded to 6 decimals to keep cell values
/// exact across accumulation order.
pub fn float_grid(min: f64, max: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let v = ((min + k as f64 * step) * 1e6).round() / 1e6;
        if v > max + 1e-9 {
            break;
        }
        out.push(v);
        k += 1;
    }
    out
}

/// Sweep (gamma, tau) cells through an evaluator returning the Overall
/// score on a validation split; `None` marks an unevaluable cell. The best
/// cell is the argmax, first-seen winning ties (gammas outer, taus inner).
pub fn grid_search<F>(gammas: &[f64], taus: &[f64], mut eval_cell: F) -> Result<GridSearchResult>
where
    F: FnMut(f64, f64) -> Result<Option<f64>>,
{
    if gammas.is_empty() || taus.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let mut points = Vec::with_capacity(gammas.len() * taus.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &gamma in gammas {
        for &tau in taus {
            let overall = eval_cell(gamma, tau)?;
            if let Some(score) = overall {
                let improves = best.map(|(_, _, b)| score > b).unwrap_or(true);
                if improves {
                    best = Some((gamma, tau, score));
                }
            }
            points.push(GridPoint {
                gamma,
                tau,
                overall,
            });
        }
    }
    let (best_gamma, best_tau, best_overall) = best.ok_or_else(|| {
        Error::InvalidArgument("no grid cell produced an overall score".into())
    })?;
    Ok(GridSearchResult {
        best_gamma,
        best_tau,
        best_overall,
        points,
    })
}
