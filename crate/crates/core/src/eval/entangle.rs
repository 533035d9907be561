//! Representation-entanglement analysis.
//!
//! For each factual question, mean-pool the final-layer hidden states over
//! the response tokens of the personalized and history-free generations,
//! take the cosine between the two pooled embeddings, group by whether the
//! personalized answer was judged truthful, and compare the groups with a
//! two-sided Welch's t-test. A larger representational shift (lower
//! cosine) among hallucinated answers indicates the distortion lives in
//! the latent states, not in decoding noise.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, TokenSequence};
use crate::contrast::{ContrastiveExample, QaKind};
use crate::error::{Error, Result};
use crate::eval::stats::welch_t_test;
use crate::math::{cosine, mean};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntanglementStats {
    pub mean_cos_truthful: f64,
    pub mean_cos_hallucinated: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub n_truthful: usize,
    pub n_hallucinated: usize,
}

/// Mean-pooled final-layer states over the answer-token positions of a
/// teacher-forced (prompt, answer) pair.
pub fn response_embedding(
    prompt: &str,
    answer: &str,
    backend: &dyn Backend,
) -> Result<Vec<f64>> {
    let prompt_tokens = backend.encode(prompt);
    let answer_tokens = backend.encode(answer);
    if answer_tokens.is_empty() {
        return Err(Error::EmptyInput("response for embedding".into()));
    }
    let mut ids = prompt_tokens.ids.clone();
    ids.extend_from_slice(&answer_tokens.ids);
    let record = backend.forward_with_states(&TokenSequence::from_ids(ids))?;
    let layer = backend.depth();
    let d = backend.hidden_dim();
    let mut pooled = vec![0.0; d];
    for t in 0..answer_tokens.len() {
        let state = &record.states[layer][prompt_tokens.len() + t];
        for (p, v) in pooled.iter_mut().zip(state) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= answer_tokens.len() as f64;
    }
    Ok(pooled)
}

/// Run the analysis over judged factual examples. Needs at least two
/// examples in each verdict group.
pub fn entanglement_analysis(
    examples: &[ContrastiveExample],
    backend: &dyn Backend,
) -> Result<EntanglementStats> {
    let mut truthful = Vec::new();
    let mut hallucinated = Vec::new();
    for example in examples {
        if example.qa.kind != QaKind::Factual {
            continue;
        }
        let Some(verdict_with) = example.verdict_with else {
            continue;
        };
        if example.answer_with.is_empty() || example.answer_without.is_empty() {
            continue;
        }
        let e_with = response_embedding(&example.prompt_with, &example.answer_with, backend)?;
        let e_without =
            response_embedding(&example.prompt_without, &example.answer_without, backend)?;
        let cos = cosine(&e_with, &e_without);
        if verdict_with {
            truthful.push(cos);
        } else {
            hallucinated.push(cos);
        }
    }
    if truthful.len() < 2 || hallucinated.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "entanglement analysis needs >= 2 examples per group (truthful {}, hallucinated {})",
            truthful.len(),
            hallucinated.len()
        )));
    }
    let t = welch_t_test(&truthful, &hallucinated)?;
    Ok(EntanglementStats {
        mean_cos_truthful: mean(&truthful),
        mean_cos_hallucinated: mean(&hallucinated),
        t_statistic: t.t,
        p_value: t.p_value,
        n_truthful: truthful.len(),
        n_hallucinated: hallucinated.len(),
    })
}
