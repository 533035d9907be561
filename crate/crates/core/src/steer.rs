//! Adaptive representation steering at the selected layer.
//!
//! Three variants share one gate signal p-hat from the prober:
//!
//! - **Hard**: when p-hat >= tau, subtract the personalization shift v_u,
//!   restoring the layer-L state to its history-free counterpart. v_u is
//!   maintained by a parallel forward over the history-free prompt,
//!   teacher-forced with the personalized run's emitted tokens, so the
//!   restored state equals the history-free state exactly — and continuing
//!   the computation from that state in its own context is exactly the
//!   history-free forward.
//! - **Soft**: always add beta(p-hat) * s_f, where s_f points from the mean
//!   personalized-response state toward the mean factual-response state.
//!   The sign of beta = gamma * (p-hat - 0.5) attenuates or amplifies
//!   personalization.
//! - **Mixed**: soft below tau, hard at or above it.
//!
//! The gate fires once per query, from the final prompt-token state of the
//! personalized prompt; the chosen transform then applies at every
//! generated position.

use serde::{Deserialize, Serialize};

use crate::backend::{
    generated_suffix, Backend, BackendFingerprint, ForwardRecord, HiddenState, HookSpec,
    TokenSequence,
};
use crate::contrast::{ContrastiveExample, Label, QAInstance, QaKind, UserRecord};
use crate::error::{Error, Result};
use crate::eval::prompts::PromptBuilder;
use crate::math::{axpy, sub};
use crate::prober::ProberModel;

/// Steering regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "H")]
    Hard,
    #[serde(rename = "S")]
    Soft,
    #[serde(rename = "M")]
    Mixed,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "H" | "HARD" => Ok(Variant::Hard),
            "S" | "SOFT" => Ok(Variant::Soft),
            "M" | "MIXED" => Ok(Variant::Mixed),
            other => Err(Error::InvalidArgument(format!(
                "unknown steering variant {other}; expected H, S, or M"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub variant: Variant,
    pub tau: f64,
    pub gamma: f64,
    pub layer: usize,
}

impl SteeringConfig {
    pub fn new(variant: Variant, tau: f64, gamma: f64, layer: usize) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie strictly inside (0, 1), got {tau}"
            )));
        }
        if gamma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gamma must be nonnegative, got {gamma}"
            )));
        }
        Ok(Self {
            variant,
            tau,
            gamma,
            layer,
        })
    }
}

/// Difference of mean response-token states: factual (history-free, judged
/// correct) minus personalized (history-dependent, correct only with it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub s_f: Vec<f64>,
    pub m_fact: Vec<f64>,
    pub m_pers: Vec<f64>,
    pub layer: usize,
    pub n_fact: usize,
    pub n_pers: usize,
}

/// beta(p-hat) = gamma * (p-hat - 0.5); positive values attenuate
/// personalization, negative values amplify it.
pub fn beta_s(p_hat: f64, gamma: f64) -> f64 {
    gamma * (p_hat - 0.5)
}

/// Per-position personalization shift: layer-L state of the personalized
/// run minus the aligned state of the history-free run, both at their
/// current predicting position.
pub fn v_u_from_records(with: &ForwardRecord, without: &ForwardRecord, layer: usize) -> Vec<f64> {
    let wp = with.last_position(layer);
    let wop = without.last_position(layer);
    sub(&with.states[layer][wp], &without.states[layer][wop])
}

/// Run both teacher-forced forwards and return v_u at the predicting
/// position. Subtracting it from the with-history state reproduces the
/// history-free state exactly.
pub fn compute_v_u(
    prompt_with: &TokenSequence,
    prompt_without: &TokenSequence,
    generated_prefix: &[u32],
    backend: &dyn Backend,
    layer: usize,
) -> Result<Vec<f64>> {
    let mut with_ids = prompt_with.ids.clone();
    with_ids.extend_from_slice(generated_prefix);
    let mut without_ids = prompt_without.ids.clone();
    without_ids.extend_from_slice(generated_prefix);
    let with = backend.forward_with_states(&TokenSequence::from_ids(with_ids))?;
    let without = backend.forward_with_states(&TokenSequence::from_ids(without_ids))?;
    Ok(v_u_from_records(&with, &without, layer))
}

/// Apply one steering step to a hidden state.
pub fn apply(
    config: &SteeringConfig,
    h: &HiddenState,
    p_hat: f64,
    v_u: Option<&[f64]>,
    s: Option<&SteeringVector>,
) -> Result<HiddenState> {
    let hard = |v_u: Option<&[f64]>| -> Result<Vec<f64>> {
        let v = v_u.ok_or_else(|| {
            Error::InvalidArgument("hard branch fired without a personalization shift v_u".into())
        })?;
        if v.len() != h.values.len() {
            return Err(Error::DimMismatch {
                expected: h.values.len(),
                got: v.len(),
                context: "v_u".into(),
            });
        }
        Ok(sub(&h.values, v))
    };
    let soft = |s: Option<&SteeringVector>| -> Result<Vec<f64>> {
        let s = s.ok_or_else(|| {
            Error::InvalidArgument("soft branch fired without a steering vector".into())
        })?;
        if s.s_f.len() != h.values.len() {
            return Err(Error::DimMismatch {
                expected: h.values.len(),
                got: s.s_f.len(),
                context: "s_f".into(),
            });
        }
        Ok(axpy(&h.values, beta_s(p_hat, config.gamma), &s.s_f))
    };

    let values = match config.variant {
        Variant::Hard => {
            if p_hat >= config.tau {
                hard(v_u)?
            } else {
                h.values.clone()
            }
        }
        Variant::Soft => soft(s)?,
        Variant::Mixed => {
            if p_hat >= config.tau {
                hard(v_u)?
            } else {
                soft(s)?
            }
        }
    };
    Ok(HiddenState {
        values,
        layer: h.layer,
        position: h.position,
    })
}

/// Flat mean of layer-L states over all response-token positions of every
/// qualifying example.
///
/// m_fact pools factual questions whose history-free answer was judged
/// correct, teacher-forcing that answer after the history-free prompt.
/// m_pers pools personalized-beneficial examples, teacher-forcing the
/// with-history answer after the personalized prompt.
pub fn build_steering_vector(
    examples: &[ContrastiveExample],
    backend: &dyn Backend,
    layer: usize,
) -> Result<SteeringVector> {
    let d = backend.hidden_dim();
    let mut fact_sum = vec![0.0; d];
    let mut fact_count = 0usize;
    let mut fact_examples = 0usize;
    let mut pers_sum = vec![0.0; d];
    let mut pers_count = 0usize;
    let mut pers_examples = 0usize;

    let accumulate = |prompt: &str, answer: &str, sum: &mut Vec<f64>| -> Result<usize> {
        let prompt_tokens = backend.encode(prompt);
        let answer_tokens = backend.encode(answer);
        if answer_tokens.is_empty() {
            return Ok(0);
        }
        let mut ids = prompt_tokens.ids.clone();
        ids.extend_from_slice(&answer_tokens.ids);
        let record = backend.forward_with_states(&TokenSequence::from_ids(ids))?;
        for t in 0..answer_tokens.len() {
            let state = &record.states[layer][prompt_tokens.len() + t];
            for (s, v) in sum.iter_mut().zip(state) {
                *s += v;
            }
        }
        Ok(answer_tokens.len())
    };

    for example in examples {
        if example.qa.kind == QaKind::Factual && example.verdict_without == Some(true) {
            let added = accumulate(
                &example.prompt_without,
                &example.answer_without,
                &mut fact_sum,
            )?;
            fact_count += added;
            fact_examples += usize::from(added > 0);
        }
        if example.label == Label::PersonalizedBeneficial {
            let added = accumulate(&example.prompt_with, &example.answer_with, &mut pers_sum)?;
            pers_count += added;
            pers_examples += usize::from(added > 0);
        }
    }

    if fact_count == 0 {
        return Err(Error::EmptyGroup(
            "m_fact source (factual examples correct without history)".into(),
        ));
    }
    if pers_count == 0 {
        return Err(Error::EmptyGroup(
            "m_pers source (personalized-beneficial examples)".into(),
        ));
    }

    let m_fact: Vec<f64> = fact_sum.iter().map(|s| s / fact_count as f64).collect();
    let m_pers: Vec<f64> = pers_sum.iter().map(|s| s / pers_count as f64).collect();
    let s_f = sub(&m_fact, &m_pers);
    Ok(SteeringVector {
        s_f,
        m_fact,
        m_pers,
        layer,
        n_fact: fact_examples,
        n_pers: pers_examples,
    })
}

// ---------------------------------------------------------------------------
// Steering artifact
// ---------------------------------------------------------------------------

pub const ARTIFACT_VERSION: u32 = 1;

/// Everything needed to steer at inference time, persisted as one JSON
/// document. Loading refuses a backend whose depth or hidden dimension
/// differs from the fingerprint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringArtifact {
    pub version: u32,
    pub layer: usize,
    pub variant: Variant,
    pub tau: f64,
    pub gamma: f64,
    pub prober: ProberModel,
    pub steering: SteeringVector,
    pub backend_fingerprint: BackendFingerprint,
}

impl SteeringArtifact {
    pub fn config(&self) -> Result<SteeringConfig> {
        SteeringConfig::new(self.variant, self.tau, self.gamma, self.layer)
    }

    pub fn check_backend(&self, backend: &dyn Backend) -> Result<()> {
        if self.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "artifact version {} unsupported (expected {ARTIFACT_VERSION})",
                self.version
            )));
        }
        let fp = backend.fingerprint();
        if fp.hidden_dim != self.backend_fingerprint.hidden_dim
            || fp.depth != self.backend_fingerprint.depth
        {
            return Err(Error::Artifact(format!(
                "artifact built for depth {} / dim {}, backend has depth {} / dim {}",
                self.backend_fingerprint.depth,
                self.backend_fingerprint.hidden_dim,
                fp.depth,
                fp.hidden_dim
            )));
        }
        if self.layer == 0 || self.layer > fp.depth {
            return Err(Error::LayerOutOfRange {
                layer: self.layer,
                depth: fp.depth,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::corpus::write_json(path, self)
    }

    pub fn load(path: &std::path::Path, backend: &dyn Backend) -> Result<Self> {
        let artifact: SteeringArtifact = crate::corpus::read_json(path)?;
        artifact.check_backend(backend)?;
        Ok(artifact)
    }
}

// ---------------------------------------------------------------------------
// Steered generation
// ---------------------------------------------------------------------------

/// How the hard branch maintains v_u across generation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VuMode {
    /// Recompute v_u every step from the parallel history-free forward;
    /// restoration is exact, so the hard branch reproduces the
    /// history-free decode.
    #[default]
    Recompute,
    /// Freeze v_u from the prompt and subtract that fixed vector at every
    /// generated position (ablation mode; restoration is approximate).
    Frozen,
}

#[derive(Debug, Clone)]
pub struct SteerOptions {
    pub max_new_tokens: usize,
    pub vu_mode: VuMode,
    /// Test/ablation override for the gate signal.
    pub p_hat_override: Option<f64>,
}

impl Default for SteerOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 500,
            vu_mode: VuMode::Recompute,
            p_hat_override: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeredOutput {
    pub text: String,
    pub tokens: Vec<u32>,
    pub p_hat: f64,
    pub hard_branch_fired: bool,
}

/// Steered greedy decode over an explicit prompt pair.
///
/// The gate reads the final prompt-token state of the personalized prompt
/// once; the selected transform then runs under a layer-L hook for the
/// whole generation. Position coverage starts at the final prompt position
/// so the first emitted token is already steered.
pub fn steered_decode(
    prompt_with: &str,
    prompt_without: &str,
    artifact: &SteeringArtifact,
    backend: &dyn Backend,
    opts: &SteerOptions,
) -> Result<SteeredOutput> {
    artifact.check_backend(backend)?;
    let config = artifact.config()?;
    let layer = config.layer;

    let with_tokens = backend.encode(prompt_with);
    let without_tokens = backend.encode(prompt_without);
    if with_tokens.is_empty() || without_tokens.is_empty() {
        return Err(Error::EmptyInput("steered generation prompt".into()));
    }

    let gate_record = backend.forward_with_states(&with_tokens)?;
    let gate_feature = &gate_record.states[layer][gate_record.last_position(layer)];
    let p_hat = match opts.p_hat_override {
        Some(p) => p,
        None => artifact.prober.predict(gate_feature)?,
    };

    let hard_fires = match config.variant {
        Variant::Hard | Variant::Mixed => p_hat >= config.tau,
        Variant::Soft => false,
    };

    let prompt_len = with_tokens.len();
    let activation = prompt_len - 1;

    let full = if hard_fires {
        match opts.vu_mode {
            VuMode::Recompute => {
                // Swap in the layer-L states of the parallel history-free
                // forward, teacher-forced with whatever has been emitted so
                // far. Downstream blocks then compute exactly the
                // history-free continuation.
                let without_ids = without_tokens.ids.clone();
                let hook = HookSpec::replace_sequence(layer, move |ids: &[u32], _states| {
                    let mut parallel = without_ids.clone();
                    parallel.extend_from_slice(&ids[prompt_len..]);
                    let record =
                        backend.forward_with_states(&TokenSequence::from_ids(parallel))?;
                    Ok(record.states[layer].clone())
                });
                backend.generate(&with_tokens, Some(&hook), opts.max_new_tokens)?
            }
            VuMode::Frozen => {
                let v_frozen =
                    compute_v_u(&with_tokens, &without_tokens, &[], backend, layer)?;
                let hook = HookSpec::per_position(layer, activation, move |h| {
                    sub(&h.values, &v_frozen)
                });
                backend.generate(&with_tokens, Some(&hook), opts.max_new_tokens)?
            }
        }
    } else {
        match config.variant {
            // Hard variant below threshold: personalization passes through.
            Variant::Hard => backend.generate(&with_tokens, None, opts.max_new_tokens)?,
            Variant::Soft | Variant::Mixed => {
                let beta = beta_s(p_hat, config.gamma);
                if beta == 0.0 {
                    backend.generate(&with_tokens, None, opts.max_new_tokens)?
                } else {
                    let s_f = artifact.steering.s_f.clone();
                    let hook = HookSpec::per_position(layer, activation, move |h| {
                        axpy(&h.values, beta, &s_f)
                    });
                    backend.generate(&with_tokens, Some(&hook), opts.max_new_tokens)?
                }
            }
        }
    };

    let tokens = generated_suffix(&full, prompt_len);
    Ok(SteeredOutput {
        text: backend.decode(&tokens),
        tokens,
        p_hat,
        hard_branch_fired: hard_fires,
    })
}

/// Build the method's prompt pair for a question and decode with steering.
pub fn steered_generate(
    qa: &QAInstance,
    user: &UserRecord,
    builder: &PromptBuilder,
    artifact: &SteeringArtifact,
    backend: &dyn Backend,
    opts: &SteerOptions,
) -> Result<SteeredOutput> {
    let pair = builder.build(qa, user)?;
    steered_decode(
        &pair.with_history,
        &pair.without_history,
        artifact,
        backend,
        opts,
    )
}
