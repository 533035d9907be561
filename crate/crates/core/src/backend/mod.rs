//! Language-model backend abstraction.
//!
//! A [`Backend`] exposes exactly what the intervention pipeline needs and
//! nothing else: a full forward pass that records every layer's hidden
//! states, a logit-lens projection for intermediate states, greedy
//! generation, and a single-layer hook point for rewriting hidden states
//! mid-forward.
//!
//! Layer indexing convention: layer 0 is the embedding output; layers
//! `1..=depth` are transformer block outputs. Reported/selected layers are
//! block indices.
//!
//! The crate ships one concrete backend, [`toy::ToyBackend`], a small
//! seeded decoder-only transformer used for offline testing. Real models
//! plug in by implementing this trait through an adapter.

pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::argmax;

/// A tokenized piece of text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: Option<String>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        Self { ids, text: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One hidden-state vector at (layer, position).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub values: Vec<f64>,
    pub layer: usize,
    pub position: usize,
}

/// Vocabulary-sized logits obtained by projecting a hidden state through
/// the backend's output head (final normalization + unembedding).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogits {
    pub values: Vec<f64>,
    pub layer: usize,
    pub position: usize,
}

/// How a hook rewrites the states of its target layer.
pub enum StateTransform<'a> {
    /// Rewrite the state at each position at or after the hook's activation
    /// position. The returned vector must keep the hidden dimension.
    PerPosition(Box<dyn Fn(&HiddenState) -> Vec<f64> + Sync + 'a>),
    /// Replace the whole layer-state sequence before downstream blocks run.
    /// The replacement may have a different number of positions than the
    /// input (this is what lets a hook swap in the states of a parallel
    /// forward over a shorter context). Receives the current token ids and
    /// the layer states produced so far.
    ReplaceSequence(
        #[allow(clippy::type_complexity)]
        Box<dyn Fn(&[u32], &[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync + 'a>,
    ),
}

/// A single-layer intervention applied during a forward pass.
///
/// `layer` is a block index (1-based, embedding excluded); the transform
/// fires after block `layer` produces its output and before block
/// `layer + 1` consumes it.
pub struct HookSpec<'a> {
    pub layer: usize,
    /// First position (inclusive) at which a per-position transform fires.
    /// Ignored by [`StateTransform::ReplaceSequence`].
    pub activation_pos: usize,
    pub transform: StateTransform<'a>,
}

impl<'a> HookSpec<'a> {
    pub fn per_position<F>(layer: usize, activation_pos: usize, f: F) -> Self
    where
        F: Fn(&HiddenState) -> Vec<f64> + Sync + 'a,
    {
        Self {
            layer,
            activation_pos,
            transform: StateTransform::PerPosition(Box::new(f)),
        }
    }

    pub fn replace_sequence<F>(layer: usize, f: F) -> Self
    where
        F: Fn(&[u32], &[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync + 'a,
    {
        Self {
            layer,
            activation_pos: 0,
            transform: StateTransform::ReplaceSequence(Box::new(f)),
        }
    }

    /// Identity hook; useful in tests.
    pub fn identity(layer: usize) -> Self {
        Self::per_position(layer, 0, |h| h.values.clone())
    }
}

/// Everything a forward pass records.
///
/// `states[layer][position]` is the hidden vector at that layer and
/// position; `states[0]` is the embedding output. When a sequence-replacing
/// hook fired, layers above the hook may hold a different number of
/// positions than layers below it.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub states: Vec<Vec<Vec<f64>>>,
    /// Next-token logits at the final layer, last position.
    pub final_logits: LayerLogits,
}

impl ForwardRecord {
    pub fn state(&self, layer: usize, position: usize) -> HiddenState {
        HiddenState {
            values: self.states[layer][position].clone(),
            layer,
            position,
        }
    }

    pub fn last_position(&self, layer: usize) -> usize {
        self.states[layer].len() - 1
    }
}

/// Identifies the model an artifact was built against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendFingerprint {
    pub kind: String,
    pub depth: usize,
    pub hidden_dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

/// Abstract model backend.
///
/// Instances are single-threaded; run independent instances for
/// parallelism. Hooks are installed per call and never shared.
pub trait Backend: Sync {
    /// Number of transformer blocks.
    fn depth(&self) -> usize;
    /// Hidden dimension d.
    fn hidden_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// Generation terminator token id.
    fn eos_id(&self) -> u32;
    fn fingerprint(&self) -> BackendFingerprint;

    fn encode(&self, text: &str) -> TokenSequence;
    fn decode(&self, ids: &[u32]) -> String;

    /// Full forward with an optional hook; records states at every layer.
    fn forward_hooked(&self, input: &TokenSequence, hook: Option<&HookSpec>)
        -> Result<ForwardRecord>;

    /// Project an intermediate hidden state through the output head.
    fn logit_lens(&self, state: &HiddenState) -> Result<LayerLogits>;

    fn forward_with_states(&self, input: &TokenSequence) -> Result<ForwardRecord> {
        self.forward_hooked(input, None)
    }

    /// Greedy decode. Stops on the terminator id or after `max_new_tokens`.
    /// Returns the full sequence (prompt plus generated tokens, terminator
    /// included when emitted).
    fn generate(
        &self,
        input: &TokenSequence,
        hook: Option<&HookSpec>,
        max_new_tokens: usize,
    ) -> Result<TokenSequence> {
        if max_new_tokens == 0 {
            return Err(Error::InvalidArgument(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        let mut ids = input.ids.clone();
        for _ in 0..max_new_tokens {
            let record = self.forward_hooked(&TokenSequence::from_ids(ids.clone()), hook)?;
            let next = argmax(&record.final_logits.values) as u32;
            ids.push(next);
            if next == self.eos_id() {
                break;
            }
        }
        Ok(TokenSequence::from_ids(ids))
    }
}

/// Convenience: generated suffix of a `generate` result relative to its prompt.
pub fn generated_suffix(full: &TokenSequence, prompt_len: usize) -> Vec<u32> {
    full.ids[prompt_len..].to_vec()
}
