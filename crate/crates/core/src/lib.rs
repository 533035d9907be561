//! factsteer — locate, probe, and steer personalization-induced factual
//! drift in language model hidden states.
//!
//! The pipeline has three stages plus the harnesses around them:
//!
//! 1. **Locate** ([`locator`]): find the layer where user history most
//!    strongly perturbs answer-token likelihoods, via layer-wise logit-lens
//!    perplexity deviation fused across contrastive example groups.
//! 2. **Probe** ([`prober`]): train a logistic-regression gate on
//!    final-prompt-token hidden states at that layer to estimate how
//!    entangled a query's factual reasoning is with personalization.
//! 3. **Steer** ([`steer`]): at generation time, conditionally remove the
//!    personalization shift (hard), nudge along a factual steering vector
//!    (soft), or mix both regimes under a risk threshold.
//!
//! Around the core: [`contrast`] builds the with/without-history example
//! corpus, [`bench`] constructs paired factual/personalized benchmarks via
//! session-aligned retrieval, [`eval`] holds prompt builders, judging,
//! scoring, ablations and representation analysis, and [`sim`] runs the
//! teacher–student knowledge-transfer simulation.

pub mod backend;
pub mod bench;
pub mod client;
pub mod contrast;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod locator;
pub mod math;
pub mod prober;
pub mod sim;
pub mod steer;
pub mod synth;

pub use backend::{Backend, BackendFingerprint, HookSpec, TokenSequence};
pub use backend::toy::{ToyBackend, ToyConfig};
pub use error::{Error, Result};
