//! Deterministic reference backend: a small seeded decoder-only transformer.
//!
//! This model is never trained. It exists so every pipeline stage — lens
//! perplexity scans, probing, steering, generation hooks — can run offline
//! with reproducible numbers. Pre-norm blocks, causal multi-head attention,
//! a tanh MLP, sinusoidal positions, and an untied unembedding head.
//!
//! Tokenization is a fixed 64-character alphabet (id 0 is the terminator),
//! so `decode` followed by `encode` round-trips exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::fnv1a;

use super::{
    Backend, BackendFingerprint, ForwardRecord, HiddenState, HookSpec, LayerLogits,
    StateTransform, TokenSequence,
};

const LN_EPS: f64 = 1e-5;

/// 64 symbols; index = token id. Id 0 ('~') terminates generation.
const ALPHABET: &str = "~abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 ";

/// Final-normalization flavor. `Identity` exists for lens edge-case tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    LayerNorm,
    Identity,
}

/// Serializable toy-backend configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm: NormKind,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden_dim: 16,
            heads: 2,
            vocab: 64,
            seed: 7,
            norm: NormKind::LayerNorm,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden_dim == 0 || self.vocab < 2 {
            return Err(Error::InvalidArgument(
                "toy config needs depth >= 1, hidden_dim >= 1, vocab >= 2".into(),
            ));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-block weights. Matrices are row-major: `y[i] = sum_j w[i][j] * x[j]`.
#[derive(Debug, Clone)]
pub struct ToyBlockParams {
    pub w_q: Vec<Vec<f64>>,
    pub w_k: Vec<Vec<f64>>,
    pub w_v: Vec<Vec<f64>>,
    pub w_o: Vec<Vec<f64>>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w_ff1: Vec<Vec<f64>>,
    pub b_ff1: Vec<f64>,
    pub w_ff2: Vec<Vec<f64>>,
    pub b_ff2: Vec<f64>,
}

/// All weights, public so an independent oracle can replay the forward math.
#[derive(Debug, Clone)]
pub struct ToyParams {
    pub embed: Vec<Vec<f64>>,
    pub blocks: Vec<ToyBlockParams>,
    pub final_gamma: Vec<f64>,
    pub final_beta: Vec<f64>,
    pub unembed: Vec<Vec<f64>>,
}

pub struct ToyBackend {
    config: ToyConfig,
    params: ToyParams,
}

fn draw_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..rows)
        .map(|_| (0..cols).map(|_| dist.sample(rng)).collect())
        .collect()
}

impl ToyBackend {
    /// Build from config; weight draw order is fixed, so a given seed always
    /// produces the same model.
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let ff = 4 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let inv_sqrt_ff = 1.0 / (ff as f64).sqrt();

        let embed = draw_matrix(&mut rng, config.vocab, d, 1.0);
        let blocks = (0..config.depth)
            .map(|_| ToyBlockParams {
                w_q: draw_matrix(&mut rng, d, d, inv_sqrt_d),
                w_k: draw_matrix(&mut rng, d, d, inv_sqrt_d),
                w_v: draw_matrix(&mut rng, d, d, inv_sqrt_d),
                w_o: draw_matrix(&mut rng, d, d, inv_sqrt_d),
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w_ff1: draw_matrix(&mut rng, ff, d, inv_sqrt_d),
                b_ff1: vec![0.0; ff],
                w_ff2: draw_matrix(&mut rng, d, ff, inv_sqrt_ff),
                b_ff2: vec![0.0; d],
            })
            .collect();
        let unembed = draw_matrix(&mut rng, config.vocab, d, inv_sqrt_d);

        Ok(Self {
            params: ToyParams {
                embed,
                blocks,
                final_gamma: vec![1.0; d],
                final_beta: vec![0.0; d],
                unembed,
            },
            config,
        })
    }

    pub fn with_seed(seed: u64) -> Result<Self> {
        Self::new(ToyConfig::with_seed(seed))
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| gamma[i] * (v - mu) * inv + beta[i])
            .collect()
    }

    fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        w.iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn final_norm(&self, x: &[f64]) -> Vec<f64> {
        match self.config.norm {
            NormKind::LayerNorm => {
                Self::layer_norm(x, &self.params.final_gamma, &self.params.final_beta)
            }
            NormKind::Identity => x.to_vec(),
        }
    }

    fn sinusoidal_position(&self, pos: usize) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let mut pe = vec![0.0; d];
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[2 * i] = rate.sin();
            pe[2 * i + 1] = rate.cos();
        }
        pe
    }

    /// One causal pre-norm block applied to the whole sequence.
    fn block_forward(&self, block: &ToyBlockParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let normed: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| Self::layer_norm(x, &block.ln1_gamma, &block.ln1_beta))
            .collect();
        let qs: Vec<Vec<f64>> = normed.iter().map(|x| Self::matvec(&block.w_q, x)).collect();
        let ks: Vec<Vec<f64>> = normed.iter().map(|x| Self::matvec(&block.w_k, x)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|x| Self::matvec(&block.w_v, x)).collect();

        let mut after_attn = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let lo = h * dh;
                let hi = lo + dh;
                let mut scores = Vec::with_capacity(t + 1);
                for j in 0..=t {
                    let s: f64 = qs[t][lo..hi]
                        .iter()
                        .zip(&ks[j][lo..hi])
                        .map(|(a, b)| a * b)
                        .sum();
                    scores.push(s * scale);
                }
                let weights = crate::math::softmax(&scores);
                for (j, w) in weights.iter().enumerate() {
                    for (c, slot) in concat[lo..hi].iter_mut().enumerate() {
                        *slot += w * vs[j][lo + c];
                    }
                }
            }
            let proj = Self::matvec(&block.w_o, &concat);
            let res: Vec<f64> = xs[t].iter().zip(&proj).map(|(a, b)| a + b).collect();
            after_attn.push(res);
        }

        after_attn
            .iter()
            .map(|a| {
                let n = Self::layer_norm(a, &block.ln2_gamma, &block.ln2_beta);
                let hidden: Vec<f64> = Self::matvec(&block.w_ff1, &n)
                    .iter()
                    .zip(&block.b_ff1)
                    .map(|(v, b)| (v + b).tanh())
                    .collect();
                let out = Self::matvec(&block.w_ff2, &hidden);
                a.iter()
                    .zip(out.iter().zip(&block.b_ff2))
                    .map(|(x, (o, b))| x + o + b)
                    .collect()
            })
            .collect()
    }

    fn apply_hook(
        &self,
        hook: &HookSpec,
        ids: &[u32],
        layer: usize,
        states: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.config.hidden_dim;
        match &hook.transform {
            StateTransform::PerPosition(f) => {
                let mut out = states;
                for (pos, row) in out.iter_mut().enumerate() {
                    if pos < hook.activation_pos {
                        continue;
                    }
                    let replaced = f(&HiddenState {
                        values: row.clone(),
                        layer,
                        position: pos,
                    });
                    if replaced.len() != d {
                        return Err(Error::DimMismatch {
                            expected: d,
                            got: replaced.len(),
                            context: "hook transform output".into(),
                        });
                    }
                    *row = replaced;
                }
                Ok(out)
            }
            StateTransform::ReplaceSequence(f) => {
                let replaced = f(ids, &states)?;
                if replaced.is_empty() {
                    return Err(Error::EmptyInput("hook produced empty sequence".into()));
                }
                for row in &replaced {
                    if row.len() != d {
                        return Err(Error::DimMismatch {
                            expected: d,
                            got: row.len(),
                            context: "hook replacement row".into(),
                        });
                    }
                }
                Ok(replaced)
            }
        }
    }
}

impl Backend for ToyBackend {
    fn depth(&self) -> usize {
        self.config.depth
    }

    fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn eos_id(&self) -> u32 {
        0
    }

    fn fingerprint(&self) -> BackendFingerprint {
        BackendFingerprint {
            kind: "toy".into(),
            depth: self.config.depth,
            hidden_dim: self.config.hidden_dim,
            vocab: self.config.vocab,
            seed: self.config.seed,
        }
    }

    fn encode(&self, text: &str) -> TokenSequence {
        let ids = text
            .chars()
            .map(|c| match ALPHABET.chars().position(|a| a == c) {
                Some(i) if i < self.config.vocab => i as u32,
                // Unknown characters hash into 1..vocab so stray text never
                // encodes to the terminator.
                _ => {
                    let mut buf = [0u8; 4];
                    let h = fnv1a(c.encode_utf8(&mut buf).as_bytes());
                    1 + (h % (self.config.vocab as u64 - 1)) as u32
                }
            })
            .collect();
        TokenSequence {
            ids,
            text: Some(text.to_string()),
        }
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| ALPHABET.chars().nth(id as usize % 64).unwrap())
            .collect()
    }

    fn forward_hooked(
        &self,
        input: &TokenSequence,
        hook: Option<&HookSpec>,
    ) -> Result<ForwardRecord> {
        if input.is_empty() {
            return Err(Error::EmptyInput("model input token sequence".into()));
        }
        if let Some(h) = hook {
            if h.layer == 0 || h.layer > self.config.depth {
                return Err(Error::LayerOutOfRange {
                    layer: h.layer,
                    depth: self.config.depth,
                });
            }
        }
        for &id in &input.ids {
            if id as usize >= self.config.vocab {
                return Err(Error::OutOfVocab {
                    id,
                    vocab: self.config.vocab,
                });
            }
        }

        let mut states: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.config.depth + 1);
        let embedded: Vec<Vec<f64>> = input
            .ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                let mut e = self.params.embed[id as usize].clone();
                let pe = self.sinusoidal_position(pos);
                for (v, p) in e.iter_mut().zip(&pe) {
                    *v += p;
                }
                e
            })
            .collect();
        states.push(embedded);

        for (b, block) in self.params.blocks.iter().enumerate() {
            let layer = b + 1;
            let mut out = self.block_forward(block, states.last().unwrap());
            if let Some(h) = hook {
                if h.layer == layer {
                    out = self.apply_hook(h, &input.ids, layer, out)?;
                }
            }
            states.push(out);
        }

        let last = states[self.config.depth].len() - 1;
        let final_logits = self.logit_lens(&HiddenState {
            values: states[self.config.depth][last].clone(),
            layer: self.config.depth,
            position: last,
        })?;
        Ok(ForwardRecord {
            states,
            final_logits,
        })
    }

    fn logit_lens(&self, state: &HiddenState) -> Result<LayerLogits> {
        if state.values.len() != self.config.hidden_dim {
            return Err(Error::DimMismatch {
                expected: self.config.hidden_dim,
                got: state.values.len(),
                context: "logit lens input".into(),
            });
        }
        let normed = self.final_norm(&state.values);
        let values = Self::matvec(&self.params.unembed, &normed);
        Ok(LayerLogits {
            values,
            layer: state.layer,
            position: state.position,
        })
    }
}
