//! Personalization-sensitive layer localization.
//!
//! For each contrastive example and each block, teacher-force a shared
//! continuation under both prompt conditions, read answer-token
//! probabilities through the logit lens, and compute the relative
//! perplexity deviation. Per-group layer rankings (by mean deviation) are
//! fused with inverted ranks; the layer with the best fused score wins,
//! ties toward the deeper block.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ForwardRecord, HookSpec, TokenSequence};
use crate::contrast::{ContrastiveExample, Label};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;

/// Which continuation gets teacher-forced during the scan.
///
/// The with-history generation keeps decoding trajectories identical across
/// the two conditions; the gold answer scores ground-truth likelihood
/// directly. Both are defensible; the default is the stored generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanContinuation {
    #[default]
    GeneratedWith,
    Gold,
}

/// A constant offset injected into the with-history hidden states of
/// exactly one block, used to build synthetic deviation fixtures.
///
/// The offset perturbs the states of that block as the scan observes them;
/// it does not propagate into later blocks (a propagating offset bleeds
/// amplified deviation into every deeper block, which defeats the point of
/// a single-block plant).
#[derive(Debug, Clone)]
pub struct PlantedOffset {
    pub layer: usize,
    pub offset: Vec<f64>,
}

impl PlantedOffset {
    /// A forward hook that applies the same offset in-stream; used where a
    /// propagating perturbation is wanted (e.g. shift-recovery tests).
    pub fn hook(&self) -> HookSpec<'_> {
        HookSpec::per_position(self.layer, 0, |h| {
            h.values
                .iter()
                .zip(&self.offset)
                .map(|(v, o)| v + o)
                .collect()
        })
    }

    fn view_offset(&self, layer: usize) -> Option<&[f64]> {
        (layer == self.layer).then_some(self.offset.as_slice())
    }

    /// Seeded random direction of the given norm.
    pub fn seeded(layer: usize, dim: usize, scale: f64, seed: u64) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut offset: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = offset.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut offset {
            *x *= scale / norm.max(1e-12);
        }
        Self { layer, offset }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub ppl_with: f64,
    pub ppl_without: f64,
    pub delta: f64,
}

/// Mean per-layer curves for one example group. `ppl_*` are group means of
/// per-example perplexities; `delta` is the mean of per-example relative
/// deviations (not the deviation of the means).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupScan {
    pub group: Label,
    pub n_examples: usize,
    pub per_layer: Vec<LayerDeviation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerScanReport {
    pub factual_degraded: GroupScan,
    pub personalized_beneficial: GroupScan,
    /// Layers ordered by fused score, best first.
    pub fused_ranking: Vec<usize>,
    pub selected_layer: usize,
    pub continuation: ScanContinuation,
}

impl LayerScanReport {
    /// Rows of (layer, ppl_with, ppl_without, delta, group) for plotting.
    pub fn csv(&self) -> String {
        let mut out = String::from("layer,ppl_with,ppl_without,delta,group\n");
        for scan in [&self.factual_degraded, &self.personalized_beneficial] {
            let group = match scan.group {
                Label::FactualDegraded => "factual_degraded",
                Label::PersonalizedBeneficial => "personalized_beneficial",
                Label::Neutral => "neutral",
                Label::Unjudged => "unjudged",
            };
            for row in &scan.per_layer {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.layer, row.ppl_with, row.ppl_without, row.delta, group
                ));
            }
        }
        out
    }
}

fn answer_nll_inner(
    record: &ForwardRecord,
    prompt_len: usize,
    answer_ids: &[u32],
    layer: usize,
    backend: &dyn Backend,
    offset: Option<&[f64]>,
) -> Result<f64> {
    if answer_ids.is_empty() {
        return Err(Error::EmptyInput("answer token sequence".into()));
    }
    let mut total = 0.0;
    for (t, &tok) in answer_ids.iter().enumerate() {
        // Position predicting answer token t.
        let pos = prompt_len + t - 1;
        let mut state = record.state(layer, pos);
        if let Some(offset) = offset {
            for (v, o) in state.values.iter_mut().zip(offset) {
                *v += o;
            }
        }
        let lens = backend.logit_lens(&state)?;
        let log_p = lens.values[tok as usize] - log_sum_exp(&lens.values);
        total += log_p;
    }
    Ok(-total / answer_ids.len() as f64)
}

/// Teacher-forced answer-token negative log-likelihoods at one layer via
/// the logit lens, read from an existing forward record.
pub fn answer_nll_from_record(
    record: &ForwardRecord,
    prompt_len: usize,
    answer_ids: &[u32],
    layer: usize,
    backend: &dyn Backend,
) -> Result<f64> {
    answer_nll_inner(record, prompt_len, answer_ids, layer, backend, None)
}

/// Perplexity of `answer` teacher-forced after `prompt`, with token
/// probabilities taken from the logit lens at `layer`.
pub fn answer_token_ppl(
    prompt: &TokenSequence,
    answer: &TokenSequence,
    layer: usize,
    backend: &dyn Backend,
) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::EmptyInput("answer token sequence".into()));
    }
    let mut ids = prompt.ids.clone();
    ids.extend_from_slice(&answer.ids);
    let record = backend.forward_with_states(&TokenSequence::from_ids(ids))?;
    let nll = answer_nll_from_record(&record, prompt.len(), &answer.ids, layer, backend)?;
    Ok(nll.exp())
}

/// Relative perplexity deviation |with - without| / with.
pub fn relative_deviation(ppl_with: f64, ppl_without: f64) -> Result<f64> {
    if ppl_with <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ppl_with must be positive, got {ppl_with}"
        )));
    }
    Ok((ppl_with - ppl_without).abs() / ppl_with)
}

pub struct ScanOptions {
    pub continuation: ScanContinuation,
    pub plant: Option<PlantedOffset>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            continuation: ScanContinuation::GeneratedWith,
            plant: None,
        }
    }
}

fn continuation_ids(
    example: &ContrastiveExample,
    backend: &dyn Backend,
    continuation: ScanContinuation,
) -> Vec<u32> {
    let text = match continuation {
        ScanContinuation::GeneratedWith => &example.answer_with,
        ScanContinuation::Gold => &example.qa.gold_answer,
    };
    backend.encode(text).ids
}

/// Per-example deviations at every block for one group.
fn scan_group(
    examples: &[&ContrastiveExample],
    group: Label,
    backend: &dyn Backend,
    opts: &ScanOptions,
) -> Result<GroupScan> {
    if examples.is_empty() {
        return Err(Error::EmptyGroup(format!("{group:?}")));
    }
    let depth = backend.depth();

    // (ppl_with, ppl_without, delta) per layer per example. Results are
    // collected in input order so the reduction is deterministic.
    let per_example: Vec<Result<Vec<(f64, f64, f64)>>> = examples
        .par_iter()
        .map(|example| {
            let answer = continuation_ids(example, backend, opts.continuation);
            if answer.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "continuation for {}",
                    example.qa.qa_id
                )));
            }
            let with_prompt = backend.encode(&example.prompt_with);
            let without_prompt = backend.encode(&example.prompt_without);

            let mut with_ids = with_prompt.ids.clone();
            with_ids.extend_from_slice(&answer);
            let with_record =
                backend.forward_with_states(&TokenSequence::from_ids(with_ids))?;

            let mut without_ids = without_prompt.ids.clone();
            without_ids.extend_from_slice(&answer);
            let without_record =
                backend.forward_with_states(&TokenSequence::from_ids(without_ids))?;

            let mut rows = Vec::with_capacity(depth);
            for layer in 1..=depth {
                let view = opts.plant.as_ref().and_then(|p| p.view_offset(layer));
                let ppl_with = answer_nll_inner(
                    &with_record,
                    with_prompt.len(),
                    &answer,
                    layer,
                    backend,
                    view,
                )?
                .exp();
                let ppl_without = answer_nll_from_record(
                    &without_record,
                    without_prompt.len(),
                    &answer,
                    layer,
                    backend,
                )?
                .exp();
                rows.push((ppl_with, ppl_without, relative_deviation(ppl_with, ppl_without)?));
            }
            Ok(rows)
        })
        .collect();

    let mut sums = vec![(0.0, 0.0, 0.0); depth];
    let mut n = 0usize;
    for rows in per_example {
        let rows = rows?;
        for (layer, (w, wo, d)) in rows.into_iter().enumerate() {
            sums[layer].0 += w;
            sums[layer].1 += wo;
            sums[layer].2 += d;
        }
        n += 1;
    }

    let per_layer = sums
        .into_iter()
        .enumerate()
        .map(|(i, (w, wo, d))| LayerDeviation {
            layer: i + 1,
            ppl_with: w / n as f64,
            ppl_without: wo / n as f64,
            delta: d / n as f64,
        })
        .collect();
    Ok(GroupScan {
        group,
        n_examples: n,
        per_layer,
    })
}

/// Within-group layer ranking: mean delta descending, ties toward the
/// deeper layer. Returns layers in rank order (rank 1 first).
pub fn rank_layers(scan: &GroupScan) -> Vec<usize> {
    let mut layers: Vec<(usize, f64)> =
        scan.per_layer.iter().map(|r| (r.layer, r.delta)).collect();
    layers.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| b.0.cmp(&a.0)));
    layers.into_iter().map(|(l, _)| l).collect()
}

/// Inverted-rank fusion across the two groups.
///
/// score(layer) = sum over groups of 1/rank(layer); the selected layer
/// maximizes the fused score, ties toward the deeper layer.
pub fn fuse_and_select(
    scan_fd: &GroupScan,
    scan_pb: &GroupScan,
) -> Result<(Vec<usize>, usize)> {
    fuse_rankings(&rank_layers(scan_fd), &rank_layers(scan_pb))
}

/// Fusion over explicit per-group rankings (rank 1 first).
pub fn fuse_rankings(group_a: &[usize], group_b: &[usize]) -> Result<(Vec<usize>, usize)> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::EmptyGroup("layer ranking".into()));
    }
    let mut sorted_a = group_a.to_vec();
    let mut sorted_b = group_b.to_vec();
    sorted_a.sort_unstable();
    sorted_b.sort_unstable();
    if sorted_a != sorted_b {
        return Err(Error::InvalidArgument(
            "group scans cover different layer sets".into(),
        ));
    }

    let mut scores: Vec<(usize, f64)> = group_a
        .iter()
        .map(|&layer| {
            let rank_a = group_a.iter().position(|&l| l == layer).unwrap() + 1;
            let rank_b = group_b.iter().position(|&l| l == layer).unwrap() + 1;
            (layer, 1.0 / rank_a as f64 + 1.0 / rank_b as f64)
        })
        .collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| b.0.cmp(&a.0)));
    let ranking: Vec<usize> = scores.iter().map(|(l, _)| *l).collect();
    Ok((ranking.clone(), ranking[0]))
}

/// Full scan over a labeled contrast corpus.
///
/// Only the two named groups participate; neutral and unjudged examples are
/// ignored. An empty group is an error naming the missing group.
pub fn scan_layers(
    examples: &[ContrastiveExample],
    backend: &dyn Backend,
    opts: &ScanOptions,
) -> Result<LayerScanReport> {
    let fd: Vec<&ContrastiveExample> = examples
        .iter()
        .filter(|e| e.label == Label::FactualDegraded)
        .collect();
    let pb: Vec<&ContrastiveExample> = examples
        .iter()
        .filter(|e| e.label == Label::PersonalizedBeneficial)
        .collect();
    if fd.is_empty() {
        return Err(Error::EmptyGroup("factual_degraded".into()));
    }
    if pb.is_empty() {
        return Err(Error::EmptyGroup("personalized_beneficial".into()));
    }

    let scan_fd = scan_group(&fd, Label::FactualDegraded, backend, opts)?;
    let scan_pb = scan_group(&pb, Label::PersonalizedBeneficial, backend, opts)?;
    let (fused_ranking, selected_layer) = fuse_and_select(&scan_fd, &scan_pb)?;
    Ok(LayerScanReport {
        factual_degraded: scan_fd,
        personalized_beneficial: scan_pb,
        fused_ranking,
        selected_layer,
        continuation: opts.continuation,
    })
}
