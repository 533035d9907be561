//! Paired factual/personalized benchmark construction.
//!
//! Pipeline per user: embed each history session independently, retrieve the
//! top-k most similar factual questions per session, aggregate and dedup the
//! retrievals into a candidate pool, hybrid-rerank the pool by averaging
//! normalized retrieval frequency with maximum session similarity, keep the
//! best `keep`, then sample one factual question per user and pair it with
//! the user's personalized question. Users are split 50/50 at the user
//! level so a pair never straddles the train/test boundary.

pub mod embed;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{QAInstance, QaKind, UserRecord};
use crate::error::{Error, Result};
use crate::math::cosine;

use embed::Embedder;

/// A dense embedding tagged with what it encodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_id: String,
}

/// Flat exact-cosine index over factual questions.
///
/// Brute-force scan is plenty at this scale; an approximate index can drop
/// in behind the same contract.
#[derive(Debug, Clone)]
pub struct FactIndex {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl FactIndex {
    pub fn build(facts: &[QAInstance], embedder: &dyn Embedder) -> Result<Self> {
        if facts.is_empty() {
            return Err(Error::EmptyInput("factual question corpus".into()));
        }
        let texts: Vec<&str> = facts.iter().map(|f| f.question.as_str()).collect();
        let vectors = embedder.embed(&texts)?;
        Ok(Self {
            ids: facts.iter().map(|f| f.qa_id.clone()).collect(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Exact top-k retrieval result; `short_index` flags k > index size.
#[derive(Debug, Clone)]
pub struct TopK {
    pub items: Vec<(String, f64)>,
    pub short_index: bool,
}

/// Exact top-k by cosine similarity, descending; ties break toward the
/// lexicographically smaller fact id.
pub fn retrieve_topk(query: &[f64], index: &FactIndex, k: usize) -> Result<TopK> {
    if index.is_empty() {
        return Err(Error::EmptyInput("fact index".into()));
    }
    let mut scored: Vec<(usize, f64)> = index
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (i, cosine(query, v)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    let short_index = k > index.len();
    let items = scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect();
    Ok(TopK { items, short_index })
}

/// One reranked candidate. `hybrid` is always the arithmetic mean of the
/// two component signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub fact_qa_id: String,
    /// Fraction of the user's sessions whose top-k retrieved this candidate.
    pub s_freq: f64,
    /// Maximum cosine between any session and the candidate.
    pub s_sim: f64,
    pub hybrid: f64,
    /// Session ids whose top-k contained the candidate (sorted).
    pub contributing_sessions: Vec<String>,
}

/// Retrieval aggregation and hybrid reranking over one user's sessions.
///
/// Returns at most `keep` candidates ordered by hybrid score descending,
/// ties toward the smaller fact id. An empty pool yields an empty list.
pub fn hybrid_rerank(
    session_vectors: &[(String, Vec<f64>)],
    index: &FactIndex,
    k: usize,
    keep: usize,
) -> Result<Vec<CandidateScore>> {
    if session_vectors.is_empty() {
        return Err(Error::EmptyInput("user sessions".into()));
    }
    let n_sessions = session_vectors.len() as f64;

    // candidate id -> session ids that retrieved it (BTreeMap keeps every
    // downstream ordering independent of session iteration order).
    let mut retrieved: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (session_id, vector) in session_vectors {
        let top = retrieve_topk(vector, index, k)?;
        for (fact_id, _) in top.items {
            let entry = retrieved.entry(fact_id).or_default();
            if !entry.contains(session_id) {
                entry.push(session_id.clone());
            }
        }
    }

    let mut candidates = Vec::with_capacity(retrieved.len());
    for (fact_id, mut sessions) in retrieved {
        sessions.sort();
        let idx = index
            .ids
            .iter()
            .position(|id| *id == fact_id)
            .expect("retrieved id exists in index");
        let s_freq = sessions.len() as f64 / n_sessions;
        let s_sim = session_vectors
            .iter()
            .map(|(_, v)| cosine(v, &index.vectors[idx]))
            .fold(f64::NEG_INFINITY, f64::max);
        candidates.push(CandidateScore {
            fact_qa_id: fact_id,
            s_freq,
            s_sim,
            hybrid: (s_freq + s_sim) / 2.0,
            contributing_sessions: sessions,
        });
    }
    candidates.sort_by(|a, b| {
        b.hybrid
            .total_cmp(&a.hybrid)
            .then_with(|| a.fact_qa_id.cmp(&b.fact_qa_id))
    });
    candidates.truncate(keep);
    Ok(candidates)
}

/// Where a benchmark pairing came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub hybrid: f64,
    pub contributing_sessions: Vec<String>,
    /// Fact id in the source corpus (record ids are rebound per user).
    pub source_fact_id: String,
}

/// One user's paired personalized/factual benchmark entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub user_id: String,
    pub personalized_qa: QAInstance,
    pub factual_qa: QAInstance,
    pub provenance: Provenance,
}

impl BenchmarkRecord {
    pub fn validate(&self) -> Result<()> {
        if self.factual_qa.kind != QaKind::Factual
            || self.personalized_qa.kind != QaKind::Personalized
        {
            return Err(Error::InvalidArgument(format!(
                "benchmark record for {} has mismatched qa kinds",
                self.user_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchManifest {
    pub n_users: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub embedder_id: String,
    pub k: usize,
    pub keep: usize,
    pub excluded_users: Vec<String>,
}

pub struct BenchSplit {
    pub train: Vec<BenchmarkRecord>,
    pub test: Vec<BenchmarkRecord>,
    pub excluded_users: Vec<String>,
}

/// Sample one factual question per user from its reranked pool (uniform,
/// seeded) and split users 50/50. Users with empty pools are excluded and
/// reported. Deterministic for a fixed seed.
pub fn assemble_and_split(
    users: &[UserRecord],
    ranked: &BTreeMap<String, Vec<CandidateScore>>,
    facts: &[QAInstance],
    seed: u64,
) -> Result<BenchSplit> {
    let fact_by_id: std::collections::HashMap<&str, &QAInstance> =
        facts.iter().map(|f| (f.qa_id.as_str(), f)).collect();

    let mut sorted_users: Vec<&UserRecord> = users.iter().collect();
    sorted_users.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for user in sorted_users {
        let pool = ranked.get(&user.user_id).map(Vec::as_slice).unwrap_or(&[]);
        if pool.is_empty() {
            excluded.push(user.user_id.clone());
            continue;
        }
        let pick = &pool[rng.gen_range(0..pool.len())];
        let source = fact_by_id.get(pick.fact_qa_id.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("ranked candidate {} not in fact corpus", pick.fact_qa_id))
        })?;
        // Rebind the fact to this user; pools overlap across users, so the
        // per-user id keeps qa_ids unique downstream.
        let factual_qa = QAInstance {
            qa_id: format!("{}::{}", user.user_id, source.qa_id),
            user_id: user.user_id.clone(),
            kind: QaKind::Factual,
            question: source.question.clone(),
            gold_answer: source.gold_answer.clone(),
        };
        records.push(BenchmarkRecord {
            user_id: user.user_id.clone(),
            personalized_qa: user.personalized_qa.clone(),
            factual_qa,
            provenance: Provenance {
                hybrid: pick.hybrid,
                contributing_sessions: pick.contributing_sessions.clone(),
                source_fact_id: pick.fact_qa_id.clone(),
            },
        });
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_train = records.len() / 2;
    let mut train: Vec<BenchmarkRecord> = order[..n_train]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    let mut test: Vec<BenchmarkRecord> = order[n_train..]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    train.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    test.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    Ok(BenchSplit {
        train,
        test,
        excluded_users: excluded,
    })
}

/// Full pipeline: embed sessions, rerank per user, assemble, split.
pub fn build_benchmark(
    users: &[UserRecord],
    facts: &[QAInstance],
    embedder: &dyn Embedder,
    k: usize,
    keep: usize,
    seed: u64,
) -> Result<(BenchSplit, BenchManifest)> {
    let index = FactIndex::build(facts, embedder)?;
    let mut ranked = BTreeMap::new();
    for user in users {
        let texts: Vec<String> = user.sessions.iter().map(|s| s.rendered()).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vectors = embedder.embed(&refs)?;
        let session_vectors: Vec<(String, Vec<f64>)> = user
            .sessions
            .iter()
            .map(|s| s.session_id.clone())
            .zip(vectors)
            .collect();
        let candidates = hybrid_rerank(&session_vectors, &index, k, keep)?;
        ranked.insert(user.user_id.clone(), candidates);
    }
    let split = assemble_and_split(users, &ranked, facts, seed)?;
    let manifest = BenchManifest {
        n_users: users.len(),
        n_train: split.train.len(),
        n_test: split.test.len(),
        seed,
        embedder_id: embedder.id(),
        k,
        keep,
        excluded_users: split.excluded_users.clone(),
    };
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use embed::HashEmbedder;

    fn fact(id: &str, question: &str) -> QAInstance {
        QAInstance {
            qa_id: id.into(),
            user_id: String::new(),
            kind: QaKind::Factual,
            question: question.into(),
            gold_answer: "gold".into(),
        }
    }

    fn tiny_index() -> FactIndex {
        FactIndex {
            ids: vec!["f1".into(), "f2".into(), "f3".into()],
            vectors: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.6, 0.8, 0.0],
            ],
        }
    }

    #[test]
    fn small_index_returns_everything_flagged() {
        let top = retrieve_topk(&[1.0, 0.0, 0.0], &tiny_index(), 10).unwrap();
        assert_eq!(top.items.len(), 3);
        assert!(top.short_index);
    }

    #[test]
    fn exact_query_hits_itself_first_with_cosine_one() {
        let top = retrieve_topk(&[0.0, 1.0, 0.0], &tiny_index(), 2).unwrap();
        assert_eq!(top.items[0].0, "f2");
        assert!((top.items[0].1 - 1.0).abs() < 1e-12);
        assert!(!top.short_index);
    }

    #[test]
    fn single_session_arithmetic() {
        // One session retrieving a candidate at cosine 0.8:
        // s_freq = 1, s_sim = 0.8, hybrid = 0.9.
        let index = FactIndex {
            ids: vec!["f1".into()],
            vectors: vec![vec![0.8, 0.6]],
        };
        let sessions = vec![("s1".to_string(), vec![1.0, 0.0])];
        let out = hybrid_rerank(&sessions, &index, 1, 10).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].s_freq - 1.0).abs() < 1e-12);
        assert!((out[0].s_sim - 0.8).abs() < 1e-12);
        assert!((out[0].hybrid - 0.9).abs() < 1e-12);
    }

    #[test]
    fn two_of_four_sessions_hybrid() {
        // Candidate retrieved by 2 of 4 sessions, max cosine 0.6:
        // hybrid = (0.5 + 0.6) / 2 = 0.55.
        let index = FactIndex {
            ids: vec!["fa".into(), "fb".into()],
            vectors: vec![vec![0.6, 0.8], vec![-1.0, 0.0]],
        };
        let sessions = vec![
            ("s1".to_string(), vec![1.0, 0.0]),   // fa cos 0.6 > fb -1
            ("s2".to_string(), vec![1.0, 0.0]),   // same
            ("s3".to_string(), vec![-1.0, 0.0]),  // fb cos 1.0 > fa -0.6
            ("s4".to_string(), vec![-0.8, 0.6]),  // fb 0.8 > fa 0.0
        ];
        let out = hybrid_rerank(&sessions, &index, 1, 10).unwrap();
        let fa = out.iter().find(|c| c.fact_qa_id == "fa").unwrap();
        assert!((fa.s_freq - 0.5).abs() < 1e-12);
        assert!((fa.s_sim - 0.6).abs() < 1e-12);
        assert!((fa.hybrid - 0.55).abs() < 1e-12);
        assert_eq!(fa.contributing_sessions, vec!["s1".to_string(), "s2".into()]);
    }

    #[test]
    fn rerank_is_invariant_to_session_order() {
        let embedder = HashEmbedder::default();
        let facts: Vec<QAInstance> = (0..12)
            .map(|i| fact(&format!("f{i:02}"), &format!("question about topic {i}")))
            .collect();
        let index = FactIndex::build(&facts, &embedder).unwrap();
        let texts = ["alpha beta", "gamma delta", "epsilon zeta"];
        let vecs = embedder
            .embed(&texts.iter().copied().collect::<Vec<_>>())
            .unwrap();
        let mut sessions: Vec<(String, Vec<f64>)> = texts
            .iter()
            .enumerate()
            .map(|(i, _)| (format!("s{i}"), vecs[i].clone()))
            .collect();
        let a = hybrid_rerank(&sessions, &index, 4, 100).unwrap();
        sessions.reverse();
        let b = hybrid_rerank(&sessions, &index, 4, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dedup_one_entry_per_candidate() {
        let index = FactIndex {
            ids: vec!["f1".into()],
            vectors: vec![vec![1.0, 0.0]],
        };
        let sessions = vec![
            ("s1".to_string(), vec![1.0, 0.0]),
            ("s2".to_string(), vec![0.9, 0.1]),
        ];
        let out = hybrid_rerank(&sessions, &index, 5, 10).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn hybrid_stays_in_bounds() {
        // With s_freq in (0, 1] and cosine in [-1, 1], hybrid is in [-1/2, 1].
        let embedder = HashEmbedder::new(16, 3);
        let facts: Vec<QAInstance> = (0..30)
            .map(|i| fact(&format!("f{i:02}"), &format!("fact {i} word{}", i * 7 % 13)))
            .collect();
        let index = FactIndex::build(&facts, &embedder).unwrap();
        let texts: Vec<String> = (0..5).map(|i| format!("session text {i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vecs = embedder.embed(&refs).unwrap();
        let sessions: Vec<(String, Vec<f64>)> = (0..5)
            .map(|i| (format!("s{i}"), vecs[i].clone()))
            .collect();
        for c in hybrid_rerank(&sessions, &index, 6, 100).unwrap() {
            assert!(c.hybrid >= -0.5 && c.hybrid <= 1.0);
            assert!((c.hybrid - (c.s_freq + c.s_sim) / 2.0).abs() < 1e-12);
        }
    }
}
