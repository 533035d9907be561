//! Personalization baseline prompt builders: RAG, PAG, DPL, LLM-TRSR.
//!
//! Every builder emits a deterministic prompt pair: the personalized prompt
//! and its history-free counterpart (question-only scaffold). Summary-based
//! methods (PAG, DPL, LLM-TRSR) require a chat client and cache one summary
//! per (user, method).

use std::cell::RefCell;
use std::collections::HashMap;
use std::str::FromStr;

use crate::bench::embed::Embedder;
use crate::client::ChatClient;
use crate::contrast::{ChatSession, QAInstance, UserRecord};
use crate::error::{Error, Result};
use crate::eval::cluster;
use crate::math::cosine;

pub const RAG_TEMPLATE_HEADER: &str = "I will give you several history chats between you and a user. Please answer the question based on the relevant chat history.";

const DPL_TEMPLATE_HEADER: &str = "I will give you several history chats between you and a user. Please answer the question based on the relevant chat history.\n\nTo help you generate your answer, here is a DPL (Difference-aware Personalization Learning) analysis of this user's typical cognitive context. Use this as a strategic clue to understand the nature of the user's interactions.";

const PAG_TEMPLATE_HEADER: &str = "I will give you a user profile summary and a single chat history between you and a user. Please answer the question based on the relevant chat history and the user profile summary.";

const TRSR_TEMPLATE_HEADER: &str = "I will give you a summary of the history chats between you and a user. Please answer the question based on the provided summary.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Rag,
    Pag,
    Dpl,
    LlmTrsr,
}

impl Method {
    pub fn id(&self) -> &'static str {
        match self {
            Method::Rag => "RAG",
            Method::Pag => "PAG",
            Method::Dpl => "DPL",
            Method::LlmTrsr => "LLM-TRSR",
        }
    }

    pub fn all() -> [Method; 4] {
        [Method::Rag, Method::Pag, Method::Dpl, Method::LlmTrsr]
    }

    pub fn needs_llm(&self) -> bool {
        !matches!(self, Method::Rag)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RAG" => Ok(Method::Rag),
            "PAG" => Ok(Method::Pag),
            "DPL" => Ok(Method::Dpl),
            "LLM-TRSR" | "LLM_TRSR" | "LLMTRSR" | "TRSR" => Ok(Method::LlmTrsr),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// Personalized prompt and its history-free counterpart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub with_history: String,
    pub without_history: String,
}

/// The question-only scaffold shared by every method's "without" condition.
pub fn without_history_prompt(question: &str) -> String {
    format!("Question: {question}\nAnswer:")
}

/// Render sessions as numbered blocks, in the given order.
pub fn render_sessions(sessions: &[&ChatSession]) -> String {
    sessions
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Session {}:\n{}", i + 1, s.rendered()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Sessions ranked by cosine similarity to the question, descending; ties
/// broken by session id so the ordering is total.
pub fn rank_sessions_by_question<'u>(
    question: &str,
    user: &'u UserRecord,
    embedder: &dyn Embedder,
) -> Result<Vec<&'u ChatSession>> {
    let q_vec = embedder.embed(&[question])?.remove(0);
    let texts: Vec<String> = user.sessions.iter().map(|s| s.rendered()).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vecs = embedder.embed(&refs)?;
    let mut scored: Vec<(usize, f64)> = vecs
        .iter()
        .enumerate()
        .map(|(i, v)| (i, cosine(&q_vec, v)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| user.sessions[a.0].session_id.cmp(&user.sessions[b.0].session_id))
    });
    Ok(scored.into_iter().map(|(i, _)| &user.sessions[i]).collect())
}

/// The full RAG prompt over an explicit session list (already ordered).
pub fn rag_prompt_for_sessions(
    question: &str,
    sessions: &[&ChatSession],
    current_date: &str,
) -> String {
    format!(
        "{RAG_TEMPLATE_HEADER}\n\nHistory Chats:\n{}\nCurrent Date: {current_date}\nQuestion: {question}\nAnswer:",
        render_sessions(sessions)
    )
}

pub struct PromptBuilder<'a> {
    method: Method,
    embedder: &'a dyn Embedder,
    llm: Option<&'a dyn ChatClient>,
    /// How many score-ranked sessions RAG keeps; `None` keeps all.
    pub rag_top_k: Option<usize>,
    /// Rendered into the RAG template so prompts stay byte-stable.
    pub current_date: String,
    /// k for the DPL history clustering.
    pub dpl_clusters: usize,
    summary_cache: RefCell<HashMap<(String, Method), String>>,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(
        method: Method,
        embedder: &'a dyn Embedder,
        llm: Option<&'a dyn ChatClient>,
    ) -> Result<Self> {
        if method.needs_llm() && llm.is_none() {
            return Err(Error::InvalidArgument(format!(
                "method {} requires an LLM client for summaries",
                method.id()
            )));
        }
        Ok(Self {
            method,
            embedder,
            llm,
            rag_top_k: None,
            current_date: "2025-01-01".to_string(),
            dpl_clusters: 8,
            summary_cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn method_id(&self) -> &'static str {
        self.method.id()
    }

    /// Build the (with, without) prompt pair for one question.
    pub fn build(&self, qa: &QAInstance, user: &UserRecord) -> Result<PromptPair> {
        let without_history = without_history_prompt(&qa.question);
        let with_history = match self.method {
            Method::Rag => self.build_rag(qa, user)?,
            Method::Pag => self.build_pag(qa, user)?,
            Method::Dpl => self.build_dpl(qa, user)?,
            Method::LlmTrsr => self.build_trsr(qa, user)?,
        };
        Ok(PromptPair {
            with_history,
            without_history,
        })
    }

    fn build_rag(&self, qa: &QAInstance, user: &UserRecord) -> Result<String> {
        let ranked = rank_sessions_by_question(&qa.question, user, self.embedder)?;
        let kept: Vec<&ChatSession> = match self.rag_top_k {
            Some(k) => ranked.into_iter().take(k).collect(),
            None => ranked,
        };
        Ok(rag_prompt_for_sessions(
            &qa.question,
            &kept,
            &self.current_date,
        ))
    }

    fn build_pag(&self, qa: &QAInstance, user: &UserRecord) -> Result<String> {
        let summary = self.summary(user, Method::Pag, |llm| {
            let history = render_sessions(&user.sessions.iter().collect::<Vec<_>>());
            llm.complete(&format!(
                "Summarize the following user chat history into a concise user profile. Capture stable preferences, recurring topics, and facts about the user.\n\nHistory:\n{history}\n\nProfile:"
            ))
        })?;
        let ranked = rank_sessions_by_question(&qa.question, user, self.embedder)?;
        let top = ranked
            .first()
            .ok_or_else(|| Error::EmptyGroup("user sessions".into()))?;
        Ok(format!(
            "{PAG_TEMPLATE_HEADER}\n\nSummary: {summary}\nHistory Chats:\nSession 1:\nSession Content: {}\nQuestion: {}\nAnswer:",
            top.rendered(),
            qa.question
        ))
    }

    fn build_dpl(&self, qa: &QAInstance, user: &UserRecord) -> Result<String> {
        let analysis = self.summary(user, Method::Dpl, |llm| {
            let reps = self.dpl_representatives(user)?;
            let rep_block = reps
                .iter()
                .enumerate()
                .map(|(i, r)| format!("Representative {}:\n{r}", i + 1))
                .collect::<Vec<_>>()
                .join("\n");
            llm.complete(&format!(
                "Analyze this user's typical cognitive context by contrasting their chat history against the representative interaction profiles below. Describe what distinguishes this user.\n\nRepresentative profiles:\n{rep_block}\n\nUser history:\n{}\n\nAnalysis:",
                render_sessions(&user.sessions.iter().collect::<Vec<_>>())
            ))
        })?;
        let utterances: Vec<String> = user
            .sessions
            .iter()
            .flat_map(|s| s.turns.iter())
            .filter(|(speaker, _)| speaker == "user")
            .map(|(_, text)| text.clone())
            .collect();
        Ok(format!(
            "{DPL_TEMPLATE_HEADER}\n\nDPL Context Analysis: {analysis}\nHistory Chats: {}\nQuestion: {}\nAnswer:",
            utterances.join("\n"),
            qa.question
        ))
    }

    fn build_trsr(&self, qa: &QAInstance, user: &UserRecord) -> Result<String> {
        let summary = self.summary(user, Method::LlmTrsr, |llm| {
            // Recurrent refinement: fold sessions into the running profile
            // one block at a time.
            let mut running = String::from("(empty)");
            for session in &user.sessions {
                running = llm.complete(&format!(
                    "Update the user profile summary with the new session. Keep it concise and cumulative.\n\nCurrent Summary: {running}\nNew Session:\n{}\n\nUpdated Summary:",
                    session.rendered()
                ))?;
            }
            Ok(running)
        })?;
        Ok(format!(
            "{TRSR_TEMPLATE_HEADER}\n\nUser Summary: {summary}\nQuestion: {}\nAnswer:",
            qa.question
        ))
    }

    fn summary<F>(&self, user: &UserRecord, method: Method, produce: F) -> Result<String>
    where
        F: FnOnce(&dyn ChatClient) -> Result<String>,
    {
        let key = (user.user_id.clone(), method);
        if let Some(hit) = self.summary_cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let llm = self.llm.ok_or_else(|| {
            Error::InvalidArgument(format!("method {} requires an LLM client", method.id()))
        })?;
        let summary = produce(llm)?;
        self.summary_cache.borrow_mut().insert(key, summary.clone());
        Ok(summary)
    }

    /// Medoid sessions of the user's history clusters, used by the DPL
    /// analysis as representative interaction profiles.
    fn dpl_representatives(&self, user: &UserRecord) -> Result<Vec<String>> {
        let texts: Vec<String> = user.sessions.iter().map(|s| s.rendered()).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vecs = self.embedder.embed(&refs)?;
        let k = self.dpl_clusters.min(vecs.len()).max(1);
        let medoids = cluster::kmeans_medoids(&vecs, k, 0)?;
        Ok(medoids.into_iter().map(|i| texts[i].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::embed::HashEmbedder;
    use crate::client::MockClient;
    use crate::contrast::QaKind;

    fn user() -> UserRecord {
        let session = |id: &str, ts: &str, text: &str| ChatSession {
            session_id: id.into(),
            timestamp: ts.into(),
            turns: vec![
                ("user".into(), text.into()),
                ("assistant".into(), format!("about {text}")),
            ],
        };
        UserRecord {
            user_id: "u1".into(),
            sessions: vec![
                session("s1", "2024-01-01", "favorite hiking trails in the alps"),
                session("s2", "2024-02-01", "sourdough bread proofing schedule"),
            ],
            personalized_qa: QAInstance {
                qa_id: "p1".into(),
                user_id: "u1".into(),
                kind: QaKind::Personalized,
                question: "What hobby did I pick up?".into(),
                gold_answer: "hiking".into(),
            },
        }
    }

    fn qa() -> QAInstance {
        QAInstance {
            qa_id: "f1".into(),
            user_id: "u1".into(),
            kind: QaKind::Factual,
            question: "What is the tallest mountain in the alps?".into(),
            gold_answer: "Mont Blanc".into(),
        }
    }

    #[test]
    fn rag_prompt_has_history_then_question_order() {
        let embedder = HashEmbedder::default();
        let builder = PromptBuilder::new(Method::Rag, &embedder, None).unwrap();
        let pair = builder.build(&qa(), &user()).unwrap();
        let h = pair.with_history.find("History Chats:").unwrap();
        let q = pair.with_history.find("Question:").unwrap();
        let a = pair.with_history.find("Answer:").unwrap();
        assert!(h < q && q < a);
        assert!(pair.with_history.contains("Session 1:"));
        assert!(pair.with_history.contains("Session 2:"));
        assert_eq!(
            pair.without_history,
            "Question: What is the tallest mountain in the alps?\nAnswer:"
        );
    }

    #[test]
    fn rag_empty_retrieval_keeps_scaffold_with_empty_history() {
        let embedder = HashEmbedder::default();
        let mut builder = PromptBuilder::new(Method::Rag, &embedder, None).unwrap();
        builder.rag_top_k = Some(0);
        let pair = builder.build(&qa(), &user()).unwrap();
        assert!(pair.with_history.contains("History Chats:\n\nCurrent Date:"));
        assert!(!pair.with_history.contains("Session 1:"));
    }

    #[test]
    fn prompts_are_deterministic() {
        let embedder = HashEmbedder::default();
        let builder = PromptBuilder::new(Method::Rag, &embedder, None).unwrap();
        let a = builder.build(&qa(), &user()).unwrap();
        let b = builder.build(&qa(), &user()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trsr_prompt_substitutes_summary() {
        let embedder = HashEmbedder::default();
        let mock = MockClient::constant("S");
        let builder = PromptBuilder::new(Method::LlmTrsr, &embedder, Some(&mock)).unwrap();
        let pair = builder.build(&qa(), &user()).unwrap();
        assert!(pair.with_history.contains("User Summary: S"));
    }

    #[test]
    fn pag_summary_is_cached_per_user() {
        use std::cell::RefCell;
        struct Counting(RefCell<usize>);
        impl ChatClient for Counting {
            fn complete(&self, _: &str) -> Result<String> {
                *self.0.borrow_mut() += 1;
                Ok(format!("summary v{}", self.0.borrow()))
            }
            fn id(&self) -> String {
                "counting".into()
            }
        }
        let embedder = HashEmbedder::default();
        let counting = Counting(RefCell::new(0));
        let builder = PromptBuilder::new(Method::Pag, &embedder, Some(&counting)).unwrap();
        let a = builder.build(&qa(), &user()).unwrap();
        let b = builder.build(&qa(), &user()).unwrap();
        assert_eq!(a, b);
        assert_eq!(*counting.0.borrow(), 1);
    }

    #[test]
    fn summary_methods_require_client() {
        let embedder = HashEmbedder::default();
        assert!(PromptBuilder::new(Method::Pag, &embedder, None).is_err());
        assert!(PromptBuilder::new(Method::Dpl, &embedder, None).is_err());
        assert!(PromptBuilder::new(Method::LlmTrsr, &embedder, None).is_err());
    }

    #[test]
    fn method_ids_parse_round_trip() {
        for m in Method::all() {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        assert!("unknown".parse::<Method>().is_err());
    }
}
