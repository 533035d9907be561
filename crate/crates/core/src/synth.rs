//! Seeded synthetic corpora for offline runs and validation fixtures.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::Backend;
use crate::contrast::{ChatSession, ContrastiveExample, Label, QAInstance, QaKind, UserRecord};

const TOPICS: &[&str] = &[
    "sourdough baking",
    "alpine hiking",
    "chess openings",
    "supernova remnants",
    "marathon training",
    "watercolor painting",
    "beekeeping",
    "roman aqueducts",
    "tide pool ecology",
    "vintage synthesizers",
    "orchid care",
    "glacier formation",
    "coffee roasting",
    "medieval castles",
    "birdsong dialects",
    "urban gardening",
    "coral bleaching",
    "typeface design",
    "fermented foods",
    "radio astronomy",
];

const FACT_SUBJECTS: &[&str] = &[
    "the longest river in europe",
    "the author of the first printed atlas",
    "the boiling point of sulfur",
    "the capital moved in 1960",
    "the element named after a village in scotland",
    "the year the first transatlantic cable worked",
    "the mountain range separating two continents",
    "the composer of the unfinished symphony",
    "the deepest lake on earth",
    "the inventor of the mechanical loom",
    "the painter of the night watch",
    "the planet with the shortest day",
    "the treaty that ended the thirty years war",
    "the alloy of copper and tin",
    "the strait between two oceans",
    "the library founded in alexandria",
    "the currency used before the euro in portugal",
    "the astronomer who catalogued nebulae",
    "the desert crossing the equator",
    "the bridge completed in 1883",
];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

/// Users with topic-coherent sessions and one personalized question each.
pub fn synthetic_users(n_users: usize, sessions_per_user: usize, seed: u64) -> Vec<UserRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_users)
        .map(|u| {
            let user_id = format!("u{u:03}");
            let favorite = pick(&mut rng, TOPICS);
            let sessions = (0..sessions_per_user)
                .map(|s| {
                    let topic = if s == 0 { favorite } else { pick(&mut rng, TOPICS) };
                    let detail = rng.gen_range(1..100);
                    ChatSession {
                        session_id: format!("{user_id}-s{s:02}"),
                        timestamp: format!("2024-{:02}-{:02}", 1 + s / 28, 1 + s % 28),
                        turns: vec![
                            (
                                "user".into(),
                                format!("I spent the weekend on {topic}, any tips for step {detail}?"),
                            ),
                            (
                                "assistant".into(),
                                format!("For {topic}, start with the basics of step {detail}."),
                            ),
                        ],
                    }
                })
                .collect();
            let personalized_qa = QAInstance {
                qa_id: format!("{user_id}-pq"),
                user_id: user_id.clone(),
                kind: QaKind::Personalized,
                question: format!("Which hobby have I been asking you about, {user_id}?"),
                gold_answer: favorite.to_string(),
            };
            UserRecord {
                user_id,
                sessions,
                personalized_qa,
            }
        })
        .collect()
}

/// A factual question pool with short gold answers.
pub fn synthetic_facts(n: usize, seed: u64) -> Vec<QAInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let subject = pick(&mut rng, FACT_SUBJECTS);
            let qualifier = pick(&mut rng, TOPICS);
            QAInstance {
                qa_id: format!("f{i:03}"),
                user_id: String::new(),
                kind: QaKind::Factual,
                question: format!("What is {subject}? (appears near notes on {qualifier})"),
                gold_answer: format!("answer-{i:03}"),
            }
        })
        .collect()
}

/// Controlled layer-scan fixture: identical with/without prompts, so every
/// layer's natural deviation is zero and a planted single-block offset is
/// the only signal. Labels are assigned directly; no judging involved.
pub fn planted_contrast_corpus(
    backend: &dyn Backend,
    seed: u64,
    n_per_group: usize,
) -> Vec<ContrastiveExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_text = |len: usize| -> String {
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(1..64u32)).collect();
        backend.decode(&ids)
    };
    let mut examples = Vec::new();
    for i in 0..n_per_group {
        for label in [Label::FactualDegraded, Label::PersonalizedBeneficial] {
            let kind = match label {
                Label::FactualDegraded => QaKind::Factual,
                _ => QaKind::Personalized,
            };
            let question = rand_text(8);
            let answer = rand_text(5);
            examples.push(ContrastiveExample {
                qa: QAInstance {
                    qa_id: format!("plant-{i:02}-{}", if kind == QaKind::Factual { "f" } else { "p" }),
                    user_id: "synthetic".into(),
                    kind,
                    question: question.clone(),
                    gold_answer: answer.clone(),
                },
                method: "RAG".into(),
                prompt_with: question.clone(),
                prompt_without: question,
                answer_with: answer.clone(),
                answer_without: answer,
                verdict_with: Some(label != Label::FactualDegraded),
                verdict_without: Some(label == Label::FactualDegraded),
                label,
            });
        }
    }
    examples
}
