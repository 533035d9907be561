//! Teacher–student knowledge-transfer simulation.
//!
//! A student client asks a factual question it could not answer unaided;
//! the teacher backend answers over multiple turns until the student emits
//! the end-of-learning sentinel or the turn cap is hit. The student then
//! sits a final exam from the transcript alone. Arms differ only in the
//! teacher: history-free (control), personalized, or personalized with
//! steering — the steered arm's history-free counterpart prompt is exactly
//! the control prompt, so full hard restoration reproduces the control
//! teacher turn for turn.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{generated_suffix, Backend};
use crate::client::ChatClient;
use crate::contrast::{ChatSession, QAInstance};
use crate::error::{Error, Result};
use crate::eval::judge::Judge;
use crate::eval::prompts::render_sessions;
use crate::eval::stats::{paired_t_test, TTestResult};
use crate::steer::{steered_decode, SteerOptions, SteeringArtifact};

/// The student's end-of-learning marker: terminates the session only as an
/// exact standalone final line.
pub const SENTINEL: &str = "END_OF_LEARNING";

pub fn ends_with_sentinel(text: &str) -> bool {
    text.trim_end()
        .lines()
        .next_back()
        .map(|line| line.trim() == SENTINEL)
        .unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Personalized,
    PersonalizedSteered,
}

impl Arm {
    pub fn label(&self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Personalized => "personalized",
            Arm::PersonalizedSteered => "personalized_steered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Sentinel,
    MaxTurns,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExamVerdict {
    Correct,
    Incorrect,
    Unjudged,
}

/// One tutoring session. The opening ask is the question itself and is not
/// duplicated as a turn; entries alternate teacher/student from the first
/// teacher answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TutoringTranscript {
    pub qa_id: String,
    pub arm: Arm,
    pub turns: Vec<(String, String)>,
    pub terminated_by: Termination,
    pub final_answer: String,
    pub exam_verdict: ExamVerdict,
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

const CONTROL_TEACHER_HEADER: &str = "You are a helpful and factual AI assistant. Answer the question in detail. Explain it step by step as if you are teaching a beginner.";

const STUDENT_HEADER: &str = "You are 'Xiaoming', a curious but cautious middle school student. Your goal is to fully understand the topic your teacher is explaining.\n\nYour task is to follow these rules strictly:\n\nAfter the teacher gives an answer, you MUST evaluate if you have fully understood it.\n\nIf you have any doubts, are confused, or want more details, you MUST ask a specific follow-up question. Do not simply say \"I understand\".\n\nIf and only if you are completely confident that you have no more questions and have fully understood the topic, your response MUST end with the exact, standalone phrase on a new line: END_OF_LEARNING. This is a special command, not a sentence.";

fn render_turns(turns: &[(String, String)]) -> String {
    turns
        .iter()
        .map(|(speaker, text)| {
            let label = if speaker == "teacher" { "Teacher" } else { "Student" };
            format!("{label}: {text}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn conversation_block(turns: &[(String, String)]) -> String {
    if turns.is_empty() {
        String::new()
    } else {
        format!("{}\n", render_turns(turns))
    }
}

/// Control-arm teacher prompt; byte-identical across arms for the same
/// conversation state, which is what the steered arm restores to.
pub fn control_teacher_prompt(question: &str, turns: &[(String, String)]) -> String {
    format!(
        "{CONTROL_TEACHER_HEADER}\n\nQuestion: {question}\n{}Teacher:",
        conversation_block(turns)
    )
}

/// Personalized-arm teacher prompt with the user's history inline.
pub fn personalized_teacher_prompt(
    question: &str,
    history: &[ChatSession],
    turns: &[(String, String)],
) -> String {
    let sessions: Vec<&ChatSession> = history.iter().collect();
    format!(
        "History Chats: {}\nPlease answer the question based on the relevant chat history concisely.\n\nQuestion: {question}\n{}Teacher:",
        render_sessions(&sessions),
        conversation_block(turns)
    )
}

fn student_prompt(question: &str, turns: &[(String, String)]) -> String {
    format!(
        "{STUDENT_HEADER}\n\nOriginal Question: {question}\nConversation so far:\n{}\nYour reply:",
        render_turns(turns)
    )
}

fn final_exam_prompt(question: &str, turns: &[(String, String)]) -> String {
    format!(
        "You are 'Xiaoming', a student who has just finished a tutoring session.\nBased ONLY on the entire conversation history provided below, give your final, concise, and definitive answer to the original question.\n\nOriginal Question: {question}\nFull Conversation History: {}\n\nYour Final Answer:",
        render_turns(turns)
    )
}

fn exam_judge_prompt(question: &str, gold: &str, student_answer: &str) -> String {
    format!(
        "You are a strict and impartial evaluator. Your task is to determine if the student's answer is factually correct based on the provided ground truth.\n\nOriginal Question: {question}\nGround Truth Answer: {gold}\nStudent's Final Answer: {student_answer}\n\nIs the \"Student's Final Answer\" factually correct and consistent with the \"Ground Truth Answer\"?\nRespond with only the single word: Correct or Incorrect."
    )
}

fn parse_exam_verdict(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    match word.to_ascii_lowercase().as_str() {
        "correct" => Some(true),
        "incorrect" => Some(false),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Prefilter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefilterReport {
    pub n_input: usize,
    pub n_known: usize,
    pub n_failed: usize,
}

/// Keep only questions the student answers incorrectly unaided. Client
/// failures exclude the question and are counted.
pub fn prefilter_known(
    questions: &[QAInstance],
    student: &dyn ChatClient,
    judge: &Judge,
) -> (Vec<QAInstance>, PrefilterReport) {
    let mut unknown = Vec::new();
    let mut n_known = 0usize;
    let mut n_failed = 0usize;
    for qa in questions {
        let prompt = format!(
            "Answer the following question.\n\nQuestion: {}\nAnswer:",
            qa.question
        );
        match student.complete(&prompt) {
            Ok(answer) => match judge.judge(&qa.question, &qa.gold_answer, &answer).correct {
                Some(true) => n_known += 1,
                Some(false) => unknown.push(qa.clone()),
                None => n_failed += 1,
            },
            Err(_) => n_failed += 1,
        }
    }
    let report = PrefilterReport {
        n_input: questions.len(),
        n_known,
        n_failed,
    };
    (unknown, report)
}

// ---------------------------------------------------------------------------
// Tutoring loop
// ---------------------------------------------------------------------------

pub struct SimOptions {
    pub max_turns: usize,
    pub max_new_tokens: usize,
    pub steer: SteerOptions,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            max_turns: 8,
            max_new_tokens: 500,
            steer: SteerOptions::default(),
        }
    }
}

/// Run one tutoring session. `history` and `artifact` are required by the
/// personalized and steered arms respectively.
pub fn run_tutoring(
    qa: &QAInstance,
    arm: Arm,
    teacher: &dyn Backend,
    student: &dyn ChatClient,
    history: Option<&[ChatSession]>,
    artifact: Option<&SteeringArtifact>,
    opts: &SimOptions,
) -> Result<TutoringTranscript> {
    if matches!(arm, Arm::Personalized | Arm::PersonalizedSteered) && history.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{} arm needs user history",
            arm.label()
        )));
    }
    if arm == Arm::PersonalizedSteered && artifact.is_none() {
        return Err(Error::InvalidArgument(
            "steered arm needs a steering artifact".into(),
        ));
    }

    let mut turns: Vec<(String, String)> = Vec::new();
    let mut terminated_by = Termination::MaxTurns;

    for _round in 0..opts.max_turns {
        let teacher_reply = match arm {
            Arm::Control => {
                let prompt = control_teacher_prompt(&qa.question, &turns);
                let tokens = teacher.encode(&prompt);
                let full = teacher.generate(&tokens, None, opts.max_new_tokens)?;
                teacher.decode(&generated_suffix(&full, tokens.len()))
            }
            Arm::Personalized => {
                let prompt =
                    personalized_teacher_prompt(&qa.question, history.unwrap(), &turns);
                let tokens = teacher.encode(&prompt);
                let full = teacher.generate(&tokens, None, opts.max_new_tokens)?;
                teacher.decode(&generated_suffix(&full, tokens.len()))
            }
            Arm::PersonalizedSteered => {
                let with = personalized_teacher_prompt(&qa.question, history.unwrap(), &turns);
                // The non-personalized counterpart of this teacher is the
                // control teacher on the same conversation state.
                let without = control_teacher_prompt(&qa.question, &turns);
                let mut steer_opts = opts.steer.clone();
                steer_opts.max_new_tokens = opts.max_new_tokens;
                steered_decode(&with, &without, artifact.unwrap(), teacher, &steer_opts)?.text
            }
        };
        turns.push(("teacher".into(), teacher_reply));

        let student_reply = match student.complete(&student_prompt(&qa.question, &turns)) {
            Ok(reply) => reply,
            Err(_) => {
                return Ok(TutoringTranscript {
                    qa_id: qa.qa_id.clone(),
                    arm,
                    turns,
                    terminated_by: Termination::Aborted,
                    final_answer: String::new(),
                    exam_verdict: ExamVerdict::Unjudged,
                });
            }
        };
        turns.push(("student".into(), student_reply.clone()));
        if ends_with_sentinel(&student_reply) {
            terminated_by = Termination::Sentinel;
            break;
        }
    }

    let final_answer = student
        .complete(&final_exam_prompt(&qa.question, &turns))
        .unwrap_or_default();

    Ok(TutoringTranscript {
        qa_id: qa.qa_id.clone(),
        arm,
        turns,
        terminated_by,
        final_answer,
        exam_verdict: ExamVerdict::Unjudged,
    })
}

// ---------------------------------------------------------------------------
// Exam and arm comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmAccuracy {
    pub arm: Arm,
    pub n: usize,
    pub n_correct: usize,
    pub n_unjudged: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmComparison {
    pub arm_a: Arm,
    pub arm_b: Arm,
    /// Mean per-question difference (a - b) of 0/1 outcomes.
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub accuracies: Vec<ArmAccuracy>,
    pub comparisons: Vec<ArmComparison>,
}

impl SimReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("arm,n,n_correct,n_unjudged,accuracy\n");
        for a in &self.accuracies {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                a.arm.label(),
                a.n,
                a.n_correct,
                a.n_unjudged,
                a.accuracy
            ));
        }
        out
    }
}

/// Judge every final answer and compare arms pairwise with a paired t-test
/// over per-question 0/1 outcomes. All arms must cover the same questions.
pub fn exam_and_score(
    transcripts: &mut [TutoringTranscript],
    judge_client: &dyn ChatClient,
    golds: &std::collections::HashMap<String, QAInstance>,
) -> Result<SimReport> {
    // arm -> qa_id -> outcome
    let mut outcomes: BTreeMap<Arm, BTreeMap<String, f64>> = BTreeMap::new();
    for transcript in transcripts.iter_mut() {
        let qa = golds.get(&transcript.qa_id).ok_or_else(|| {
            Error::InvalidArgument(format!("no gold answer for {}", transcript.qa_id))
        })?;
        let mut verdict = None;
        for _ in 0..2 {
            match judge_client.complete(&exam_judge_prompt(
                &qa.question,
                &qa.gold_answer,
                &transcript.final_answer,
            )) {
                Ok(reply) => {
                    if let Some(v) = parse_exam_verdict(&reply) {
                        verdict = Some(v);
                        break;
                    }
                }
                Err(_) => continue,
            }
        }
        transcript.exam_verdict = match verdict {
            Some(true) => ExamVerdict::Correct,
            Some(false) => ExamVerdict::Incorrect,
            None => ExamVerdict::Unjudged,
        };
        outcomes
            .entry(transcript.arm)
            .or_default()
            .insert(
                transcript.qa_id.clone(),
                f64::from(transcript.exam_verdict == ExamVerdict::Correct),
            );
    }

    let question_sets: Vec<Vec<&String>> = outcomes
        .values()
        .map(|m| m.keys().collect::<Vec<_>>())
        .collect();
    for pair in question_sets.windows(2) {
        if pair[0] != pair[1] {
            return Err(Error::InvalidArgument(
                "arms cover different question sets".into(),
            ));
        }
    }

    let mut accuracies = Vec::new();
    for (arm, per_question) in &outcomes {
        let n = per_question.len();
        let n_correct = per_question.values().filter(|&&v| v == 1.0).count();
        let n_unjudged = transcripts
            .iter()
            .filter(|t| t.arm == *arm && t.exam_verdict == ExamVerdict::Unjudged)
            .count();
        accuracies.push(ArmAccuracy {
            arm: *arm,
            n,
            n_correct,
            n_unjudged,
            accuracy: n_correct as f64 / n.max(1) as f64,
        });
    }

    let arms: Vec<Arm> = outcomes.keys().copied().collect();
    let mut comparisons = Vec::new();
    for i in 0..arms.len() {
        for j in i + 1..arms.len() {
            let a: Vec<f64> = outcomes[&arms[i]].values().copied().collect();
            let b: Vec<f64> = outcomes[&arms[j]].values().copied().collect();
            let TTestResult { t, p_value, .. } = paired_t_test(&a, &b)?;
            comparisons.push(ArmComparison {
                arm_a: arms[i],
                arm_b: arms[j],
                mean_difference: crate::math::mean(&a) - crate::math::mean(&b),
                t_statistic: t,
                p_value,
            });
        }
    }

    Ok(SimReport {
        accuracies,
        comparisons,
    })
}
