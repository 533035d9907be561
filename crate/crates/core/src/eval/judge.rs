//! Yes/no LLM-as-judge scoring of generated answers.

use serde::{Deserialize, Serialize};

use crate::client::ChatClient;

/// Exact judge prompt; the reply is expected to start with yes or no.
pub fn judge_prompt(question: &str, gold: &str, response: &str) -> String {
    format!(
        "I will give you a question, a correct answer, and a response from a model. Please answer yes if the response contains the correct answer. Otherwise, answer no. If the response is equivalent to the correct answer or contains all the intermediate steps to get the correct answer, you should also answer yes. If the response only contains a subset of the information required by the answer, answer no.\n\nQuestion: {question}\nCorrect Answer: {gold}\nModel Response: {response}\n\nIs the model response correct? Answer yes or no only."
    )
}

/// One judged response. `correct` is `None` when the reply never parsed or
/// transport kept failing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub correct: Option<bool>,
    pub raw_reply: String,
}

/// Lenient parse: skip leading whitespace, read the first alphabetic run,
/// match yes/no case-insensitively.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    match word.to_ascii_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

pub struct Judge<'a> {
    client: &'a dyn ChatClient,
    retry_delay: std::time::Duration,
}

impl<'a> Judge<'a> {
    pub fn new(client: &'a dyn ChatClient) -> Self {
        Self {
            client,
            retry_delay: std::time::Duration::from_millis(50),
        }
    }

    /// Judge one response. Transport failures and unparseable replies are
    /// each retried once; a second miss yields an unjudged verdict rather
    /// than an error, so batch runs degrade instead of aborting.
    pub fn judge(&self, question: &str, gold: &str, response: &str) -> JudgeVerdict {
        let prompt = judge_prompt(question, gold, response);
        let mut last_reply = String::new();
        for attempt in 0..2 {
            match self.client.complete(&prompt) {
                Ok(reply) => {
                    last_reply = reply.clone();
                    if let Some(correct) = parse_verdict(&reply) {
                        return JudgeVerdict {
                            correct: Some(correct),
                            raw_reply: reply,
                        };
                    }
                }
                Err(e) => {
                    last_reply = format!("<transport error: {e}>");
                }
            }
            if attempt == 0 {
                std::thread::sleep(self.retry_delay);
            }
        }
        JudgeVerdict {
            correct: None,
            raw_reply: last_reply,
        }
    }
}
