//! LLM-as-judge scoring of free-form multi-ECG answers.
//!
//! The judge sees the question, one report per ECG and the prediction. There
//! is deliberately no field for a reference answer.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use anyecg_llm::{ChatClient, ChatRequest};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::Result;

pub const JUDGE_TEMPLATE: &str = "For the given question {question} about multiple ECG-QA, and the report {reports} corresponding to each ECG, score the answer below, where 0 means completely incorrect and 5 means completely correct. The answer is: <{prediction}>.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeInput {
    pub question: String,
    pub reports: Vec<String>,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: u8,
    pub rationale: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JudgeOutcome {
    Valid(JudgeVerdict),
    /// No score could be read from either attempt.
    Invalid { replies: Vec<String>, model: String },
}

impl JudgeOutcome {
    pub fn score(&self) -> Option<u8> {
        match self {
            Self::Valid(v) => Some(v.score),
            Self::Invalid { .. } => None,
        }
    }
}

pub fn judge_prompt(input: &JudgeInput) -> String {
    JUDGE_TEMPLATE
        .replace("{question}", &input.question)
        .replace("{reports}", &format!("{:?}", input.reports))
        .replace("{prediction}", &input.prediction)
}

/// First standalone integer in 0..=5.
pub fn extract_score(reply: &str) -> Option<u8> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?:^|[^0-9.])([0-5])(?:[^0-9]|\.[^0-9]|\.?$)").expect("static regex"));
    re.captures(reply).and_then(|c| c[1].parse().ok())
}

/// Asks the judge, retrying once when the reply carries no score.
pub fn judge_score<C: ChatClient + ?Sized>(input: &JudgeInput, client: &C) -> Result<JudgeOutcome> {
    let request = ChatRequest::user(judge_prompt(input)).with_temperature(0.0);
    let mut replies = Vec::with_capacity(2);
    for _ in 0..2 {
        let reply = client.complete(&request)?;
        if let Some(score) = extract_score(&reply) {
            return Ok(JudgeOutcome::Valid(JudgeVerdict {
                score,
                rationale: reply,
                model: client.model_tag(),
            }));
        }
        replies.push(reply);
    }
    Ok(JudgeOutcome::Invalid {
        replies,
        model: client.model_tag(),
    })
}

/// Scores every input with at most `max_in_flight` concurrent judge calls.
/// Outcomes keep the input order.
pub fn judge_all<C: ChatClient + ?Sized>(
    inputs: &[JudgeInput],
    client: &C,
    max_in_flight: usize,
) -> Result<Vec<JudgeOutcome>> {
    let workers = max_in_flight.clamp(1, inputs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<JudgeOutcome>>>> = inputs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(input) = inputs.get(i) else { break };
                let r = judge_score(input, client);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect()
}

/// Mean of the valid scores, with the number of invalid verdicts.
pub fn mean_score(outcomes: &[JudgeOutcome]) -> (Option<f64>, usize) {
    let valid: Vec<f64> = outcomes.iter().filter_map(|o| o.score()).map(f64::from).collect();
    let invalid = outcomes.len() - valid.len();
    if valid.is_empty() {
        (None, invalid)
    } else {
        (Some(valid.iter().sum::<f64>() / valid.len() as f64), invalid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyecg_llm::ScriptedClient;

    fn input() -> JudgeInput {
        JudgeInput {
            question: "What changed?".into(),
            reports: vec!["Sinus rhythm, Normal ECG".into(), "Sinus rhythm, Borderline ECG".into()],
            prediction: "Progression to borderline.".into(),
        }
    }

    #[test]
    fn lenient_extraction() {
        assert_eq!(extract_score("4"), Some(4));
        assert_eq!(extract_score("Score: 5/5"), Some(5));
        assert_eq!(extract_score("I'd give it a 3."), Some(3));
        assert_eq!(extract_score("10 out of 10"), None);
        assert_eq!(extract_score("great answer"), None);
    }

    #[test]
    fn retries_once_then_invalid() {
        let c = ScriptedClient::new(["great answer", "great answer"]);
        let out = judge_score(&input(), &c).unwrap();
        assert!(matches!(out, JudgeOutcome::Invalid { ref replies, .. } if replies.len() == 2));
        let c = ScriptedClient::new(["hmm", "Score: 5/5"]);
        assert_eq!(judge_score(&input(), &c).unwrap().score(), Some(5));
    }

    #[test]
    fn prompt_carries_inputs() {
        let p = judge_prompt(&input());
        assert!(p.contains("What changed?"));
        assert!(p.contains("Borderline ECG"));
        assert!(p.contains("<Progression to borderline.>"));
    }
}
