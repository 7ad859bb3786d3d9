//! Deterministic in-process generator that writes syntactically valid
//! rationales with a scripted final polarity per example.

use std::collections::HashMap;

use super::{BackendFailure, GenerationRequest, TextBackend};
use crate::corpus::{Example, Polarity};
use crate::prompts::PromptMode;

/// What the mock concludes for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockAnswer {
    Label(Polarity),
    /// States the first label, then hedges toward the second.
    Hedged(Polarity, Polarity),
    /// Reasons without ever naming a polarity.
    NoLabel,
    Refuse,
}

#[derive(Debug, Clone)]
struct Script {
    aspect_term: String,
    answer: MockAnswer,
}

#[derive(Debug, Clone)]
pub struct TemplatedMock {
    scripts: HashMap<String, Script>,
    fallback: MockAnswer,
}

fn opinion_word(p: Polarity) -> &'static str {
    match p {
        Polarity::Positive => "favourable",
        Polarity::Negative => "critical",
        Polarity::Neutral => "matter-of-fact",
    }
}

impl TemplatedMock {
    pub fn new(fallback: MockAnswer) -> Self {
        TemplatedMock {
            scripts: HashMap::new(),
            fallback,
        }
    }

    pub fn script(&mut self, example: &Example, answer: MockAnswer) -> &mut Self {
        self.scripts.insert(
            example.id.clone(),
            Script {
                aspect_term: example.aspect_term.clone(),
                answer,
            },
        );
        self
    }

    /// Scripts every example to answer its gold label.
    pub fn gold(examples: &[Example]) -> Self {
        let mut mock = TemplatedMock::new(MockAnswer::NoLabel);
        for ex in examples {
            mock.script(ex, MockAnswer::Label(ex.polarity));
        }
        mock
    }

    fn conclusion(answer: MockAnswer, aspect: &str) -> String {
        match answer {
            MockAnswer::Label(p) => format!("Therefore, the sentiment polarity towards {aspect} is {p}."),
            MockAnswer::Hedged(a, b) => format!(
                "Therefore, the sentiment polarity towards {aspect} is {a}, although it could also be read as {b}."
            ),
            MockAnswer::NoLabel | MockAnswer::Refuse => {
                format!("Therefore, the sentiment towards {aspect} cannot be determined with confidence.")
            }
        }
    }

    fn three_hop(script: &Script) -> String {
        let lead = match script.answer {
            MockAnswer::Label(p) | MockAnswer::Hedged(p, _) => opinion_word(p),
            _ => "unclear",
        };
        let aspect = &script.aspect_term;
        format!(
            "The mentioned aspect towards {aspect} is about the {aspect} this review describes. \
             The underlying opinion towards {aspect} is about the reviewer's {lead} impression of it. {}",
            Self::conclusion(script.answer, aspect)
        )
    }
}

impl TextBackend for TemplatedMock {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendFailure> {
        let prompt = &request.prompt;
        if prompt.mode == PromptMode::Verify {
            return Ok("True".into());
        }
        let script = self.scripts.get(&prompt.example_id).cloned().unwrap_or(Script {
            aspect_term: "the aspect".into(),
            answer: self.fallback,
        });
        if script.answer == MockAnswer::Refuse {
            return Err(BackendFailure::Refusal {
                payload: format!("{{\"refused\":\"{}\"}}", prompt.example_id),
            });
        }
        Ok(match prompt.mode {
            PromptMode::ThRe | PromptMode::ThRa => Self::three_hop(&script),
            PromptMode::Direct => match script.answer {
                MockAnswer::Label(p) | MockAnswer::Hedged(p, _) => p.to_string(),
                _ => "unsure".into(),
            },
            _ => format!(
                "The reviewer is talking about {}. {}",
                script.aspect_term,
                Self::conclusion(script.answer, &script.aspect_term)
            ),
        })
    }
}
