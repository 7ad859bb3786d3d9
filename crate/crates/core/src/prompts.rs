//! Prompt templates for rationale generation and verification.
//!
//! Placeholders are substituted literally; nothing is escaped. The sentence
//! is always wrapped in double quotes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Direct,
    Re,
    Ra,
    ZeroCot,
    ThRe,
    ThRa,
    Verify,
}

impl PromptMode {
    pub const ALL: [PromptMode; 7] = [
        PromptMode::Direct,
        PromptMode::Re,
        PromptMode::Ra,
        PromptMode::ZeroCot,
        PromptMode::ThRe,
        PromptMode::ThRa,
        PromptMode::Verify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Direct => "direct",
            PromptMode::Re => "re",
            PromptMode::Ra => "ra",
            PromptMode::ZeroCot => "zero_cot",
            PromptMode::ThRe => "th_re",
            PromptMode::ThRa => "th_ra",
            PromptMode::Verify => "verify",
        }
    }

    /// Modes that reveal the gold label to the generator.
    pub fn reveals_gold(self) -> bool {
        matches!(self, PromptMode::Ra | PromptMode::ThRa)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown prompt mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("verification prompt needs a non-empty rationale")]
    EmptyRationale,
    #[error("mode {0} is not a baseline mode")]
    NotBaseline(PromptMode),
    #[error("mode {0} cannot be rendered from an example alone")]
    NeedsRationale(PromptMode),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub mode: PromptMode,
    pub example_id: String,
    pub text: String,
}

/// `Given the sentence "{sentence}", what is the sentiment polarity towards {aspect}?`
pub fn direct_question(example: &Example) -> String {
    format!(
        "Given the sentence \"{}\", what is the sentiment polarity towards {}?",
        example.sentence, example.aspect_term
    )
}

/// The reasoning question clause, ending in `, why?`.
pub fn reasoning_question(example: &Example) -> String {
    format!(
        "Given the sentence \"{}\", what is the sentiment polarity towards {}, why?",
        example.sentence, example.aspect_term
    )
}

/// The rationalization question clause, which states the gold label.
pub fn rationalization_question(example: &Example) -> String {
    format!(
        "Given the sentence \"{}\", the sentiment polarity towards {} is {}, why?",
        example.sentence, example.aspect_term, example.polarity
    )
}

const STEP_BY_STEP: &str = "Let's think step by step.";

fn three_hop_scaffold(aspect: &str) -> String {
    format!(
        "{STEP_BY_STEP} The mentioned aspect towards {aspect} is about ... \
         The underlying opinion towards {aspect} is about ... \
         Therefore, the sentiment polarity towards {aspect} is ..."
    )
}

fn rendered(mode: PromptMode, example: &Example, text: String) -> RenderedPrompt {
    RenderedPrompt {
        mode,
        example_id: example.id.clone(),
        text,
    }
}

/// Three-hop reasoning: aspect, then opinion, then polarity, without the
/// gold label.
pub fn render_th_re(example: &Example) -> RenderedPrompt {
    let text = format!(
        "{} {}",
        reasoning_question(example),
        three_hop_scaffold(&example.aspect_term)
    );
    rendered(PromptMode::ThRe, example, text)
}

/// Three-hop rationalization: same scaffold, with the gold label given.
pub fn render_th_ra(example: &Example) -> RenderedPrompt {
    let text = format!(
        "{} {}",
        rationalization_question(example),
        three_hop_scaffold(&example.aspect_term)
    );
    rendered(PromptMode::ThRa, example, text)
}

pub fn render_baseline(example: &Example, mode: PromptMode) -> Result<RenderedPrompt, PromptError> {
    let text = match mode {
        PromptMode::Direct => direct_question(example),
        PromptMode::Re => reasoning_question(example),
        PromptMode::ZeroCot => format!("{} {STEP_BY_STEP}", reasoning_question(example)),
        PromptMode::Ra => rationalization_question(example),
        other => return Err(PromptError::NotBaseline(other)),
    };
    Ok(rendered(mode, example, text))
}

pub fn render_verify(example_id: &str, rationale_text: &str) -> Result<RenderedPrompt, PromptError> {
    if rationale_text.is_empty() {
        return Err(PromptError::EmptyRationale);
    }
    Ok(RenderedPrompt {
        mode: PromptMode::Verify,
        example_id: example_id.to_owned(),
        text: format!(
            "Given the rationale \"{rationale_text}\", Please verify whether the above given rationale is reasonable. Return True or False."
        ),
    })
}

/// Renders any generation mode for an example. `verify` needs a rationale
/// and goes through [`render_verify`] instead.
pub fn render(example: &Example, mode: PromptMode) -> Result<RenderedPrompt, PromptError> {
    match mode {
        PromptMode::ThRe => Ok(render_th_re(example)),
        PromptMode::ThRa => Ok(render_th_ra(example)),
        PromptMode::Verify => Err(PromptError::NeedsRationale(mode)),
        baseline => render_baseline(example, baseline),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Polarity, Split};

    fn price(polarity: Polarity) -> Example {
        Example {
            id: "r1".into(),
            sentence: "a cheaper price should not equal a \"cheap\" product.".into(),
            aspect_term: "price".into(),
            polarity,
            implicit: true,
            split: Split::Test,
        }
    }

    #[test]
    fn th_re_has_the_three_anchors() {
        let p = render_th_re(&price(Polarity::Positive));
        assert_eq!(p.mode, PromptMode::ThRe);
        assert!(p.text.starts_with(
            "Given the sentence \"a cheaper price should not equal a \"cheap\" product.\", what is"
        ));
        assert!(p.text.contains("The mentioned aspect towards price is about ..."));
        assert!(p.text.contains("The underlying opinion towards price is about ..."));
        assert!(p.text.ends_with("Therefore, the sentiment polarity towards price is ..."));
        assert!(!p.text.contains("positive"));
    }

    #[test]
    fn metacharacters_are_literal() {
        let mut e = price(Polarity::Neutral);
        e.sentence = "the screen (13\") is bright".into();
        e.aspect_term = "screen (13\")".into();
        let p = render_th_re(&e);
        assert!(p.text.contains("towards screen (13\") is about ..."));
    }

    #[test]
    fn empty_sentence_renders_empty_quotes() {
        let mut e = price(Polarity::Neutral);
        e.sentence.clear();
        assert!(render_th_re(&e).text.starts_with("Given the sentence \"\", "));
    }

    #[test]
    fn th_ra_states_gold() {
        let p = render_th_ra(&price(Polarity::Positive));
        assert!(p.text.contains("towards price is positive, why?"));
        let n = render_th_ra(&price(Polarity::Neutral));
        assert!(n.text.contains("is neutral, why?"));
        assert_eq!(n, render_th_ra(&price(Polarity::Neutral)));
    }

    #[test]
    fn baselines() {
        let e = price(Polarity::Positive);
        let direct = render_baseline(&e, PromptMode::Direct).unwrap().text;
        assert!(!direct.contains("why"));
        assert!(direct.ends_with("towards price?"));
        let re = render_baseline(&e, PromptMode::Re).unwrap().text;
        assert!(re.ends_with("what is the sentiment polarity towards price, why?"));
        let zc = render_baseline(&e, PromptMode::ZeroCot).unwrap().text;
        assert!(zc.ends_with(", why? Let's think step by step."));
        let ra = render_baseline(&e, PromptMode::Ra).unwrap().text;
        assert!(ra.ends_with("towards price is positive, why?"));
        assert_eq!(
            render_baseline(&e, PromptMode::ThRe),
            Err(PromptError::NotBaseline(PromptMode::ThRe))
        );
    }

    #[test]
    fn verify_prompt() {
        let p = render_verify("r1", "The mentioned aspect towards price is about cost.").unwrap();
        assert!(p.text.ends_with("Return True or False."));
        assert!(render_verify("r1", "x").is_ok());
        let q = render_verify("r1", "he said \"no\"").unwrap();
        assert!(q.text.contains("\"he said \"no\"\""));
        assert_eq!(render_verify("r1", ""), Err(PromptError::EmptyRationale));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PromptMode::ALL {
            assert_eq!(m.as_str().parse::<PromptMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
    }
}
