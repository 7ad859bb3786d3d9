//! Parsing generated rationales into polarity predictions and deriving the
//! answer-based verification signal.
//!
//! A rationale may mention more than one polarity when the generator hedges.
//! The earliest mention wins (first come, first served): it is the label the
//! generator committed to first, and later mentions are treated as
//! qualifications. The signal is `true` only when that earliest label equals
//! the gold label.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Polarity;
use crate::io::{self, JsonlError};
use crate::prompts::PromptMode;

/// One occurrence of a polarity word. `char_offset` counts Unicode scalar
/// values from the start of the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarityMention {
    pub label: Polarity,
    pub char_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerificationReason {
    Match,
    Mismatch,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationSignal {
    pub example_id: String,
    pub value: bool,
    pub reason: VerificationReason,
}

/// A generated explanation together with everything parsed out of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rationale {
    pub example_id: String,
    pub mode: PromptMode,
    pub generator_id: String,
    pub text: String,
    pub polarity_mentions: Vec<PolarityMention>,
    pub resolved: Option<Polarity>,
    pub aspect_span: Option<String>,
    pub opinion_span: Option<String>,
}

impl Rationale {
    /// Parses `text` for mentions, the FCFS prediction and the diagnostic
    /// aspect/opinion spans.
    pub fn parse(
        example_id: impl Into<String>,
        mode: PromptMode,
        generator_id: impl Into<String>,
        text: impl Into<String>,
        aspect_term: &str,
    ) -> Self {
        let text = text.into();
        let polarity_mentions = extract_polarities(&text);
        let resolved = resolve_fcfs(&polarity_mentions);
        let (aspect_span, opinion_span) = extract_spans(&text, aspect_term);
        Rationale {
            example_id: example_id.into(),
            mode,
            generator_id: generator_id.into(),
            text,
            polarity_mentions,
            resolved,
            aspect_span,
            opinion_span,
        }
    }

    pub fn is_ambiguous(&self) -> bool {
        ambiguity_flag(&self.polarity_mentions)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Finds whole-word, ASCII case-insensitive occurrences of `positive`,
/// `negative` and `neutral`, left to right. Runs of the same label are
/// collapsed to their first occurrence.
pub fn extract_polarities(text: &str) -> Vec<PolarityMention> {
    let chars: Vec<char> = text.chars().collect();
    let mut mentions: Vec<PolarityMention> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if i > 0 && is_word_char(chars[i - 1]) {
            i += 1;
            continue;
        }
        let hit = Polarity::ALL.into_iter().find(|p| {
            let word = p.as_str();
            let end = i + word.len();
            end <= chars.len()
                && chars[i..end]
                    .iter()
                    .zip(word.chars())
                    .all(|(c, w)| c.eq_ignore_ascii_case(&w))
                && chars.get(end).is_none_or(|&c| !is_word_char(c))
        });
        match hit {
            Some(label) => {
                if mentions.last().map(|m| m.label) != Some(label) {
                    mentions.push(PolarityMention {
                        label,
                        char_offset: i,
                    });
                }
                i += label.as_str().len();
            }
            None => i += 1,
        }
    }
    mentions
}

/// The earliest mentioned label, if any.
pub fn resolve_fcfs(mentions: &[PolarityMention]) -> Option<Polarity> {
    mentions.first().map(|m| m.label)
}

pub fn verification_signal(
    example_id: &str,
    resolved: Option<Polarity>,
    gold: Polarity,
) -> VerificationSignal {
    let reason = match resolved {
        None => VerificationReason::Unparseable,
        Some(p) if p == gold => VerificationReason::Match,
        Some(_) => VerificationReason::Mismatch,
    };
    VerificationSignal {
        example_id: example_id.to_owned(),
        value: reason == VerificationReason::Match,
        reason,
    }
}

/// True when the mentions carry at least two distinct labels.
pub fn ambiguity_flag(mentions: &[PolarityMention]) -> bool {
    mentions.iter().map(|m| m.label).collect::<HashSet<_>>().len() >= 2
}

const TERMINATORS: [char; 4] = ['.', '!', '?', '\n'];

fn clause_after(text: &str, anchor: &str) -> Option<String> {
    let lower = text.to_ascii_lowercase();
    let start = lower.find(&anchor.to_ascii_lowercase())? + anchor.len();
    let mut rest = &text[start..];
    // "is about X" and "is that X" both occur in practice.
    for lead in ["about ", "that "] {
        if rest.len() >= lead.len() && rest[..lead.len()].eq_ignore_ascii_case(lead) {
            rest = &rest[lead.len()..];
            break;
        }
    }
    let end = rest.find(TERMINATORS).unwrap_or(rest.len());
    let clause = rest[..end].trim();
    (!clause.is_empty()).then(|| clause.to_owned())
}

/// Pulls the clause after "The mentioned aspect towards {t} is" and after
/// "The underlying opinion towards {t} is", each up to the next sentence
/// terminator. Diagnostic only.
pub fn extract_spans(text: &str, aspect_term: &str) -> (Option<String>, Option<String>) {
    let aspect = clause_after(text, &format!("The mentioned aspect towards {aspect_term} is "));
    let opinion = clause_after(text, &format!("The underlying opinion towards {aspect_term} is "));
    (aspect, opinion)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoredVerification {
    value: bool,
    reason: VerificationReason,
}

/// One row of the rationale store file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleRow {
    pub example_id: String,
    pub mode: PromptMode,
    pub generator_id: String,
    pub text: String,
    pub resolved: Option<Polarity>,
    verification: StoredVerification,
}

impl RationaleRow {
    pub fn verification(&self) -> VerificationSignal {
        VerificationSignal {
            example_id: self.example_id.clone(),
            value: self.verification.value,
            reason: self.verification.reason,
        }
    }
}

/// Rationales with their verification signals, keyed by example id and kept
/// in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RationaleStore {
    entries: Vec<(Rationale, VerificationSignal)>,
}

impl RationaleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the entry for the rationale's example.
    pub fn insert(&mut self, rationale: Rationale, signal: VerificationSignal) {
        debug_assert_eq!(rationale.example_id, signal.example_id);
        match self
            .entries
            .iter_mut()
            .find(|(r, _)| r.example_id == rationale.example_id)
        {
            Some(slot) => *slot = (rationale, signal),
            None => self.entries.push((rationale, signal)),
        }
    }

    pub fn get(&self, example_id: &str) -> Option<(&Rationale, &VerificationSignal)> {
        self.entries
            .iter()
            .find(|(r, _)| r.example_id == example_id)
            .map(|(r, s)| (r, s))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Rationale, &VerificationSignal)> {
        self.entries.iter().map(|(r, s)| (r, s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rows(&self) -> Vec<RationaleRow> {
        self.entries
            .iter()
            .map(|(r, s)| RationaleRow {
                example_id: r.example_id.clone(),
                mode: r.mode,
                generator_id: r.generator_id.clone(),
                text: r.text.clone(),
                resolved: r.resolved,
                verification: StoredVerification {
                    value: s.value,
                    reason: s.reason,
                },
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        io::write_jsonl(path, &self.rows())
    }

    /// Loads a store, re-deriving mentions and spans from the stored text.
    /// `aspect_of` maps an example id to its aspect term for span extraction.
    pub fn load(path: &Path, aspect_of: impl Fn(&str) -> Option<String>) -> Result<Self, JsonlError> {
        let rows: Vec<RationaleRow> = io::read_jsonl(path)?;
        let mut store = RationaleStore::new();
        for row in rows {
            let aspect = aspect_of(&row.example_id).unwrap_or_default();
            let signal = row.verification();
            let mut r = Rationale::parse(row.example_id, row.mode, row.generator_id, row.text, &aspect);
            r.resolved = row.resolved;
            store.insert(r, signal);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Polarity::*;

    const PRICE_TH_RE: &str = "The mentioned aspect towards price is about the relationship between price and the quality of a product. The underlying opinion towards price is that just because something is offered at a lower price, it should not automatically be assumed to be of low quality or \"cheap.\" Therefore, the sentiment polarity towards price in this sentence is positive. The sentiment is emphasizing that price should not be the sole determinant of product quality, advocating for a more nuanced understanding of the pricing and value relationship.";

    #[test]
    fn three_hop_response_resolves_positive() {
        let m = extract_polarities(PRICE_TH_RE);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].label, Positive);
        let k = PRICE_TH_RE.find("positive").unwrap();
        assert_eq!(m[0].char_offset, PRICE_TH_RE[..k].chars().count());
    }

    #[test]
    fn hedged_text_offsets() {
        let m = extract_polarities("could be positive, but arguably negative overall");
        assert_eq!(
            m,
            vec![
                PolarityMention { label: Positive, char_offset: 9 },
                PolarityMention { label: Negative, char_offset: 32 },
            ]
        );
        assert!(extract_polarities("").is_empty());
    }

    #[test]
    fn whole_words_only_any_case() {
        assert!(extract_polarities("positively negation neutrality _neutral").is_empty());
        let m = extract_polarities("NEGATIVE, Neutral.");
        assert_eq!(m.iter().map(|m| m.label).collect::<Vec<_>>(), [Negative, Neutral]);
        // Offsets are in characters, not bytes.
        let m = extract_polarities("é positive");
        assert_eq!(m[0].char_offset, 2);
    }

    #[test]
    fn consecutive_duplicates_collapse() {
        let m = extract_polarities("positive positive negative positive");
        assert_eq!(m.iter().map(|m| m.label).collect::<Vec<_>>(), [Positive, Negative, Positive]);
        assert_eq!(m[1].char_offset, 18);
    }

    #[test]
    fn fcfs() {
        let mk = |ls: &[Polarity]| -> Vec<PolarityMention> {
            ls.iter()
                .enumerate()
                .map(|(i, &label)| PolarityMention { label, char_offset: i * 10 })
                .collect()
        };
        assert_eq!(resolve_fcfs(&mk(&[Negative, Positive])), Some(Negative));
        assert_eq!(resolve_fcfs(&mk(&[Positive])), Some(Positive));
        assert_eq!(resolve_fcfs(&[]), None);
        assert!(ambiguity_flag(&mk(&[Positive, Negative])));
        assert!(!ambiguity_flag(&mk(&[Positive, Positive])));
        assert!(!ambiguity_flag(&[]));
    }

    #[test]
    fn signals() {
        let s = verification_signal("a", Some(Positive), Positive);
        assert!(s.value);
        assert_eq!(s.reason, VerificationReason::Match);
        let s = verification_signal("a", Some(Negative), Positive);
        assert_eq!((s.value, s.reason), (false, VerificationReason::Mismatch));
        let s = verification_signal("a", None, Positive);
        assert_eq!((s.value, s.reason), (false, VerificationReason::Unparseable));
    }

    #[test]
    fn spans() {
        let (aspect, opinion) = extract_spans(PRICE_TH_RE, "price");
        assert!(aspect
            .unwrap()
            .starts_with("the relationship between price and the quality"));
        assert!(opinion.unwrap().starts_with("just because something"));
        assert_eq!(extract_spans("no anchors here", "price"), (None, None));
        let (a, o) = extract_spans("The mentioned aspect towards price is ", "price");
        assert_eq!((a, o), (None, None));
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rationales.jsonl");
        let mut store = RationaleStore::new();
        let r = Rationale::parse("r1", PromptMode::ThRe, "mock", PRICE_TH_RE, "price");
        let s = verification_signal("r1", r.resolved, Positive);
        store.insert(r.clone(), s.clone());
        store.save(&path).unwrap();
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with(r#"{"example_id":"r1","mode":"th_re","generator_id":"mock","text":"#));
        assert!(line.trim_end().ends_with(r#""resolved":"positive","verification":{"value":true,"reason":"match"}}"#));
        let loaded = RationaleStore::load(&path, |_| Some("price".into())).unwrap();
        assert_eq!(loaded.get("r1"), Some((&r, &s)));
    }
}
