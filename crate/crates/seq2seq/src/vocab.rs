//! Word-level tokenizer with a closed vocabulary built from training text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Splits on whitespace; runs of letters, digits, `_` and `'` form words and
/// every other character is its own token. Case is preserved.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let wordy = c.is_alphanumeric() || c == '_' || c == '\'';
        if wordy {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Joins tokens with single spaces, except before closing punctuation.
pub fn detokenize<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for t in tokens {
        let closing = matches!(t, "." | "," | "!" | "?" | ";" | ":" | ")");
        if !out.is_empty() && !closing {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    /// Every token of `texts`, most frequent first (ties alphabetical), after
    /// the four reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_owned()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token ids of `text`, cut to at most `max` ids.
    pub fn encode(&self, text: &str, max: usize) -> Vec<u32> {
        tokenize(text).into_iter().take(max).map(|t| self.id(t)).collect()
    }

    /// Text of `ids` up to the first end-of-sequence, skipping reserved ids
    /// other than `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        detokenize(
            ids.iter()
                .take_while(|&&i| i != EOS)
                .filter(|&&i| i == UNK || i > UNK)
                .map(|&i| self.tokens.get(i as usize).map(String::as_str).unwrap_or("<unk>")),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("token list serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self, String> {
        let tokens: Vec<String> = serde_json::from_str(raw).map_err(|e| e.to_string())?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err("vocabulary does not start with the reserved tokens".into());
        }
        Ok(Self::from_tokens(tokens))
    }
}
