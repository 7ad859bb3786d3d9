//! Canonical example records, dataset validation, SemEval-2014 ingestion and
//! split slicing.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::io::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("example {id}: {reason}")]
    Validation { id: String, reason: String },
    #[error("ingestion failed: {0}")]
    Ingest(String),
}

impl From<JsonlError> for CorpusError {
    fn from(err: JsonlError) -> Self {
        match err {
            JsonlError::Io { path, source } => CorpusError::Io { path, source },
            JsonlError::Parse { path, line, source } => CorpusError::Parse {
                path,
                line,
                message: source.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    /// The fixed label alphabet, in reporting order.
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Restaurant,
    Laptop,
    #[default]
    Custom,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Restaurant => "restaurant",
            DatasetName::Laptop => "laptop",
            DatasetName::Custom => "custom",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "restaurant" => Ok(DatasetName::Restaurant),
            "laptop" => Ok(DatasetName::Laptop),
            "custom" => Ok(DatasetName::Custom),
            other => Err(format!("unknown dataset name {other:?}")),
        }
    }
}

/// One labeled instance: a sentence, the aspect term judged within it, and
/// the gold polarity toward that term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub sentence: String,
    pub aspect_term: String,
    pub polarity: Polarity,
    /// Membership in the implicit-sentiment slice.
    pub implicit: bool,
    pub split: Split,
}

impl Example {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: &str| {
            Err(CorpusError::Validation {
                id: self.id.clone(),
                reason: reason.to_owned(),
            })
        };
        if self.id.is_empty() {
            return fail("empty id");
        }
        if self.sentence.is_empty() {
            return fail("empty sentence");
        }
        if self.aspect_term.is_empty() {
            return fail("empty aspect term");
        }
        if !self.sentence.contains(&self.aspect_term) {
            return fail(&format!(
                "aspect term {:?} does not occur in the sentence",
                self.aspect_term
            ));
        }
        Ok(())
    }
}

/// An ordered, validated collection of examples. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    name: DatasetName,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: DatasetName, examples: Vec<Example>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            ex.validate()?;
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::Validation {
                    id: ex.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(Dataset { name, examples })
    }

    pub fn name(&self) -> DatasetName {
        self.name
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Examples of one split, optionally restricted to the implicit slice.
    pub fn slice(&self, split: Split, implicit_only: bool) -> Vec<&Example> {
        slice(self, split, implicit_only)
    }

    pub fn count(&self, split: Split) -> usize {
        self.examples.iter().filter(|e| e.split == split).count()
    }

    /// Canonical JSON Lines serialization, one example per line.
    pub fn to_canonical_string(&self) -> String {
        io::to_jsonl_string(&self.examples)
    }

    /// SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        io::sha256_hex(self.to_canonical_string().as_bytes())
    }
}

/// Filters `dataset` to one split, preserving order.
pub fn slice(dataset: &Dataset, split: Split, implicit_only: bool) -> Vec<&Example> {
    dataset
        .examples
        .iter()
        .filter(|e| e.split == split && (!implicit_only || e.implicit))
        .collect()
}

// Polarity and split are read as free strings so that an out-of-alphabet
// value surfaces as a validation error naming the example, not a parse error.
#[derive(Deserialize)]
struct RawExample {
    id: String,
    sentence: String,
    aspect_term: String,
    polarity: String,
    implicit: bool,
    split: String,
}

impl RawExample {
    fn into_example(self) -> Result<Example, CorpusError> {
        let polarity = self.polarity.parse().map_err(|reason| CorpusError::Validation {
            id: self.id.clone(),
            reason,
        })?;
        let split = self.split.parse().map_err(|reason| CorpusError::Validation {
            id: self.id.clone(),
            reason,
        })?;
        Ok(Example {
            id: self.id,
            sentence: self.sentence,
            aspect_term: self.aspect_term,
            polarity,
            implicit: self.implicit,
            split,
        })
    }
}

/// Loads a canonical JSONL dataset, validating every record.
pub fn load_canonical(path: &Path, name: DatasetName) -> Result<Dataset, CorpusError> {
    let raw: Vec<RawExample> = io::read_jsonl(path)?;
    let examples = raw
        .into_iter()
        .map(RawExample::into_example)
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(name, examples)
}

pub fn write_canonical(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    io::write_jsonl(path, dataset.examples()).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Outcome of a SemEval conversion.
#[derive(Debug, Clone)]
pub struct Conversion {
    pub dataset: Dataset,
    /// Aspect terms labeled `conflict`, which have no place in the
    /// three-class setup.
    pub dropped_conflict: usize,
    /// Aspect terms whose (trimmed) text does not occur in the sentence.
    pub dropped_unmatched: usize,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct ImplicitTag {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    sentence: Option<String>,
    #[serde(default, alias = "term")]
    aspect_term: Option<String>,
    implicit: bool,
}

/// Converts one SemEval-2014 ABSA XML file into canonical examples.
///
/// Example ids are `{sentence id}:{aspect index}`, where the index counts
/// every `aspectTerm` of the sentence in document order (dropped ones
/// included), so ids stay stable regardless of filtering. The sidecar, when
/// given, is JSONL keyed either by `id` or by a `(sentence, aspect_term)`
/// pair; tags that match nothing produce a warning and are ignored.
pub fn convert_semeval(
    xml_path: &Path,
    implicit_tag_path: Option<&Path>,
    split: Split,
    name: DatasetName,
) -> Result<Conversion, CorpusError> {
    let xml = std::fs::read_to_string(xml_path).map_err(|source| CorpusError::Io {
        path: xml_path.display().to_string(),
        source,
    })?;
    let tags: Vec<ImplicitTag> = match implicit_tag_path {
        Some(p) => io::read_jsonl(p)?,
        None => Vec::new(),
    };
    convert_semeval_str(&xml, &tags, split, name)
}

/// Parses SemEval XML held in memory; `sidecar` is JSONL text (possibly empty).
pub fn convert_semeval_text(
    xml: &str,
    sidecar: &str,
    split: Split,
    name: DatasetName,
) -> Result<Conversion, CorpusError> {
    let mut tags = Vec::new();
    for (idx, line) in sidecar.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tag = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: "<sidecar>".into(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        tags.push(tag);
    }
    convert_semeval_str(xml, &tags, split, name)
}

fn convert_semeval_str(
    xml: &str,
    tags: &[ImplicitTag],
    split: Split,
    name: DatasetName,
) -> Result<Conversion, CorpusError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| CorpusError::Ingest(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "sentences" {
        return Err(CorpusError::Ingest(format!(
            "expected <sentences> root, found <{}>",
            root.tag_name().name()
        )));
    }

    let mut examples = Vec::new();
    let mut dropped_conflict = 0;
    let mut dropped_unmatched = 0;
    let mut warnings = Vec::new();

    for sentence in root.children().filter(|n| n.is_element()) {
        if sentence.tag_name().name() != "sentence" {
            return Err(CorpusError::Ingest(format!(
                "unexpected element <{}> under <sentences>",
                sentence.tag_name().name()
            )));
        }
        let sid = sentence
            .attribute("id")
            .ok_or_else(|| CorpusError::Ingest("<sentence> without id attribute".into()))?;
        let text = sentence
            .children()
            .find(|n| n.has_tag_name("text"))
            .ok_or_else(|| CorpusError::Ingest(format!("sentence {sid}: missing <text>")))?
            .text()
            .unwrap_or("")
            .to_owned();
        let Some(terms) = sentence.children().find(|n| n.has_tag_name("aspectTerms")) else {
            continue;
        };
        for (k, term) in terms
            .children()
            .filter(|n| n.has_tag_name("aspectTerm"))
            .enumerate()
        {
            let id = format!("{sid}:{k}");
            let raw_term = term
                .attribute("term")
                .ok_or_else(|| CorpusError::Ingest(format!("{id}: aspectTerm without term")))?;
            let raw_polarity = term
                .attribute("polarity")
                .ok_or_else(|| CorpusError::Ingest(format!("{id}: aspectTerm without polarity")))?;
            if raw_polarity == "conflict" {
                dropped_conflict += 1;
                continue;
            }
            let polarity: Polarity = raw_polarity
                .parse()
                .map_err(|e| CorpusError::Ingest(format!("{id}: {e}")))?;
            let aspect_term = raw_term.trim().to_owned();
            if aspect_term.is_empty() || text.is_empty() || !text.contains(&aspect_term) {
                dropped_unmatched += 1;
                warnings.push(format!("{id}: term {raw_term:?} not found in sentence; dropped"));
                continue;
            }
            examples.push(Example {
                id,
                sentence: text.clone(),
                aspect_term,
                polarity,
                implicit: false,
                split,
            });
        }
    }

    let by_id: HashMap<String, usize> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.clone(), i))
        .collect();
    if by_id.len() != examples.len() {
        return Err(CorpusError::Ingest("duplicate sentence ids in XML".into()));
    }
    for tag in tags {
        let hits: Vec<usize> = match (&tag.id, &tag.sentence, &tag.aspect_term) {
            (Some(id), _, _) => by_id.get(id).copied().into_iter().collect(),
            (None, Some(s), Some(t)) => examples
                .iter()
                .enumerate()
                .filter(|(_, e)| &e.sentence == s && &e.aspect_term == t)
                .map(|(i, _)| i)
                .collect(),
            _ => {
                warnings.push("implicit tag without id or (sentence, aspect_term); ignored".into());
                continue;
            }
        };
        if hits.is_empty() {
            let key = tag
                .id
                .clone()
                .unwrap_or_else(|| format!("{:?}/{:?}", tag.sentence, tag.aspect_term));
            warnings.push(format!("implicit tag {key} matches no example; ignored"));
        }
        for i in hits {
            examples[i].implicit = tag.implicit;
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(Conversion {
        dataset: Dataset::new(name, examples)?,
        dropped_conflict,
        dropped_unmatched,
        warnings,
    })
}

/// Concatenates datasets (e.g. separate train and test XML files).
pub fn merge(name: DatasetName, parts: Vec<Dataset>) -> Result<Dataset, CorpusError> {
    Dataset::new(name, parts.into_iter().flat_map(|d| d.examples).collect())
}

/// Holds out a validation split when the source has none: the last
/// `fraction` of train examples by id order move to `validation`.
/// Datasets that already contain validation examples are returned as is.
pub fn ensure_validation_split(dataset: Dataset, fraction: f64) -> Dataset {
    if dataset.count(Split::Validation) > 0 {
        return dataset;
    }
    let mut train_ids: Vec<&str> = dataset
        .examples
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.id.as_str())
        .collect();
    train_ids.sort_unstable();
    let hold = (train_ids.len() as f64 * fraction).round() as usize;
    let held: HashSet<String> = train_ids[train_ids.len() - hold..]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let Dataset { name, mut examples } = dataset;
    for ex in &mut examples {
        if held.contains(&ex.id) {
            ex.split = Split::Validation;
        }
    }
    Dataset { name, examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ex(id: &str, split: Split, implicit: bool) -> Example {
        Example {
            id: id.into(),
            sentence: "the price was fine".into(),
            aspect_term: "price".into(),
            polarity: Polarity::Neutral,
            implicit,
            split,
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_the_price_example() {
        let line = r#"{"id":"r1","sentence":"a cheaper price should not equal a \"cheap\" product.","aspect_term":"price","polarity":"positive","implicit":true,"split":"test"}"#;
        let f = write_tmp(&format!("{line}\n"));
        let ds = load_canonical(f.path(), DatasetName::Restaurant).unwrap();
        assert_eq!(ds.len(), 1);
        let e = &ds.examples()[0];
        assert_eq!(e.polarity, Polarity::Positive);
        assert!(e.implicit);
        assert_eq!(e.sentence, "a cheaper price should not equal a \"cheap\" product.");
        assert_eq!(ds.to_canonical_string(), format!("{line}\n"));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write_tmp("");
        assert!(load_canonical(f.path(), DatasetName::Custom).unwrap().is_empty());
    }

    #[test]
    fn unknown_polarity_is_a_validation_error() {
        let f = write_tmp(
            r#"{"id":"x9","sentence":"good soup","aspect_term":"soup","polarity":"joyful","implicit":false,"split":"train"}"#,
        );
        match load_canonical(f.path(), DatasetName::Custom) {
            Err(CorpusError::Validation { id, .. }) => assert_eq!(id, "x9"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(
            "{\"id\":\"a\",\"sentence\":\"s a\",\"aspect_term\":\"a\",\"polarity\":\"neutral\",\"implicit\":false,\"split\":\"train\"}\n{not json\n",
        );
        match load_canonical(f.path(), DatasetName::Custom) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn aspect_must_occur_case_sensitively() {
        let mut e = ex("a", Split::Train, false);
        e.aspect_term = "Price".into();
        assert!(matches!(e.validate(), Err(CorpusError::Validation { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Dataset::new(
            DatasetName::Custom,
            vec![ex("a", Split::Train, false), ex("a", Split::Test, false)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate id"));
    }

    #[test]
    fn slicing() {
        let ds = Dataset::new(
            DatasetName::Custom,
            vec![
                ex("t1", Split::Test, true),
                ex("t2", Split::Test, false),
                ex("t3", Split::Test, false),
            ],
        )
        .unwrap();
        assert_eq!(slice(&ds, Split::Test, true).len(), 1);
        let all: Vec<_> = slice(&ds, Split::Test, false).iter().map(|e| e.id.as_str()).collect();
        assert_eq!(all, ["t1", "t2", "t3"]);
        assert!(slice(&ds, Split::Validation, false).is_empty());
    }

    const XML: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<sentences>
  <sentence id="s1">
    <text>a cheaper price should not equal a "cheap" product.</text>
    <aspectTerms>
      <aspectTerm term="price" polarity="positive" from="10" to="15"/>
    </aspectTerms>
  </sentence>
  <sentence id="s2">
    <text>Food good, service slow.</text>
    <aspectTerms>
      <aspectTerm term="Food" polarity="conflict" from="0" to="4"/>
      <aspectTerm term=" service " polarity="negative" from="11" to="18"/>
    </aspectTerms>
  </sentence>
  <sentence id="s3">
    <text>No aspects here.</text>
  </sentence>
</sentences>"#;

    #[test]
    fn semeval_conversion() {
        let conv = convert_semeval_text(
            XML,
            "{\"id\":\"s1:0\",\"implicit\":true}\n{\"id\":\"nope\",\"implicit\":true}\n",
            Split::Test,
            DatasetName::Restaurant,
        )
        .unwrap();
        assert_eq!(conv.dropped_conflict, 1);
        assert_eq!(conv.dataset.len(), 2);
        let ids: Vec<_> = conv.dataset.examples().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["s1:0", "s2:1"]);
        assert!(conv.dataset.examples()[0].implicit);
        assert!(!conv.dataset.examples()[1].implicit);
        assert_eq!(conv.dataset.examples()[1].aspect_term, "service");
        assert_eq!(conv.warnings.len(), 1);
    }

    #[test]
    fn sidecar_by_sentence_and_term() {
        let conv = convert_semeval_text(
            XML,
            r#"{"sentence":"Food good, service slow.","aspect_term":"service","implicit":true}"#,
            Split::Train,
            DatasetName::Restaurant,
        )
        .unwrap();
        assert!(conv.dataset.get("s2:1").unwrap().implicit);
    }

    #[test]
    fn bad_xml_structure() {
        let err = convert_semeval_text("<reviews/>", "", Split::Train, DatasetName::Laptop).unwrap_err();
        assert!(matches!(err, CorpusError::Ingest(_)));
        let err = convert_semeval_text("<sentences><sentence>", "", Split::Train, DatasetName::Laptop)
            .unwrap_err();
        assert!(matches!(err, CorpusError::Ingest(_)));
    }

    #[test]
    fn validation_holdout_is_last_tenth_by_id() {
        let examples: Vec<_> = (0..20)
            .map(|i| ex(&format!("id{:02}", 19 - i), Split::Train, false))
            .collect();
        let ds = ensure_validation_split(Dataset::new(DatasetName::Custom, examples).unwrap(), 0.1);
        let mut val: Vec<_> = slice(&ds, Split::Validation, false)
            .iter()
            .map(|e| e.id.clone())
            .collect();
        val.sort();
        assert_eq!(val, ["id18", "id19"]);
        assert_eq!(ds.count(Split::Train), 18);
    }
}
