//! Assembly of the multi-task corpus: label prediction, rationale
//! generation and rationale verification, each marked by an input prefix.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Polarity, Split};
use crate::io::{self, JsonlError};
use crate::prompts::{self, PromptError, PromptMode};
use crate::rationale::{Rationale, RationaleStore, VerificationSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Predict,
    Explain,
    Verify,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Predict, Task::Explain, Task::Verify];

    pub fn prefix(self) -> &'static str {
        match self {
            Task::Predict => "predict: ",
            Task::Explain => "explain: ",
            Task::Verify => "verify: ",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Predict => "predict",
            Task::Explain => "explain",
            Task::Verify => "verify",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether the explain task conditions on the gold label (rationalization)
/// or not (reasoning).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMode {
    Re,
    Ra,
}

impl FromStr for ExplainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "re" => Ok(ExplainMode::Re),
            "ra" => Ok(ExplainMode::Ra),
            other => Err(format!("unknown explain mode {other:?} (expected re or ra)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub example_id: String,
    pub task: Task,
    pub input_text: String,
    pub target_text: String,
}

impl TrainingInstance {
    pub fn check(&self) -> Result<(), String> {
        if !self.input_text.starts_with(self.task.prefix()) {
            return Err(format!("{}: input lacks the {} prefix", self.example_id, self.task));
        }
        let ok = match self.task {
            Task::Predict => self.target_text.parse::<Polarity>().is_ok(),
            Task::Verify => self.target_text == "True" || self.target_text == "False",
            Task::Explain => !self.target_text.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{}: invalid {} target {:?}", self.example_id, self.task, self.target_text))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskSetError {
    #[error("missing rationale for {} train example(s): {}", .0.len(), .0.join(", "))]
    MissingRationales(Vec<String>),
    #[error("rationale for {0} is empty")]
    EmptyRationale(String),
    #[error("signal for {signal} does not belong to example {example}")]
    IdMismatch { example: String, signal: String },
    #[error("verification needs reasoning-mode rationales; {0}")]
    VerificationMode(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// `predict: <direct question>` → gold label word.
pub fn build_predict(example: &Example) -> TrainingInstance {
    TrainingInstance {
        example_id: example.id.clone(),
        task: Task::Predict,
        input_text: format!("{}{}", Task::Predict.prefix(), prompts::direct_question(example)),
        target_text: example.polarity.to_string(),
    }
}

/// `explain: <question clause>` → the rationale text verbatim. The
/// three-hop scaffold is left out of the input; the target carries it.
pub fn build_explain(
    example: &Example,
    rationale: &Rationale,
    mode: ExplainMode,
) -> Result<TrainingInstance, TaskSetError> {
    if rationale.text.is_empty() {
        return Err(TaskSetError::EmptyRationale(example.id.clone()));
    }
    let question = match mode {
        ExplainMode::Re => prompts::reasoning_question(example),
        ExplainMode::Ra => prompts::rationalization_question(example),
    };
    Ok(TrainingInstance {
        example_id: example.id.clone(),
        task: Task::Explain,
        input_text: format!("{}{question}", Task::Explain.prefix()),
        target_text: rationale.text.clone(),
    })
}

/// `verify: <verification prompt>` → `True` / `False`.
pub fn build_verify(
    example: &Example,
    rationale: &Rationale,
    signal: &VerificationSignal,
) -> Result<TrainingInstance, TaskSetError> {
    if signal.example_id != example.id {
        return Err(TaskSetError::IdMismatch {
            example: example.id.clone(),
            signal: signal.example_id.clone(),
        });
    }
    let prompt = prompts::render_verify(&example.id, &rationale.text)?;
    Ok(TrainingInstance {
        example_id: example.id.clone(),
        task: Task::Verify,
        input_text: format!("{}{}", Task::Verify.prefix(), prompt.text),
        target_text: if signal.value { "True" } else { "False" }.to_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Any train example without a rationale is an error.
    #[default]
    Strict,
    /// Such examples keep their predict instance only.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssembleOptions {
    pub mode: ExplainMode,
    pub with_verification: bool,
    pub seed: u64,
    pub missing: MissingPolicy,
    /// Permit verification instances built from rationales that were not
    /// produced by three-hop reasoning prompts.
    pub allow_any_verification_source: bool,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            mode: ExplainMode::Re,
            with_verification: true,
            seed: 0,
            missing: MissingPolicy::Strict,
            allow_any_verification_source: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSetCounts {
    pub examples: usize,
    pub per_task: BTreeMap<Task, usize>,
    pub verify_true: usize,
    pub verify_false: usize,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSetManifest {
    pub mode: ExplainMode,
    pub with_verification: bool,
    pub seed: u64,
    pub counts: TaskSetCounts,
    pub source_dataset_hash: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSet {
    pub instances: Vec<TrainingInstance>,
    pub mode: ExplainMode,
    pub with_verification: bool,
    pub seed: u64,
    pub counts: TaskSetCounts,
    pub source_dataset_hash: String,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn of_task(&self, task: Task) -> impl Iterator<Item = &TrainingInstance> {
        self.instances.iter().filter(move |i| i.task == task)
    }

    pub fn count(&self, task: Task) -> usize {
        self.of_task(task).count()
    }

    pub fn to_jsonl_string(&self) -> String {
        io::to_jsonl_string(&self.instances)
    }

    pub fn manifest(&self) -> TaskSetManifest {
        TaskSetManifest {
            mode: self.mode,
            with_verification: self.with_verification,
            seed: self.seed,
            counts: self.counts.clone(),
            source_dataset_hash: self.source_dataset_hash.clone(),
            created_at: Utc::now(),
        }
    }

    /// Writes `taskset.jsonl` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("taskset.jsonl"), self.to_jsonl_string())?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join("manifest.json"), manifest + "\n")
    }

    pub fn load(dir: &Path) -> Result<Self, JsonlError> {
        let instances: Vec<TrainingInstance> = io::read_jsonl(&dir.join("taskset.jsonl"))?;
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path).map_err(|source| JsonlError::Io {
            path: manifest_path.display().to_string(),
            source,
        })?;
        let manifest: TaskSetManifest =
            serde_json::from_str(&raw).map_err(|source| JsonlError::Parse {
                path: manifest_path.display().to_string(),
                line: 1,
                source,
            })?;
        Ok(TaskSet {
            instances,
            mode: manifest.mode,
            with_verification: manifest.with_verification,
            seed: manifest.seed,
            counts: manifest.counts,
            source_dataset_hash: manifest.source_dataset_hash,
        })
    }
}

/// Builds the shuffled multi-task corpus for the train split.
pub fn assemble(
    dataset: &Dataset,
    rationales: &RationaleStore,
    options: AssembleOptions,
) -> Result<TaskSet, TaskSetError> {
    let train = dataset.slice(Split::Train, false);
    if options.with_verification && !options.allow_any_verification_source {
        if options.mode != ExplainMode::Re {
            return Err(TaskSetError::VerificationMode(
                "explain mode must be `re` when verification is enabled".into(),
            ));
        }
        if let Some(bad) = train
            .iter()
            .filter_map(|e| rationales.get(&e.id))
            .find(|(r, _)| r.mode != PromptMode::ThRe)
        {
            return Err(TaskSetError::VerificationMode(format!(
                "rationale for {} was generated with mode {}",
                bad.0.example_id, bad.0.mode
            )));
        }
    }

    let missing: Vec<String> = train
        .iter()
        .filter(|e| rationales.get(&e.id).is_none())
        .map(|e| e.id.clone())
        .collect();
    if options.missing == MissingPolicy::Strict && !missing.is_empty() {
        return Err(TaskSetError::MissingRationales(missing));
    }

    let mut instances = Vec::with_capacity(train.len() * 3);
    let mut counts = TaskSetCounts {
        examples: train.len(),
        skipped: missing,
        ..Default::default()
    };
    for ex in &train {
        instances.push(build_predict(ex));
        let Some((rationale, signal)) = rationales.get(&ex.id) else {
            continue;
        };
        instances.push(build_explain(ex, rationale, options.mode)?);
        if options.with_verification {
            instances.push(build_verify(ex, rationale, signal)?);
            if signal.value {
                counts.verify_true += 1;
            } else {
                counts.verify_false += 1;
            }
        }
    }
    for inst in &instances {
        *counts.per_task.entry(inst.task).or_default() += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    instances.shuffle(&mut rng);
    log::info!(
        "assembled {} instances from {} train examples ({:?}, {} verified true / {} false)",
        instances.len(),
        train.len(),
        counts.per_task,
        counts.verify_true,
        counts.verify_false
    );

    Ok(TaskSet {
        instances,
        mode: options.mode,
        with_verification: options.with_verification,
        seed: options.seed,
        counts,
        source_dataset_hash: dataset.content_hash(),
    })
}
