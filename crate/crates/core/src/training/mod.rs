//! Multi-task fine-tuning under the weighted loss
//! `α·L_exp + γ·L_ver + (1−α−γ)·L_pre`, inference on the predict task, and
//! the validation grid search over `(α, γ)`.

pub mod mock;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Polarity, Split};
use crate::evaluation::macro_f1;
use crate::io::sha256_hex;
use crate::taskset::{self, Task, TaskSet, TrainingInstance};

/// Token budget when generating a label for the predict task.
pub const PREDICT_MAX_NEW_TOKENS: usize = 8;

/// Slack allowed on `α + γ ≤ 1` for weights that came through decimal text.
const WEIGHT_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {task} loss at step {step}; batch: {}", .batch_ids.join(", "))]
    NonFiniteLoss {
        step: usize,
        task: Task,
        batch_ids: Vec<String>,
    },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("inference failed for {example_id}: {source}")]
    Inference {
        example_id: String,
        #[source]
        source: BackendError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct BackendError(pub String);

impl BackendError {
    pub fn new(msg: impl std::fmt::Display) -> Self {
        BackendError(msg.to_string())
    }
}

/// Explanation weight `alpha` and verification weight `gamma`; the
/// prediction task gets the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self, TrainError> {
        let w = LossWeights { alpha, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let LossWeights { alpha, gamma } = *self;
        if !(alpha.is_finite() && gamma.is_finite()) || alpha < 0.0 || gamma < 0.0 {
            return Err(TrainError::Argument(format!(
                "weights must be finite and non-negative (alpha={alpha}, gamma={gamma})"
            )));
        }
        if alpha + gamma > 1.0 + WEIGHT_EPS {
            return Err(TrainError::Argument(format!(
                "alpha + gamma must not exceed 1 (alpha={alpha}, gamma={gamma})"
            )));
        }
        Ok(())
    }

    /// Weight of the prediction loss, `1 − α − γ`.
    pub fn prediction(&self) -> f64 {
        (1.0 - self.alpha - self.gamma).max(0.0)
    }

    pub fn of(&self, task: Task) -> f64 {
        match task {
            Task::Explain => self.alpha,
            Task::Verify => self.gamma,
            Task::Predict => self.prediction(),
        }
    }
}

/// `α·l_exp + γ·l_ver + (1−α−γ)·l_pre`.
pub fn combine_losses(l_exp: f64, l_ver: f64, l_pre: f64, weights: LossWeights) -> Result<f64, TrainError> {
    weights.validate()?;
    for (name, v) in [("l_exp", l_exp), ("l_ver", l_ver), ("l_pre", l_pre)] {
        if !v.is_finite() || v < 0.0 {
            return Err(TrainError::Argument(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    Ok(weights.alpha * l_exp + weights.gamma * l_ver + (1.0 - weights.alpha - weights.gamma) * l_pre)
}

/// How per-token cross-entropy is reduced to a batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Mean over every non-padding target token in the batch.
    #[default]
    TokenMean,
    /// Mean over sequences of each sequence's token mean.
    SequenceMean,
}

/// A trainable text-to-text model.
///
/// Gradients from several [`accumulate`](Seq2SeqBackend::accumulate) calls
/// sum until [`update`](Seq2SeqBackend::update) applies one optimizer step.
/// Since the combined loss is linear in its components, accumulating each
/// task's loss scaled by its weight yields the gradient of the combined loss.
pub trait Seq2SeqBackend {
    fn id(&self) -> String;

    /// Applies run-level settings before training starts.
    fn configure(&mut self, _config: &TrainConfig) -> Result<(), BackendError> {
        Ok(())
    }

    /// Teacher-forced loss on `(input, target)` pairs. The gradient of
    /// `weight · loss` is added to the pending update; the unweighted loss is
    /// returned.
    fn accumulate(&mut self, batch: &[(&str, &str)], weight: f64) -> Result<f64, BackendError>;

    /// Applies one optimizer step from the pending gradient and clears it.
    fn update(&mut self, learning_rate: f64) -> Result<(), BackendError>;

    /// Drops any pending gradient without updating.
    fn discard(&mut self);

    /// Greedy decoding, one output per input.
    fn generate(&self, inputs: &[&str], max_new_tokens: usize) -> Result<Vec<String>, BackendError>;

    fn save(&self, dir: &Path) -> Result<(), BackendError>;

    fn load(&mut self, dir: &Path) -> Result<(), BackendError>;

    fn loss_normalization(&self) -> LossNormalization {
        LossNormalization::TokenMean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    /// Instances per task per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_input_tokens: usize,
    pub max_target_tokens: usize,
    pub seed: u64,
    pub backend_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights { alpha: 0.3, gamma: 0.3 },
            epochs: 3,
            batch_size: 8,
            learning_rate: 3e-3,
            max_input_tokens: 192,
            max_target_tokens: 96,
            seed: 0,
            backend_id: "tiny-transformer".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.max_input_tokens == 0 || self.max_target_tokens == 0 {
            return Err(TrainError::Argument(
                "batch_size and token limits must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// One optimizer step. Components for inactive tasks are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_exp: Option<f64>,
    pub l_ver: Option<f64>,
    pub l_pre: Option<f64>,
    pub l_combined: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_combined: f64,
    pub val_macro_f1: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    /// CSV with columns `step,l_exp,l_ver,l_pre,l_combined,lr`; skipped
    /// components are empty cells.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "l_exp", "l_ver", "l_pre", "l_combined", "lr"])
            .expect("in-memory write");
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                cell(s.l_exp),
                cell(s.l_ver),
                cell(s.l_pre),
                s.l_combined.to_string(),
                s.lr.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn epoch_means(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_combined).collect()
    }
}

/// Training outcome that goes into `manifest.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub with_verification: bool,
    /// `three_task` when the verification term is active, else `two_task`.
    pub loss_form: String,
    pub loss_normalization: LossNormalization,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochSummary>,
    pub created_at: chrono::DateTime<Utc>,
}

pub struct TrainedModel<B> {
    pub backend: B,
    /// 1-based epoch whose parameters the backend holds, if any training ran.
    pub best_epoch: Option<usize>,
}

impl<B: Seq2SeqBackend> TrainedModel<B> {
    pub fn new(backend: B) -> Self {
        TrainedModel {
            backend,
            best_epoch: None,
        }
    }
}

/// A prediction mapped into the label alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub label: Polarity,
    /// The generation did not name a label and `neutral` was substituted.
    pub fallback: bool,
    pub raw: String,
}

/// Lowercases, trims whitespace and surrounding punctuation, and reads the
/// result as a label.
pub fn normalize_label(raw: &str) -> Option<Polarity> {
    raw.trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
        .parse()
        .ok()
}

pub fn to_prediction(raw: String) -> Prediction {
    match normalize_label(&raw) {
        Some(label) => Prediction {
            label,
            fallback: false,
            raw,
        },
        None => {
            log::warn!("unmappable prediction {raw:?}; falling back to neutral");
            Prediction {
                label: Polarity::Neutral,
                fallback: true,
                raw,
            }
        }
    }
}

const PREDICT_CHUNK: usize = 32;

/// Runs the predict task for every example, in order.
pub fn predict_many<B: Seq2SeqBackend>(
    model: &TrainedModel<B>,
    examples: &[&Example],
) -> Result<Vec<Prediction>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(PREDICT_CHUNK) {
        let inputs: Vec<String> = chunk.iter().map(|e| taskset::build_predict(e).input_text).collect();
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let raws = model
            .backend
            .generate(&refs, PREDICT_MAX_NEW_TOKENS)
            .map_err(|source| TrainError::Inference {
                example_id: chunk.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(","),
                source,
            })?;
        if raws.len() != chunk.len() {
            return Err(TrainError::Inference {
                example_id: chunk[0].id.clone(),
                source: BackendError::new("backend returned the wrong number of outputs"),
            });
        }
        out.extend(raws.into_iter().map(to_prediction));
    }
    Ok(out)
}

pub fn predict<B: Seq2SeqBackend>(model: &TrainedModel<B>, example: &Example) -> Result<Prediction, TrainError> {
    Ok(predict_many(model, &[example])?.remove(0))
}

/// A shuffled, endlessly cycling stream of one task's instances.
struct TaskStream<'a> {
    task: Task,
    items: Vec<&'a TrainingInstance>,
    cursor: usize,
}

impl<'a> TaskStream<'a> {
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a TrainingInstance> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size.min(self.items.len()) {
            if self.cursor == self.items.len() {
                self.cursor = 0;
                self.items.shuffle(rng);
            }
            batch.push(self.items[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn validation_f1<B: Seq2SeqBackend>(model: &TrainedModel<B>, val: &Dataset) -> Result<Option<f64>, TrainError> {
    let examples = val.slice(Split::Validation, false);
    if examples.is_empty() {
        return Ok(None);
    }
    let preds: Vec<Polarity> = predict_many(model, &examples)?.into_iter().map(|p| p.label).collect();
    let gold: Vec<Polarity> = examples.iter().map(|e| e.polarity).collect();
    Ok(Some(macro_f1(&preds, &gold).map_err(|e| TrainError::Argument(e.to_string()))?))
}

/// Fine-tunes `backend` on `taskset`.
///
/// Each step draws one batch per active task (a task is active when its
/// weight is positive), accumulates each weighted loss, and applies a single
/// update. An epoch is one pass over the predict stream; the other streams
/// cycle. With `run_dir`, every epoch is checkpointed to `epoch_{k}/`, the
/// best one (validation macro-F1, or lowest mean loss without a validation
/// split) is restored at the end, and `train_log.csv` plus `manifest.json`
/// are written.
pub fn train<B: Seq2SeqBackend>(
    taskset: &TaskSet,
    val: &Dataset,
    config: &TrainConfig,
    mut backend: B,
    run_dir: Option<&Path>,
) -> Result<(TrainedModel<B>, TrainLog), TrainError> {
    config.validate()?;
    if taskset.is_empty() {
        return Err(TrainError::Config("task set is empty".into()));
    }
    let weights = config.weights;
    if weights.gamma > 0.0 && (!taskset.with_verification || taskset.count(Task::Verify) == 0) {
        return Err(TrainError::Config(
            "gamma > 0 requires a task set built with verification instances".into(),
        ));
    }

    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok((TrainedModel::new(backend), log));
    }
    backend.configure(config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Explain and verify before predict; the order only affects logging.
    let mut streams: Vec<TaskStream> = Vec::new();
    for task in [Task::Explain, Task::Verify, Task::Predict] {
        if weights.of(task) <= 0.0 {
            continue;
        }
        let mut items: Vec<&TrainingInstance> = taskset.of_task(task).collect();
        if items.is_empty() {
            return Err(TrainError::Config(format!("{task} task has weight > 0 but no instances")));
        }
        items.shuffle(&mut rng);
        streams.push(TaskStream { task, items, cursor: 0 });
    }
    let predict_len = taskset.count(Task::Predict);
    let steps_per_epoch = predict_len.div_ceil(config.batch_size).max(1);

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut step = 0;
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=config.epochs {
        let mut epoch_sum = 0.0;
        for _ in 0..steps_per_epoch {
            step += 1;
            let mut losses: HashMap<Task, f64> = HashMap::new();
            for stream in &mut streams {
                let batch = stream.next_batch(config.batch_size, &mut rng);
                let pairs: Vec<(&str, &str)> = batch
                    .iter()
                    .map(|i| (i.input_text.as_str(), i.target_text.as_str()))
                    .collect();
                let loss = backend.accumulate(&pairs, weights.of(stream.task))?;
                if !loss.is_finite() {
                    backend.discard();
                    return Err(TrainError::NonFiniteLoss {
                        step,
                        task: stream.task,
                        batch_ids: batch.iter().map(|i| i.example_id.clone()).collect(),
                    });
                }
                losses.insert(stream.task, loss);
            }
            let get = |t| losses.get(&t).copied();
            let combined = combine_losses(
                get(Task::Explain).unwrap_or(0.0),
                get(Task::Verify).unwrap_or(0.0),
                get(Task::Predict).unwrap_or(0.0),
                weights,
            )?;
            backend.update(config.learning_rate)?;
            epoch_sum += combined;
            log.steps.push(StepRecord {
                step,
                epoch,
                l_exp: get(Task::Explain),
                l_ver: get(Task::Verify),
                l_pre: get(Task::Predict),
                l_combined: combined,
                lr: config.learning_rate,
            });
        }

        let mean_combined = epoch_sum / steps_per_epoch as f64;
        let model = TrainedModel::new(backend);
        let val_f1 = validation_f1(&model, val)?;
        backend = model.backend;
        let checkpoint = match run_dir {
            Some(dir) => {
                let ck = dir.join(format!("epoch_{epoch}"));
                backend.save(&ck)?;
                Some(ck)
            }
            None => None,
        };
        log::info!("epoch {epoch}: mean loss {mean_combined:.4}, val macro-F1 {val_f1:?}");
        // Higher score is better; loss is negated when there is no validation split.
        let score = val_f1.unwrap_or(-mean_combined);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((epoch, score));
        }
        log.epochs.push(EpochSummary {
            epoch,
            mean_combined,
            val_macro_f1: val_f1,
            checkpoint,
        });
    }

    let best_epoch = best.map(|(e, _)| e);
    if let (Some(dir), Some(be)) = (run_dir, best_epoch) {
        if be != config.epochs {
            backend.load(&dir.join(format!("epoch_{be}")))?;
        }
        std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
        let manifest = RunManifest {
            config: config.clone(),
            config_hash: config.hash(),
            with_verification: taskset.with_verification,
            loss_form: if weights.gamma > 0.0 { "three_task" } else { "two_task" }.into(),
            loss_normalization: backend.loss_normalization(),
            best_epoch,
            epochs: log.epochs.clone(),
            created_at: Utc::now(),
        };
        let mut f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &manifest).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }

    Ok((
        TrainedModel {
            backend,
            best_epoch,
        },
        log,
    ))
}

/// `α, γ ∈ {0, 0.1, 0.3, 0.5}` with `α + γ ≤ 0.9`.
pub fn default_grid() -> Vec<LossWeights> {
    const STEPS: [f64; 4] = [0.0, 0.1, 0.3, 0.5];
    STEPS
        .iter()
        .flat_map(|&alpha| STEPS.iter().map(move |&gamma| LossWeights { alpha, gamma }))
        .filter(|w| w.alpha + w.gamma <= 0.9 + WEIGHT_EPS)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub alpha: f64,
    pub gamma: f64,
    pub val_macro_f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: LossWeights,
    pub table: Vec<SearchRow>,
}

impl SearchOutcome {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["alpha", "gamma", "val_macro_f1", "error"]).expect("in-memory write");
        for r in &self.table {
            w.write_record([
                r.alpha.to_string(),
                r.gamma.to_string(),
                cell(r.val_macro_f1),
                r.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// Picks the row with the highest F1; ties go to larger γ, then larger α.
pub fn select_best(table: &[SearchRow]) -> Option<LossWeights> {
    table
        .iter()
        .filter_map(|r| r.val_macro_f1.map(|f| (f, r)))
        .max_by(|(fa, a), (fb, b)| {
            fa.total_cmp(fb)
                .then(a.gamma.total_cmp(&b.gamma))
                .then(a.alpha.total_cmp(&b.alpha))
        })
        .map(|(_, r)| LossWeights {
            alpha: r.alpha,
            gamma: r.gamma,
        })
}

/// Trains one short run per grid point on a fresh backend from `make_backend`
/// and scores it by validation macro-F1. A failing point is recorded in the
/// table and the search continues.
pub fn search_weights<B: Seq2SeqBackend>(
    taskset: &TaskSet,
    val: &Dataset,
    grid: &[LossWeights],
    config: &TrainConfig,
    mut make_backend: impl FnMut() -> Result<B, BackendError>,
) -> Result<SearchOutcome, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Argument("search grid is empty".into()));
    }
    for w in grid {
        w.validate()?;
    }
    if val.count(Split::Validation) == 0 {
        return Err(TrainError::Config("weight search needs validation examples".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &weights in grid {
        let cfg = TrainConfig {
            weights,
            ..config.clone()
        };
        let outcome = make_backend()
            .map_err(TrainError::from)
            .and_then(|b| train(taskset, val, &cfg, b, None))
            .and_then(|(model, _)| validation_f1(&model, val));
        let row = match outcome {
            Ok(f1) => SearchRow {
                alpha: weights.alpha,
                gamma: weights.gamma,
                val_macro_f1: f1,
                error: None,
            },
            Err(e) => {
                log::warn!("grid point alpha={} gamma={} failed: {e}", weights.alpha, weights.gamma);
                SearchRow {
                    alpha: weights.alpha,
                    gamma: weights.gamma,
                    val_macro_f1: None,
                    error: Some(e.to_string()),
                }
            }
        };
        table.push(row);
    }
    let best = select_best(&table)
        .ok_or_else(|| TrainError::Config("every grid point failed".into()))?;
    Ok(SearchOutcome { best, table })
}
