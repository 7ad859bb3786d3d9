//! Deterministic stand-in backends for exercising the trainer and the
//! evaluation path without a real model.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use super::{BackendError, Seq2SeqBackend};
use crate::taskset::Task;

fn task_of(input: &str) -> Option<Task> {
    Task::ALL.into_iter().find(|t| input.starts_with(t.prefix()))
}

/// Loss is a closed-form function of the batch: `(k + 1) / (n + decay·u)`
/// where `k` is 0, 1, 2 for predict, explain, verify, `n` the batch size and
/// `u` the number of updates applied so far. Generation answers from a
/// lookup table, else a constant.
pub struct ClosedFormBackend {
    pub decay: f64,
    pub updates: usize,
    /// Every `(task, batch size, weight)` seen by `accumulate`, in order.
    pub calls: Vec<(Option<Task>, usize, f64)>,
    pub answers: HashMap<String, String>,
    pub constant: String,
    pending: f64,
}

impl ClosedFormBackend {
    pub fn new(decay: f64) -> Self {
        ClosedFormBackend {
            decay,
            updates: 0,
            calls: Vec::new(),
            answers: HashMap::new(),
            constant: "neutral".into(),
            pending: 0.0,
        }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        ClosedFormBackend {
            constant: text.into(),
            ..Self::new(0.0)
        }
    }

    /// The loss `accumulate` returns for a batch of `n` `task` instances
    /// after `updates` updates.
    pub fn expected_loss(task: Task, n: usize, updates: usize, decay: f64) -> f64 {
        let k = match task {
            Task::Predict => 0.0,
            Task::Explain => 1.0,
            Task::Verify => 2.0,
        };
        (k + 1.0) / (n as f64 + decay * updates as f64)
    }

    /// Weighted loss accumulated since the last update.
    pub fn pending(&self) -> f64 {
        self.pending
    }
}

impl Seq2SeqBackend for ClosedFormBackend {
    fn id(&self) -> String {
        "closed-form".into()
    }

    fn accumulate(&mut self, batch: &[(&str, &str)], weight: f64) -> Result<f64, BackendError> {
        let task = batch.first().and_then(|(i, _)| task_of(i));
        self.calls.push((task, batch.len(), weight));
        let loss = Self::expected_loss(task.unwrap_or(Task::Predict), batch.len(), self.updates, self.decay);
        self.pending += weight * loss;
        Ok(loss)
    }

    fn update(&mut self, _learning_rate: f64) -> Result<(), BackendError> {
        self.updates += 1;
        self.pending = 0.0;
        Ok(())
    }

    fn discard(&mut self) {
        self.pending = 0.0;
    }

    fn generate(&self, inputs: &[&str], _max_new_tokens: usize) -> Result<Vec<String>, BackendError> {
        Ok(inputs
            .iter()
            .map(|i| self.answers.get(*i).cloned().unwrap_or_else(|| self.constant.clone()))
            .collect())
    }

    fn save(&self, dir: &Path) -> Result<(), BackendError> {
        std::fs::create_dir_all(dir).map_err(BackendError::new)?;
        std::fs::write(dir.join("updates"), self.updates.to_string()).map_err(BackendError::new)
    }

    fn load(&mut self, dir: &Path) -> Result<(), BackendError> {
        let raw = std::fs::read_to_string(dir.join("updates")).map_err(BackendError::new)?;
        self.updates = raw.trim().parse().map_err(BackendError::new)?;
        Ok(())
    }
}

/// Answers every input from a fixed table; unknown inputs are an error.
/// Counts generate calls behind a mutex so it can be shared immutably.
pub struct LookupBackend {
    pub table: HashMap<String, String>,
    calls: Mutex<usize>,
}

impl LookupBackend {
    pub fn new(table: HashMap<String, String>) -> Self {
        LookupBackend {
            table,
            calls: Mutex::new(0),
        }
    }

    pub fn generate_calls(&self) -> usize {
        *self.calls.lock().expect("counter poisoned")
    }
}

impl Seq2SeqBackend for LookupBackend {
    fn id(&self) -> String {
        "lookup".into()
    }

    fn accumulate(&mut self, _batch: &[(&str, &str)], _weight: f64) -> Result<f64, BackendError> {
        Ok(0.0)
    }

    fn update(&mut self, _learning_rate: f64) -> Result<(), BackendError> {
        Ok(())
    }

    fn discard(&mut self) {}

    fn generate(&self, inputs: &[&str], _max_new_tokens: usize) -> Result<Vec<String>, BackendError> {
        *self.calls.lock().expect("counter poisoned") += 1;
        inputs
            .iter()
            .map(|i| {
                self.table
                    .get(*i)
                    .cloned()
                    .ok_or_else(|| BackendError::new(format!("no answer for {i:?}")))
            })
            .collect()
    }

    fn save(&self, _dir: &Path) -> Result<(), BackendError> {
        Ok(())
    }

    fn load(&mut self, _dir: &Path) -> Result<(), BackendError> {
        Ok(())
    }
}
