//! Pipeline stages behind the `sentreason` command. Every stage reads the
//! artifacts of earlier stages from the run directory
//! `{output_dir}/{run_id}/{stage}/` and writes only under its own.

pub mod config;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sentreason_core::corpus::{self, CorpusError};
use sentreason_core::evaluation::{self, ambiguity_report, EvalReport, SliceSelection};
use sentreason_core::gateway::http::{LocalServerBackend, OpenAiChatBackend};
use sentreason_core::gateway::mock::{MockAnswer, TemplatedMock};
use sentreason_core::gateway::{ResponseCache, RetryPolicy, TextBackend};
use sentreason_core::io::sha256_hex;
use sentreason_core::prompts::render;
use sentreason_core::rationale::{verification_signal, RationaleStore, VerificationReason};
use sentreason_core::taskset::{assemble, AssembleOptions, TaskSetCounts};
use sentreason_core::training::{self, default_grid, LossWeights, RunManifest, SearchOutcome, TrainLog};
use sentreason_core::{Dataset, Example, Gateway, GenerationRequest, Polarity, Rationale, Seq2SeqBackend, Split, TaskSet};
use sentreason_seq2seq::TinyTransformer;

pub use config::{GeneratorKind, MockPolicy, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or input data.
    #[error("{0}")]
    Invalid(String),
    /// A required input file or upstream artifact does not exist.
    #[error("missing {what}: {path}")]
    Missing { what: String, path: String },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for validation problems and missing inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Missing { .. } => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        match e {
            config::ConfigError::Read { path, .. } => CliError::Missing { what: "config file".into(), path },
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { path, .. } => CliError::Missing { what: "input file".into(), path },
            other => CliError::Invalid(other.to_string()),
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// What a stage produced: human-readable summary lines and artifact paths.
#[derive(Debug)]
pub struct Produced<T> {
    pub value: T,
    pub lines: Vec<String>,
    pub paths: Vec<PathBuf>,
}

pub struct Run {
    pub config: PipelineConfig,
    pub id: String,
    pub dir: PathBuf,
}

impl Run {
    /// `run_id` defaults to a content hash of the effective configuration.
    pub fn new(config: PipelineConfig, run_id: Option<String>) -> Self {
        let id = run_id.unwrap_or_else(|| config.content_hash());
        let dir = config.output_dir.join(&id);
        Run { config, id, dir }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn upstream(&self, stage: &str, file: &str) -> Result<PathBuf, CliError> {
        let path = self.stage(stage).join(file);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Missing {
                what: format!("upstream artifact (run `sentreason {stage}` first)"),
                path: path.display().to_string(),
            })
        }
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let path = self.upstream("ingest", "dataset.jsonl")?;
        Ok(corpus::load_canonical(&path, self.config.data.name)?)
    }

    fn taskset(&self) -> Result<TaskSet, CliError> {
        self.upstream("build", "taskset.jsonl")?;
        TaskSet::load(&self.stage("build")).map_err(|e| CliError::Invalid(e.to_string()))
    }

    fn rationales(&self, dataset: &Dataset) -> Result<RationaleStore, CliError> {
        let path = self.upstream("generate", "rationales.jsonl")?;
        RationaleStore::load(&path, |id| dataset.get(id).map(|e| e.aspect_term.clone()))
            .map_err(|e| CliError::Invalid(e.to_string()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(failed)?;
    text.push('\n');
    std::fs::write(path, text).map_err(failed)
}

fn create(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Invalid(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub examples: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub implicit: usize,
    pub dropped_conflict: usize,
    pub dropped_unmatched: usize,
    pub warnings: Vec<String>,
}

/// Converts or loads the configured data into one canonical file.
pub fn ingest(run: &Run, validate_only: bool) -> Result<Produced<IngestSummary>, CliError> {
    let data = &run.config.data;
    let mut dropped_conflict = 0;
    let mut dropped_unmatched = 0;
    let mut warnings = Vec::new();
    let dataset = match &data.canonical {
        Some(path) => corpus::load_canonical(path, data.name)?,
        None => {
            let mut parts = Vec::new();
            for src in &data.semeval {
                let conv = corpus::convert_semeval(&src.xml, src.implicit_tags.as_deref(), src.split, data.name)?;
                dropped_conflict += conv.dropped_conflict;
                dropped_unmatched += conv.dropped_unmatched;
                warnings.extend(conv.warnings);
                parts.push(conv.dataset);
            }
            corpus::merge(data.name, parts)?
        }
    };
    let dataset = corpus::ensure_validation_split(dataset, data.validation_fraction);
    let summary = IngestSummary {
        examples: dataset.len(),
        train: dataset.count(Split::Train),
        validation: dataset.count(Split::Validation),
        test: dataset.count(Split::Test),
        implicit: dataset.examples().iter().filter(|e| e.implicit).count(),
        dropped_conflict,
        dropped_unmatched,
        warnings,
    };
    let mut lines = vec![format!(
        "{} examples (train {}, validation {}, test {}; implicit {}); dropped {} conflict, {} unmatched",
        summary.examples,
        summary.train,
        summary.validation,
        summary.test,
        summary.implicit,
        summary.dropped_conflict,
        summary.dropped_unmatched
    )];
    lines.extend(summary.warnings.iter().map(|w| format!("warning: {w}")));
    let mut paths = Vec::new();
    if !validate_only {
        let dir = run.stage("ingest");
        create(&dir)?;
        let out = dir.join("dataset.jsonl");
        corpus::write_canonical(&dataset, &out).map_err(failed)?;
        write_json(&dir.join("summary.json"), &summary)?;
        paths = vec![out, dir.join("summary.json")];
    }
    Ok(Produced { value: summary, lines, paths })
}

/// Deterministic value in `[0, 1)` from the seed and an example id.
fn unit_hash(seed: u64, key: &str) -> f64 {
    let hex = sha256_hex(format!("{seed}:{key}").as_bytes());
    let n = u64::from_str_radix(&hex[..16], 16).expect("hex digest");
    (n >> 11) as f64 / (1u64 << 53) as f64
}

fn other_label(gold: Polarity, u: f64) -> Polarity {
    let others: Vec<Polarity> = Polarity::ALL.into_iter().filter(|p| *p != gold).collect();
    others[usize::from(u >= 0.5)]
}

/// The mock teacher's answer for one example under `policy`.
pub fn mock_answer(policy: &MockPolicy, seed: u64, example: &Example) -> MockAnswer {
    let u = unit_hash(seed, &example.id);
    let v = unit_hash(seed.wrapping_add(1), &example.id);
    let gold = example.polarity;
    let mut edge = policy.refuse_rate;
    if u < edge {
        return MockAnswer::Refuse;
    }
    edge += policy.no_label_rate;
    if u < edge {
        return MockAnswer::NoLabel;
    }
    edge += policy.wrong_rate;
    if u < edge {
        return MockAnswer::Label(other_label(gold, v));
    }
    edge += policy.ambiguous_rate;
    if u < edge {
        let other = other_label(gold, (v * 2.0).fract());
        return if v < 0.5 { MockAnswer::Hedged(gold, other) } else { MockAnswer::Hedged(other, gold) };
    }
    MockAnswer::Label(gold)
}

fn text_backend(run: &Run, dataset: &Dataset) -> Result<Box<dyn TextBackend>, CliError> {
    let g = &run.config.generation;
    Ok(match g.backend {
        GeneratorKind::Mock => {
            let mut mock = TemplatedMock::new(MockAnswer::NoLabel);
            for ex in dataset.examples() {
                mock.script(ex, mock_answer(&g.mock, run.config.seed, ex));
            }
            Box::new(mock)
        }
        GeneratorKind::Openai => {
            let base = g.base_url.clone().unwrap_or_default();
            let model = g.model.clone().unwrap_or_else(|| g.generator_id.clone());
            Box::new(OpenAiChatBackend::from_env(base, model, &g.api_key_env).map_err(CliError::Invalid)?)
        }
        GeneratorKind::Local => Box::new(LocalServerBackend::new(g.base_url.clone().unwrap_or_default())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub requests: usize,
    pub succeeded: usize,
    pub failed: Vec<FailedItem>,
    pub verified_true: usize,
    pub verified_false: usize,
    pub unparseable: usize,
    pub ambiguous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedItem {
    pub example_id: String,
    pub error: String,
}

/// Rationales and verification signals for every train example.
pub fn generate(run: &Run) -> Result<Produced<GenerateSummary>, CliError> {
    let dataset = run.dataset()?;
    let g = &run.config.generation;
    let train = dataset.slice(Split::Train, false);
    let requests: Vec<GenerationRequest> = train
        .iter()
        .map(|ex| {
            let prompt = render(ex, g.mode).map_err(|e| CliError::Invalid(e.to_string()))?;
            Ok(GenerationRequest {
                temperature: g.temperature,
                max_new_tokens: g.max_new_tokens,
                seed: Some(run.config.seed),
                ..GenerationRequest::new(prompt, g.generator_id.clone())
            })
        })
        .collect::<Result<_, CliError>>()?;

    let dir = run.stage("generate");
    create(&dir)?;
    let cache = ResponseCache::open(&dir.join("cache.jsonl")).map_err(failed)?;
    let retry = RetryPolicy { max_retries: g.max_retries, ..RetryPolicy::default() };
    let gateway = Gateway::new(text_backend(run, &dataset)?, cache, retry);
    let results = gateway.generate_batch(&requests, g.max_in_flight);

    let mut store = RationaleStore::new();
    let mut summary = GenerateSummary {
        requests: requests.len(),
        succeeded: 0,
        failed: Vec::new(),
        verified_true: 0,
        verified_false: 0,
        unparseable: 0,
        ambiguous: 0,
    };
    for (ex, result) in train.iter().zip(results) {
        match result {
            Ok(record) => {
                let r = Rationale::parse(&ex.id, g.mode, &g.generator_id, record.response_text, &ex.aspect_term);
                let signal = verification_signal(&ex.id, r.resolved, ex.polarity);
                summary.succeeded += 1;
                match signal.reason {
                    VerificationReason::Match => summary.verified_true += 1,
                    VerificationReason::Mismatch => summary.verified_false += 1,
                    VerificationReason::Unparseable => {
                        summary.verified_false += 1;
                        summary.unparseable += 1;
                    }
                }
                summary.ambiguous += usize::from(r.is_ambiguous());
                store.insert(r, signal);
            }
            Err(e) => summary.failed.push(FailedItem { example_id: ex.id.clone(), error: e.to_string() }),
        }
    }
    let out = dir.join("rationales.jsonl");
    store.save(&out).map_err(failed)?;
    write_json(&dir.join("summary.json"), &summary)?;

    let mut lines = vec![
        format!(
            "{} of {} generations succeeded; verification true {}, false {} ({} unparseable); {} ambiguous",
            summary.succeeded,
            summary.requests,
            summary.verified_true,
            summary.verified_false,
            summary.unparseable,
            summary.ambiguous
        ),
        format!("backend calls: {} (the rest were cache hits)", gateway.backend_calls()),
    ];
    lines.extend(summary.failed.iter().map(|f| format!("failed {}: {}", f.example_id, f.error)));
    let rate = if summary.requests == 0 { 0.0 } else { summary.failed.len() as f64 / summary.requests as f64 };
    if rate > g.failure_threshold {
        return Err(CliError::Failed(format!(
            "{} of {} generations failed, above the threshold {}",
            summary.failed.len(),
            summary.requests,
            g.failure_threshold
        )));
    }
    Ok(Produced { value: summary, lines, paths: vec![out, dir.join("summary.json"), dir.join("cache.jsonl")] })
}

/// Assembles the multi-task corpus from the dataset and rationale store.
pub fn build(run: &Run) -> Result<Produced<TaskSetCounts>, CliError> {
    let dataset = run.dataset()?;
    let store = run.rationales(&dataset)?;
    let t = run.config.taskset;
    let options = AssembleOptions {
        mode: t.mode,
        with_verification: t.with_verification,
        seed: run.config.seed,
        missing: t.missing,
        ..AssembleOptions::default()
    };
    let ts = assemble(&dataset, &store, options).map_err(|e| CliError::Invalid(e.to_string()))?;
    let dir = run.stage("build");
    ts.save(&dir).map_err(failed)?;
    let c = &ts.counts;
    let per_task: Vec<String> = c.per_task.iter().map(|(k, v)| format!("{k} {v}")).collect();
    let lines = vec![format!(
        "{} instances from {} examples ({}); verify true {}, false {}; {} skipped",
        ts.len(),
        c.examples,
        per_task.join(", "),
        c.verify_true,
        c.verify_false,
        c.skipped.len()
    )];
    Ok(Produced { value: ts.counts.clone(), lines, paths: vec![dir.join("taskset.jsonl"), dir.join("manifest.json")] })
}

fn fresh_backend(run: &Run, taskset: &TaskSet) -> Result<TinyTransformer, CliError> {
    TinyTransformer::for_taskset(taskset, run.config.hyper()).map_err(failed)
}

fn train_error(e: training::TrainError) -> CliError {
    match e {
        training::TrainError::Argument(_) | training::TrainError::Config(_) => CliError::Invalid(e.to_string()),
        other => CliError::Failed(other.to_string()),
    }
}

/// Trains the configured backend; the best epoch is also saved as `best/`.
pub fn train(run: &Run) -> Result<Produced<TrainLog>, CliError> {
    let dataset = run.dataset()?;
    let ts = run.taskset()?;
    let cfg = run.config.train_config();
    let dir = run.stage("train");
    let backend = fresh_backend(run, &ts)?;
    let params = backend.parameter_count();
    let (model, log) = training::train(&ts, &dataset, &cfg, backend, Some(&dir)).map_err(train_error)?;
    model.backend.save(&dir.join("best")).map_err(failed)?;
    let mut lines = vec![format!("{} parameters, {} optimizer steps", params, log.steps.len())];
    for e in &log.epochs {
        let f1 = e.val_macro_f1.map(|f| format!("{f:.4}")).unwrap_or_else(|| "n/a".into());
        lines.push(format!("epoch {}: mean combined loss {:.4}, validation macro-F1 {f1}", e.epoch, e.mean_combined));
    }
    if let Some(best) = model.best_epoch {
        lines.push(format!("best epoch {best}"));
    }
    let paths = vec![dir.join("train_log.csv"), dir.join("manifest.json"), dir.join("best")];
    Ok(Produced { value: log, lines, paths })
}

pub fn read_train_manifest(run: &Run) -> Result<RunManifest, CliError> {
    let path = run.upstream("train", "manifest.json")?;
    let raw = std::fs::read_to_string(&path).map_err(failed)?;
    serde_json::from_str(&raw).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Short training runs over the weight grid, scored on validation macro-F1.
pub fn search(run: &Run) -> Result<Produced<SearchOutcome>, CliError> {
    let dataset = run.dataset()?;
    let ts = run.taskset()?;
    let grid: Vec<LossWeights> = if run.config.search.grid.is_empty() {
        default_grid()
    } else {
        run.config.search.grid.iter().map(|[alpha, gamma]| LossWeights { alpha: *alpha, gamma: *gamma }).collect()
    };
    let cfg = training::TrainConfig { epochs: run.config.search.epochs, ..run.config.train_config() };
    let outcome = training::search_weights(&ts, &dataset, &grid, &cfg, || {
        TinyTransformer::for_taskset(&ts, run.config.hyper())
    })
    .map_err(train_error)?;
    let dir = run.stage("search");
    create(&dir)?;
    std::fs::write(dir.join("search.csv"), outcome.to_csv()).map_err(failed)?;
    write_json(&dir.join("best.json"), &outcome.best)?;
    let mut lines: Vec<String> = outcome
        .table
        .iter()
        .map(|r| match (&r.val_macro_f1, &r.error) {
            (Some(f), _) => format!("alpha {} gamma {}: validation macro-F1 {f:.4}", r.alpha, r.gamma),
            (None, e) => format!("alpha {} gamma {}: {}", r.alpha, r.gamma, e.as_deref().unwrap_or("no score")),
        })
        .collect();
    lines.push(format!("best alpha {} gamma {}", outcome.best.alpha, outcome.best.gamma));
    Ok(Produced { value: outcome, lines, paths: vec![dir.join("search.csv"), dir.join("best.json")] })
}

fn slice_lines(report: &EvalReport, which: SliceSelection) -> Vec<String> {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "absent".into());
    let mut rows = Vec::new();
    if which != SliceSelection::Isa {
        rows.push(("all", &report.slices.all));
    }
    if which != SliceSelection::All {
        rows.push(("isa", &report.slices.isa));
    }
    rows.into_iter()
        .map(|(name, m)| format!("{name}: n {}, accuracy {}, macro-F1 {}", m.n, fmt(m.accuracy), fmt(m.macro_f1)))
        .collect()
}

/// Scores the trained model on the test split.
pub fn eval(run: &Run, which: SliceSelection) -> Result<Produced<EvalReport>, CliError> {
    let dataset = run.dataset()?;
    let best = run.upstream("train", "best")?;
    let mut backend = TinyTransformer::from_dir(&best).map_err(failed)?;
    backend.configure(&run.config.train_config()).map_err(failed)?;
    let model = training::TrainedModel::new(backend);
    let report = evaluation::evaluate(&model, &dataset).map_err(|e| match e {
        evaluation::EvalError::EmptyTestSplit => CliError::Invalid(e.to_string()),
        other => CliError::Failed(other.to_string()),
    })?;
    let dir = run.stage("eval");
    report.write(&dir, which).map_err(failed)?;
    let mut lines = slice_lines(&report, which);
    lines.push(format!("{} fallback predictions", report.fallback_count));
    let paths = ["report.json", "results.csv", "errors.csv"].iter().map(|f| dir.join(f)).collect();
    Ok(Produced { value: report, lines, paths })
}

/// Final tables: the evaluation report with the rationale ambiguity counts
/// filled in, plus the per-epoch loss curve.
pub fn report(run: &Run) -> Result<Produced<EvalReport>, CliError> {
    let dataset = run.dataset()?;
    let raw = std::fs::read_to_string(run.upstream("eval", "report.json")?).map_err(failed)?;
    let mut report: EvalReport = serde_json::from_str(&raw).map_err(|e| CliError::Invalid(e.to_string()))?;
    let store = run.rationales(&dataset)?;
    let mut rationales = Vec::new();
    let mut gold = Vec::new();
    for (r, _) in store.iter() {
        if let Some(ex) = dataset.get(&r.example_id) {
            rationales.push(r);
            gold.push(ex.polarity);
        }
    }
    let counts = ambiguity_report(&rationales, &gold).map_err(failed)?;
    report.ambiguity = Some(counts);
    let dir = run.stage("report");
    report.write(&dir, SliceSelection::Both).map_err(failed)?;

    let manifest = read_train_manifest(run)?;
    let mut curve = String::from("epoch,mean_combined,val_macro_f1\n");
    for e in &manifest.epochs {
        let f1 = e.val_macro_f1.map(|f| f.to_string()).unwrap_or_default();
        curve += &format!("{},{},{f1}\n", e.epoch, e.mean_combined);
    }
    std::fs::write(dir.join("loss_curve.csv"), curve).map_err(failed)?;

    let mut lines = slice_lines(&report, SliceSelection::Both);
    lines.push(format!(
        "rationales: {} wrong, {} ambiguous of {}",
        counts.wrong_count, counts.ambiguous_count, counts.total
    ));
    let paths = ["report.json", "results.csv", "errors.csv", "loss_curve.csv"].iter().map(|f| dir.join(f)).collect();
    Ok(Produced { value: report, lines, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sentreason_core::Split;

    fn example(id: &str, polarity: Polarity) -> Example {
        Example {
            id: id.into(),
            sentence: "the soup".into(),
            aspect_term: "soup".into(),
            polarity,
            implicit: false,
            split: Split::Train,
        }
    }

    #[test]
    fn unit_hash_is_stable_and_in_range() {
        let a = unit_hash(3, "x");
        assert_eq!(a, unit_hash(3, "x"));
        assert_ne!(a, unit_hash(4, "x"));
        for i in 0..500 {
            let u = unit_hash(0, &i.to_string());
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn mock_policy_rates_are_respected() {
        let policy = MockPolicy { wrong_rate: 0.2, ambiguous_rate: 0.1, no_label_rate: 0.05, refuse_rate: 0.05 };
        let n = 4000;
        let (mut wrong, mut hedged, mut none, mut refused) = (0, 0, 0, 0);
        for i in 0..n {
            let ex = example(&format!("e{i}"), Polarity::ALL[i % 3]);
            match mock_answer(&policy, 9, &ex) {
                MockAnswer::Label(p) if p != ex.polarity => wrong += 1,
                MockAnswer::Label(_) => {}
                MockAnswer::Hedged(a, b) => {
                    assert_ne!(a, b);
                    assert!(a == ex.polarity || b == ex.polarity);
                    hedged += 1;
                }
                MockAnswer::NoLabel => none += 1,
                MockAnswer::Refuse => refused += 1,
            }
        }
        let share = |k: usize| k as f64 / n as f64;
        assert!((share(wrong) - 0.2).abs() < 0.03);
        assert!((share(hedged) - 0.1).abs() < 0.03);
        assert!((share(none) - 0.05).abs() < 0.02);
        assert!((share(refused) - 0.05).abs() < 0.02);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 2);
        assert_eq!(CliError::Missing { what: "a".into(), path: "b".into() }.exit_code(), 2);
        assert_eq!(CliError::Failed("x".into()).exit_code(), 1);
    }
}
