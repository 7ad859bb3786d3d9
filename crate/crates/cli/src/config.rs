//! The TOML pipeline configuration. Relative paths are resolved against the
//! directory holding the configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sentreason_core::io::sha256_hex;
use sentreason_core::taskset::{ExplainMode, MissingPolicy};
use sentreason_core::training::{LossWeights, TrainConfig};
use sentreason_core::{DatasetName, PromptMode, Split};
use sentreason_seq2seq::Hyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Parent of all run directories.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub taskset: TaskSetConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub search: SearchConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub name: DatasetName,
    /// A canonical JSONL file; mutually exclusive with `semeval`.
    #[serde(default)]
    pub canonical: Option<PathBuf>,
    #[serde(default)]
    pub semeval: Vec<SemevalSource>,
    /// Share of train examples held out for validation when the source has
    /// no validation split.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemevalSource {
    pub xml: PathBuf,
    #[serde(default)]
    pub implicit_tags: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Mock,
    Openai,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub mode: PromptMode,
    pub backend: GeneratorKind,
    pub generator_id: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub max_in_flight: usize,
    pub max_retries: u32,
    /// Largest tolerated share of failed requests before the command fails.
    pub failure_threshold: f64,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub mock: MockPolicy,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: PromptMode::ThRe,
            backend: GeneratorKind::Mock,
            generator_id: "templated-mock".into(),
            temperature: 0.0,
            max_new_tokens: 256,
            max_in_flight: 4,
            max_retries: 3,
            failure_threshold: 0.5,
            base_url: None,
            model: None,
            api_key_env: "OPENAI_API_KEY".into(),
            mock: MockPolicy::default(),
        }
    }
}

/// Per-example behaviour of the mock teacher, drawn from a hash of the seed
/// and example id. Rates are probabilities and must sum to at most 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockPolicy {
    pub wrong_rate: f64,
    pub ambiguous_rate: f64,
    pub no_label_rate: f64,
    pub refuse_rate: f64,
}

impl Default for MockPolicy {
    fn default() -> Self {
        MockPolicy {
            wrong_rate: 0.1,
            ambiguous_rate: 0.1,
            no_label_rate: 0.02,
            refuse_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSetConfig {
    pub mode: ExplainMode,
    pub with_verification: bool,
    pub missing: MissingPolicy,
}

impl Default for TaskSetConfig {
    fn default() -> Self {
        TaskSetConfig {
            mode: ExplainMode::Re,
            with_verification: true,
            missing: MissingPolicy::Skip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_input_tokens: usize,
    pub max_target_tokens: usize,
    pub backend: String,
    pub d_model: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let h = Hyper::default();
        TrainSection {
            alpha: t.weights.alpha,
            gamma: t.weights.gamma,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_input_tokens: t.max_input_tokens,
            max_target_tokens: t.max_target_tokens,
            backend: t.backend_id,
            d_model: h.d_model,
            ff_dim: h.ff_dim,
            max_positions: h.max_positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Epochs per grid point.
    pub epochs: usize,
    /// `[alpha, gamma]` pairs; empty means the default grid.
    pub grid: Vec<[f64; 2]>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { epochs: 1, grid: Vec::new() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl PipelineConfig {
    /// Reads and validates a configuration, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: PipelineConfig = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.data.canonical.as_mut() {
            fix(p);
        }
        for s in &mut self.data.semeval {
            fix(&mut s.xml);
            if let Some(p) = s.implicit_tags.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match (&self.data.canonical, self.data.semeval.is_empty()) {
            (Some(_), false) => return bad("set either data.canonical or data.semeval, not both".into()),
            (None, true) => return bad("one of data.canonical or data.semeval is required".into()),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return bad(format!("data.validation_fraction must be in [0, 1), got {}", self.data.validation_fraction));
        }
        if self.generation.mode == PromptMode::Verify {
            return bad("generation.mode cannot be verify".into());
        }
        let m = self.generation.mock;
        let rates = [m.wrong_rate, m.ambiguous_rate, m.no_label_rate, m.refuse_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || rates.iter().sum::<f64>() > 1.0 + 1e-12 {
            return bad("mock rates must lie in [0, 1] and sum to at most 1".into());
        }
        if !(0.0..=1.0).contains(&self.generation.failure_threshold) {
            return bad("generation.failure_threshold must be in [0, 1]".into());
        }
        if self.generation.backend != GeneratorKind::Mock && self.generation.base_url.is_none() {
            return bad("generation.base_url is required for remote backends".into());
        }
        if self.train.backend != sentreason_seq2seq::BACKEND_ID {
            return bad(format!("unknown train.backend {:?}", self.train.backend));
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for [a, g] in &self.search.grid {
            LossWeights::new(*a, *g).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            weights: LossWeights { alpha: t.alpha, gamma: t.gamma },
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_input_tokens: t.max_input_tokens,
            max_target_tokens: t.max_target_tokens,
            seed: self.seed,
            backend_id: t.backend.clone(),
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            d_model: self.train.d_model,
            ff_dim: self.train.ff_dim,
            max_positions: self.train.max_positions,
            seed: self.seed,
        }
    }

    /// First 12 hex digits of the SHA-256 of the effective configuration.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..12].to_owned()
    }
}
