//! Building blocks for learning aspect-level implicit sentiment from
//! teacher-generated three-hop rationales.
//!
//! The pipeline has two stages. Stage one renders prompts for every training
//! example, sends them to a text-generation backend through [`gateway`], and
//! parses the replies into [`rationale::Rationale`] values with an
//! answer-based verification signal. Stage two assembles a multi-task
//! corpus ([`taskset`]), fine-tunes a sequence-to-sequence backend under a
//! weighted loss ([`training`]), and scores it on the overall and implicit
//! slices ([`evaluation`]).

pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod io;
pub mod prompts;
pub mod rationale;
pub mod taskset;
pub mod training;

pub use corpus::{Dataset, DatasetName, Example, Polarity, Split};
pub use evaluation::{EvalReport, SliceMetrics};
pub use gateway::{GenerationRecord, GenerationRequest, Gateway};
pub use prompts::{PromptMode, RenderedPrompt};
pub use rationale::{Rationale, VerificationReason, VerificationSignal};
pub use taskset::{Task, TaskSet, TrainingInstance};
pub use training::{LossWeights, Seq2SeqBackend, TrainConfig, TrainedModel};
