//! Benchmark harness for labeling spatial trajectories with chat language models.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`trajgen`]: seeded 2D direction datasets, the direction oracle and the
//!   shape manifest loader.
//! - [`trajdata`]: 3D end-effector trajectories, grid normalization and human
//!   cleaning selections.
//! - [`prompting`]: transcript builders for zero-shot, in-context,
//!   chain-of-thought and spatial prefix prompting.
//! - [`llmio`]: OpenAI-compatible HTTP backend and deterministic mocks.
//! - [`extract`]: answer extraction from raw model text.
//! - [`spartqa`]: textual spatial QA instances and choice grading.
//! - [`metrics`]: accuracy, macro-F1 and the per-sequence direction error rate.
//! - [`runner`]: experiment orchestration, persistence, reports and the
//!   annotation HTTP API.

pub mod extract;
pub mod llmio;
pub mod manifest;
pub mod metrics;
pub mod prompting;
pub mod rng;
pub mod runner;
pub mod samples;
pub mod spartqa;
pub mod trajdata;
pub mod trajgen;

pub use extract::{ParsedAnswer, Vocabulary};
pub use llmio::{BackendConfig, BackendKind, LlmClient, MockPolicy, ModelResponse};
pub use manifest::ManifestError;
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use prompting::{ChatMessage, ChatTranscript, PromptPlan, Role, Strategy, Task};
pub use runner::{ExperimentConfig, GradeRecord, RunRecord};
pub use spartqa::{QType, SpartQAInstance};
pub use trajdata::{CleaningSelection, MotionClass, Point3D, Trajectory3D};
pub use trajgen::{
    DatasetSpec, DirectionLabel, DirectionSequence, NumericFormat, Point2D, ShapeInstance,
};
