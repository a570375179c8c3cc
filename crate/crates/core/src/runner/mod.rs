//! Experiment orchestration: load a task's instances, prompt the backend,
//! parse and grade every answer, and persist everything as append-only line
//! logs under `<output>/runs/<run id>/`.
//!
//! | file            | contents                                         |
//! |-----------------|--------------------------------------------------|
//! | `run.json`      | [`RunManifest`]: config digest, instance order   |
//! | `records.jsonl` | one [`RunRecord`] per instance                   |
//! | `stages.jsonl`  | spatial-prefix stage-one answers ([`StageRecord`]) |
//! | `grades.jsonl`  | human [`GradeRecord`]s, latest per instance wins |
//!
//! A rerun with the same config resolves to the same run id and skips every
//! instance that already has a record, so interrupted runs resume without
//! repeating backend calls.

pub mod api;
pub mod log;
pub mod report;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extract::{parse_directions, parse_motion, parse_shape, parse_spartqa, ParsedAnswer, Vocabulary};
use crate::llmio::{BackendConfig, CompletionRequest, LlmClient, LlmError, MockPolicy, ModelResponse, Stage};
use crate::manifest::{self, ManifestError};
use crate::metrics::MetricsError;
use crate::prompting::{
    render_points, ChatTranscript, FewShotExample, PromptBuilder, PromptConfig, PromptError, PromptInput, PromptPlan, Role,
    Strategy, Task,
};
use crate::rng::SplitMix64;
use crate::spartqa::{load_spartqa, QType};
use crate::trajdata::{self, CleaningError, CleaningSelection, MotionClass};
use crate::trajgen::{self, DirectionLabel, NumericFormat, Point2D};

pub use log::{Appender, DedupKey, LogError};
pub use report::{export_report, ExportedReport};

pub const RUN_MANIFEST: &str = "run.json";
pub const RECORDS_LOG: &str = "records.jsonl";
pub const STAGES_LOG: &str = "stages.jsonl";
pub const GRADES_LOG: &str = "grades.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Cleaning(#[from] CleaningError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown reference fixture `{0}`")]
    UnknownFixture(String),
    #[error("run `{0}` already exists with a different configuration")]
    RunConflict(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How a mock backend answers, as written in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum MockSpec {
    Oracle,
    Fixed { label: String },
    /// JSON object file mapping instance id to response text.
    Scripted { path: PathBuf },
}

impl MockSpec {
    /// `oracle`, `fixed:LABEL` or `scripted:PATH`.
    pub fn parse(s: &str) -> Result<Self, RunError> {
        match s.split_once(':') {
            None if s == "oracle" => Ok(MockSpec::Oracle),
            Some(("fixed", label)) if !label.is_empty() => Ok(MockSpec::Fixed { label: label.into() }),
            Some(("scripted", path)) if !path.is_empty() => Ok(MockSpec::Scripted { path: path.into() }),
            _ => Err(RunError::Config(format!(
                "mock policy `{s}` is not one of oracle, fixed:LABEL, scripted:PATH"
            ))),
        }
    }

    pub fn to_policy(&self) -> Result<MockPolicy, RunError> {
        Ok(match self {
            MockSpec::Oracle => MockPolicy::OracleEcho,
            MockSpec::Fixed { label } => MockPolicy::FixedLabel(label.clone()),
            MockSpec::Scripted { path } => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                let map: BTreeMap<String, String> = serde_json::from_str(&text)
                    .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
                MockPolicy::Scripted(map)
            }
        })
    }
}

fn default_example_count() -> usize {
    3
}

/// One experiment, typically read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub strategy: Strategy,
    /// Evaluation dataset, in the task's manifest format.
    pub data: PathBuf,
    /// Cleaning selections applied before normalization (3D motion only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleanings: Option<PathBuf>,
    /// Few-shot pool for in-context and chain-of-thought prompting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub examples: Option<PathBuf>,
    #[serde(default = "default_example_count")]
    pub example_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<PathBuf>,
    pub backend: BackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSpec>,
    /// Root directory; runs land in `<output>/runs/<run id>`.
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Dataset name used to match reference rows, e.g. `calvin-cleaned`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_label: Option<String>,
    /// Lift the per-task strategy restrictions.
    #[serde(default)]
    pub allow_any_strategy: bool,
    /// Queue every record for human grading, not just unparseable ones.
    #[serde(default)]
    pub human_review: bool,
    /// Dispatch at most this many new instances in this invocation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data);
        fix(&mut self.output);
        for p in [&mut self.cleanings, &mut self.examples, &mut self.prompts, &mut self.vocabulary]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(MockSpec::Scripted { path }) = &mut self.mock {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.backend.validate()?;
        if !self.allow_any_strategy {
            let allowed: &[Strategy] = match self.task {
                Task::Direction2D => &[Strategy::ZeroShot, Strategy::InContext],
                Task::Shape2D => &[Strategy::ZeroShot],
                Task::Motion3D | Task::SpartQA => &Strategy::ALL,
            };
            if !allowed.contains(&self.strategy) {
                return Err(RunError::Config(format!(
                    "{} is not evaluated with {} (set allow_any_strategy to override)",
                    self.task, self.strategy
                )));
            }
        }
        if matches!(self.strategy, Strategy::InContext | Strategy::ChainOfThought) {
            if self.examples.is_none() {
                return Err(RunError::Config(format!("{} needs an example pool", self.strategy)));
            }
            if self.example_count == 0 {
                return Err(RunError::Config("example_count must be at least 1".into()));
            }
        }
        if self.cleanings.is_some() && self.task != Task::Motion3D {
            return Err(RunError::Config("cleanings apply to motion3d only".into()));
        }
        if let Some(id) = &self.run_id {
            check_run_id(id)?;
        }
        if self.limit == Some(0) {
            return Err(RunError::Config("limit must be at least 1".into()));
        }
        Ok(())
    }

    /// Explicit run id, or a digest of everything that affects results.
    pub fn resolved_run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        format!("{}-{}-{}", self.task.slug(), self.strategy.slug(), &self.digest()[..12])
    }

    /// Hash of the config minus output location, run id and limit.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.run_id = None;
        c.limit = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Label for reference-table matching; 3D runs default to `calvin` or
    /// `calvin-cleaned`.
    pub fn effective_dataset_label(&self) -> Option<String> {
        self.dataset_label.clone().or_else(|| {
            (self.task == Task::Motion3D).then(|| {
                if self.cleanings.is_some() {
                    "calvin-cleaned".to_string()
                } else {
                    "calvin".to_string()
                }
            })
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.join("runs").join(self.resolved_run_id())
    }
}

/// Run ids become path components, so keep them to a safe alphabet.
pub fn check_run_id(id: &str) -> Result<(), RunError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(RunError::Config(format!("run id `{id}` must be 1-128 of [A-Za-z0-9._-]")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GoldAnswer {
    Directions(Vec<DirectionLabel>),
    Motion(MotionClass),
    Shape(String),
    /// Every acceptable answer; any one of them counts as correct.
    Choice(Vec<String>),
}

impl GoldAnswer {
    /// The answer as a model would ideally phrase it.
    pub fn text(&self) -> String {
        match self {
            GoldAnswer::Directions(labels) => trajgen::join_labels(labels),
            GoldAnswer::Motion(m) => m.as_str().to_string(),
            GoldAnswer::Shape(s) => s.clone(),
            GoldAnswer::Choice(c) => c.join(", "),
        }
    }

    pub fn matches(&self, parsed: &ParsedAnswer) -> bool {
        match (self, parsed) {
            (GoldAnswer::Directions(g), ParsedAnswer::DirectionList(p)) => g == p,
            (GoldAnswer::Motion(g), ParsedAnswer::Motion(p)) => g == p,
            (GoldAnswer::Shape(g), ParsedAnswer::Shape(p)) => g.eq_ignore_ascii_case(p),
            (GoldAnswer::Choice(g), ParsedAnswer::SpartChoice(p)) => g.iter().any(|g| g.eq_ignore_ascii_case(p)),
            _ => false,
        }
    }
}

/// One evaluation item, normalized across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: String,
    pub input: PromptInput,
    pub gold: GoldAnswer,
    pub split: Option<String>,
    pub subtype: Option<QType>,
    pub rationale: Option<String>,
}

/// Loads a task's instances. For 3D motion, cleanings are applied before grid
/// normalization; `strict_cleanings` rejects selections naming unknown ids.
pub fn load_instances(
    task: Task,
    path: &Path,
    cleanings: Option<&[CleaningSelection]>,
    strict_cleanings: bool,
) -> Result<Vec<TaskInstance>, RunError> {
    let out = match task {
        Task::Direction2D => trajgen::load_direction_dataset(path)?
            .into_iter()
            .map(|s| TaskInstance {
                split: Some(s.split()),
                input: PromptInput::Points2D {
                    points: s.points,
                    format: s.format,
                },
                gold: GoldAnswer::Directions(s.gold_labels),
                id: s.id,
                subtype: None,
                rationale: None,
            })
            .collect(),
        Task::Shape2D => trajgen::load_shape_dataset(path)?
            .into_iter()
            .map(|s| TaskInstance {
                split: Some(s.format.as_str().to_string()),
                input: PromptInput::Points2D {
                    points: s.points,
                    format: s.format,
                },
                gold: GoldAnswer::Shape(s.gold_shape),
                id: s.id,
                subtype: None,
                rationale: None,
            })
            .collect(),
        Task::Motion3D => {
            let mut trajs = trajdata::load_trajectories(path)?;
            if let Some(sels) = cleanings {
                let sels: Vec<CleaningSelection> = if strict_cleanings {
                    sels.to_vec()
                } else {
                    sels.iter().filter(|s| trajs.iter().any(|t| t.id == s.trajectory_id)).cloned().collect()
                };
                trajs = trajdata::apply_cleanings(&trajs, &sels)?;
            }
            let mut out = Vec::with_capacity(trajs.len());
            for t in trajs {
                let grid = trajdata::normalize_grid(&t);
                if !grid.is_on_grid() {
                    return Err(RunError::Config(format!("{} did not normalize onto the grid", t.id)));
                }
                out.push(TaskInstance {
                    id: grid.id,
                    input: PromptInput::Points3D { points: grid.points },
                    gold: GoldAnswer::Motion(grid.gold_class),
                    split: None,
                    subtype: None,
                    rationale: None,
                });
            }
            out
        }
        Task::SpartQA => load_spartqa(path)?
            .into_iter()
            .map(|q| TaskInstance {
                id: q.id,
                input: PromptInput::Text {
                    story: q.story,
                    question: q.question,
                    candidates: q.candidates,
                },
                gold: GoldAnswer::Choice(q.gold),
                split: None,
                subtype: Some(q.qtype),
                rationale: q.rationale,
            })
            .collect(),
    };
    let mut seen = HashSet::new();
    for inst in &out {
        if !seen.insert(inst.id.as_str()) {
            return Err(RunError::Config(format!("duplicate instance id `{}` in {}", inst.id, path.display())));
        }
    }
    Ok(out)
}

pub fn label_set(task: Task, vocab: &Vocabulary) -> Vec<String> {
    match task {
        Task::Direction2D => PromptPlan::direction_labels(),
        Task::Motion3D => PromptPlan::motion_labels(),
        Task::Shape2D => vocab.shape_tags(),
        Task::SpartQA => Vec::new(),
    }
}

/// Dispatches to the task's parser.
pub fn parse_answer(inst: &TaskInstance, text: &str, vocab: &Vocabulary, shape_tags: &[String]) -> ParsedAnswer {
    match (&inst.gold, &inst.input) {
        (GoldAnswer::Directions(g), _) => parse_directions(text, g.len(), vocab),
        (GoldAnswer::Motion(_), _) => parse_motion(text, vocab),
        (GoldAnswer::Shape(_), _) => parse_shape(text, shape_tags, vocab),
        (GoldAnswer::Choice(_), PromptInput::Text { candidates, .. }) => parse_spartqa(text, candidates),
        (GoldAnswer::Choice(_), _) => ParsedAnswer::Unparseable("question has no candidates".into()),
    }
}

/// Segment-by-segment reasoning for a direction example.
fn direction_rationale(points: &[Point2D], format: NumericFormat, labels: &[DirectionLabel]) -> String {
    points
        .windows(2)
        .zip(labels)
        .enumerate()
        .map(|(i, (w, label))| {
            let axis = if w[0].x != w[1].x { "x" } else { "y" };
            let change = match label {
                DirectionLabel::Right | DirectionLabel::Up => "increases",
                DirectionLabel::Left | DirectionLabel::Down => "decreases",
            };
            format!(
                "Segment {} goes from {} to {}: {axis} {change}, so {label}.",
                i + 1,
                render_points(&w[..1], format),
                render_points(&w[1..], format)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Picks `k` examples round-robin across gold answers, each answer's group
/// shuffled by `seed`. Pool ids must not overlap the evaluation ids.
pub fn choose_examples(
    pool: &[TaskInstance],
    k: usize,
    seed: u64,
    eval_ids: &HashSet<&str>,
) -> Result<Vec<TaskInstance>, RunError> {
    if let Some(clash) = pool.iter().find(|p| eval_ids.contains(p.id.as_str())) {
        return Err(RunError::Config(format!("example `{}` is also an evaluation instance", clash.id)));
    }
    let mut groups: BTreeMap<String, Vec<&TaskInstance>> = BTreeMap::new();
    for p in pool {
        groups.entry(p.gold.text().to_lowercase()).or_default().push(p);
    }
    let mut rng = SplitMix64::new(seed);
    for group in groups.values_mut() {
        for i in (1..group.len()).rev() {
            group.swap(i, rng.below(i as u64 + 1) as usize);
        }
    }
    let mut queues: Vec<_> = groups.into_values().map(|g| g.into_iter()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let before = out.len();
        for q in &mut queues {
            if out.len() == k {
                break;
            }
            if let Some(inst) = q.next() {
                out.push(inst.clone());
            }
        }
        if out.len() == before {
            break;
        }
    }
    Ok(out)
}

fn to_few_shot(
    inst: &TaskInstance,
    strategy: Strategy,
    prompts: &PromptConfig,
) -> Result<FewShotExample, RunError> {
    let answer = inst.gold.text();
    let rationale = if strategy == Strategy::ChainOfThought {
        let from_config = prompts.cot_rationales.get(&answer.to_lowercase()).cloned();
        let derived = match (&inst.input, &inst.gold) {
            (PromptInput::Points2D { points, format }, GoldAnswer::Directions(labels)) => {
                Some(direction_rationale(points, *format, labels))
            }
            _ => None,
        };
        let r = inst.rationale.clone().or(from_config).or(derived);
        if r.is_none() {
            return Err(RunError::Config(format!("no chain-of-thought rationale for example `{}`", inst.id)));
        }
        r
    } else {
        None
    };
    Ok(FewShotExample {
        input: inst.input.clone(),
        answer,
        rationale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoGrade {
    Correct,
    Incorrect,
    /// Unparseable answer or backend error; needs a human decision.
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumanGrade {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub instance_id: String,
    /// Position in the dataset.
    pub index: usize,
    pub task: Task,
    pub strategy: Strategy,
    /// Digest of the final transcript sent to the backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_digest: Option<String>,
    /// Final user turn, for graders.
    #[serde(default)]
    pub query: String,
    /// One response, or two for spatial prefix prompting (stage one first).
    pub responses: Vec<ModelResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedAnswer>,
    pub gold: GoldAnswer,
    pub auto_grade: AutoGrade,
    pub needs_review: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<QType>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub backend: String,
    pub temperature: f64,
}

impl RunRecord {
    /// Text of the answer that was parsed (the last response).
    pub fn answer_text(&self) -> Option<&str> {
        if self.error.is_some() {
            return None;
        }
        self.responses.last().map(|r| r.text.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub instance_id: String,
    pub run_id: String,
    pub human_grade: HumanGrade,
    pub grader: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default = "Utc::now")]
    pub timestamp: DateTime<Utc>,
    /// Client token; a repeated token is acknowledged without a second append.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission_id: Option<String>,
}

/// Spatial-prefix stage one, logged before stage two is sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub run_id: String,
    pub instance_id: String,
    pub prefix_id: String,
    pub question: String,
    pub response: ModelResponse,
    pub logged_at: DateTime<Utc>,
}

/// Settings that the published numbers leave open, stamped into every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub model: String,
    pub temperature: f64,
    pub f1_averaging: String,
    pub direction_accuracy: String,
    pub err_denominator: String,
    pub unparseable: String,
    pub evaluations_per_instance: u32,
    pub graders_see_gold: bool,
    pub example_count: usize,
    pub prompt_config_digest: String,
}

impl Assumptions {
    fn new(cfg: &ExperimentConfig, prompts: &PromptConfig) -> Self {
        let prompt_json = serde_json::to_string(prompts).expect("prompt config serializes");
        Assumptions {
            model: cfg.backend.model_name.clone(),
            temperature: cfg.backend.temperature,
            f1_averaging: "macro over classes present in gold".into(),
            direction_accuracy: "whole-sequence exact match".into(),
            err_denominator: "segment labels (points - 1)".into(),
            unparseable: "counted as wrong until a human grades it".into(),
            evaluations_per_instance: 1,
            graders_see_gold: true,
            example_count: match cfg.strategy {
                Strategy::InContext | Strategy::ChainOfThought => cfg.example_count,
                _ => 0,
            },
            prompt_config_digest: hex::encode(Sha256::digest(prompt_json.as_bytes()))[..16].to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task: Task,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_label: Option<String>,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub instance_ids: Vec<String>,
    pub example_ids: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub assumptions: Assumptions,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, RunError> {
        let path = run_dir.join(RUN_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| {
            RunError::Manifest(ManifestError::Parse {
                line: e.line(),
                message: e.to_string(),
            })
        })
    }

    fn write_atomic(&self, run_dir: &Path) -> Result<(), RunError> {
        std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let tmp = run_dir.join(format!("{RUN_MANIFEST}.tmp"));
        let path = run_dir.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, json).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub instances: usize,
    /// Records written by this invocation.
    pub new_records: usize,
    /// Instances already recorded before this invocation.
    pub skipped: usize,
    /// New records that carry a backend or prompt error.
    pub errors: usize,
    /// Instances still without a record (only when `limit` cut the run short).
    pub remaining: usize,
    pub backend_calls: u64,
}

struct RunContext<'a> {
    run_id: String,
    run_dir: PathBuf,
    cfg: &'a ExperimentConfig,
    builder: PromptBuilder,
    plan: PromptPlan,
    vocab: Vocabulary,
    shape_tags: Vec<String>,
    client: &'a LlmClient,
    log: &'a Appender,
    stages: HashMap<String, StageRecord>,
}

#[derive(Default)]
struct Attempt {
    digest: Option<String>,
    query: String,
    responses: Vec<ModelResponse>,
}

impl RunContext<'_> {
    async fn call(&self, inst: &TaskInstance, att: &mut Attempt) -> Result<(), RunError> {
        let oracle = inst.gold.text();
        if self.plan.strategy != Strategy::SpatialPrefix {
            let t = self.builder.build(&self.plan, &inst.input)?;
            t.validate()?;
            att.digest = Some(t.digest());
            att.query = last_user_turn(&t);
            att.responses.push(self.client.complete(completion(inst, &oracle, &t, Stage::Main)).await?);
            return Ok(());
        }

        let mut plan = self.plan.clone();
        let prefix = self.builder.select_prefix(&inst.id)?.clone();
        plan.prefix = Some(prefix.clone());
        // Both stages run inside one concurrency slot.
        let slot = self.client.slot().await;
        let stage1 = match self.stages.get(&inst.id) {
            Some(logged) => logged.response.clone(),
            None => {
                let t1 = self.builder.spp_stage1(&plan)?;
                t1.validate()?;
                let response = slot.complete(completion(inst, &oracle, &t1, Stage::Prefix)).await?;
                let record = StageRecord {
                    run_id: self.run_id.clone(),
                    instance_id: inst.id.clone(),
                    prefix_id: prefix.id.clone(),
                    question: prefix.text.clone(),
                    response: response.clone(),
                    logged_at: Utc::now(),
                };
                self.log
                    .append(&self.run_dir.join(STAGES_LOG), &record, Some(DedupKey::new("instance_id", &inst.id)))
                    .await?;
                response
            }
        };
        att.responses.push(stage1.clone());
        let t2 = self.builder.spp_stage2(&plan, &inst.input, &stage1.text)?;
        t2.validate()?;
        att.digest = Some(t2.digest());
        att.query = last_user_turn(&t2);
        att.responses.push(slot.complete(completion(inst, &oracle, &t2, Stage::Main)).await?);
        Ok(())
    }

    async fn process(&self, index: usize, inst: &TaskInstance) -> RunRecord {
        let started_at = Utc::now();
        let mut att = Attempt::default();
        let outcome = self.call(inst, &mut att).await;
        let (parsed, auto_grade, error) = match outcome {
            Ok(()) => {
                let text = &att.responses.last().expect("successful call has a response").text;
                let parsed = parse_answer(inst, text, &self.vocab, &self.shape_tags);
                let grade = if parsed.is_unparseable() {
                    AutoGrade::Pending
                } else if inst.gold.matches(&parsed) {
                    AutoGrade::Correct
                } else {
                    AutoGrade::Incorrect
                };
                (Some(parsed), grade, None)
            }
            Err(e) => {
                tracing::warn!(instance = %inst.id, "instance failed: {e}");
                (None, AutoGrade::Pending, Some(e.to_string()))
            }
        };
        RunRecord {
            run_id: self.run_id.clone(),
            instance_id: inst.id.clone(),
            index,
            task: self.cfg.task,
            strategy: self.cfg.strategy,
            transcript_digest: att.digest,
            query: att.query,
            responses: att.responses,
            parsed,
            gold: inst.gold.clone(),
            needs_review: self.cfg.human_review || auto_grade == AutoGrade::Pending,
            auto_grade,
            error,
            split: inst.split.clone(),
            subtype: inst.subtype,
            started_at,
            finished_at: Utc::now(),
            backend: self.cfg.backend.model_name.clone(),
            temperature: self.cfg.backend.temperature,
        }
    }
}

fn completion<'a>(
    inst: &'a TaskInstance,
    oracle: &'a str,
    transcript: &'a ChatTranscript,
    stage: Stage,
) -> CompletionRequest<'a> {
    CompletionRequest {
        instance_id: &inst.id,
        transcript,
        stage,
        oracle: Some(oracle),
    }
}

fn last_user_turn(t: &ChatTranscript) -> String {
    t.messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.clone())
        .unwrap_or_default()
}

/// Builds the client a config asks for.
pub fn client_for(cfg: &ExperimentConfig) -> Result<LlmClient, RunError> {
    let mock = cfg.mock.as_ref().map(MockSpec::to_policy).transpose()?;
    Ok(LlmClient::new(cfg.backend.clone(), mock)?)
}

/// Runs (or resumes) an experiment with a client built from the config.
pub async fn run_from_config(cfg: &ExperimentConfig) -> Result<RunSummary, RunError> {
    let client = client_for(cfg)?;
    run_experiment(cfg, &client, &Appender::spawn()).await
}

/// Runs or resumes one experiment. Config and dataset problems abort before
/// any backend call; per-instance failures become error records.
pub async fn run_experiment(
    cfg: &ExperimentConfig,
    client: &LlmClient,
    log: &Appender,
) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let prompts = match &cfg.prompts {
        Some(p) => PromptConfig::load(p)?,
        None => PromptConfig::default(),
    };
    let vocab = match &cfg.vocabulary {
        Some(p) => Vocabulary::load(p).map_err(|e| RunError::Config(e.to_string()))?,
        None => Vocabulary::default(),
    };
    let cleanings = cfg.cleanings.as_deref().map(trajdata::load_cleanings).transpose()?;
    let instances = load_instances(cfg.task, &cfg.data, cleanings.as_deref(), true)?;
    if instances.is_empty() {
        return Err(RunError::Config(format!("{} has no instances", cfg.data.display())));
    }
    let eval_ids: HashSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();

    let mut plan = PromptPlan::new(cfg.strategy, cfg.task, label_set(cfg.task, &vocab));
    let mut example_ids = Vec::new();
    if matches!(cfg.strategy, Strategy::InContext | Strategy::ChainOfThought) {
        let pool_path = cfg.examples.as_deref().expect("validated above");
        let pool = load_instances(cfg.task, pool_path, cleanings.as_deref(), false)?;
        let chosen = choose_examples(&pool, cfg.example_count, cfg.seed, &eval_ids)?;
        if chosen.is_empty() {
            return Err(RunError::Config(format!("{} has no examples", pool_path.display())));
        }
        for ex in &chosen {
            example_ids.push(ex.id.clone());
            plan.examples.push(to_few_shot(ex, cfg.strategy, &prompts)?);
        }
    }
    if cfg.strategy == Strategy::SpatialPrefix && prompts.prefix_pool.is_empty() {
        return Err(PromptError::EmptyPrefixPool.into());
    }

    let run_id = cfg.resolved_run_id();
    let run_dir = cfg.run_dir();
    let manifest = RunManifest {
        run_id: run_id.clone(),
        task: cfg.task,
        strategy: cfg.strategy,
        dataset_label: cfg.effective_dataset_label(),
        config_digest: cfg.digest(),
        config: cfg.clone(),
        instance_ids: instances.iter().map(|i| i.id.clone()).collect(),
        example_ids,
        created_at: Utc::now(),
        assumptions: Assumptions::new(cfg, &prompts),
    };
    if run_dir.join(RUN_MANIFEST).exists() {
        let existing = RunManifest::load(&run_dir)?;
        if existing.config_digest != manifest.config_digest || existing.instance_ids != manifest.instance_ids {
            return Err(RunError::RunConflict(run_id));
        }
    } else {
        manifest.write_atomic(&run_dir)?;
    }

    let done: HashSet<String> = manifest::read_log::<RunRecord>(&run_dir.join(RECORDS_LOG))?
        .into_iter()
        .map(|r| r.instance_id)
        .collect();
    let stages: HashMap<String, StageRecord> = manifest::read_log::<StageRecord>(&run_dir.join(STAGES_LOG))?
        .into_iter()
        .map(|s| (s.instance_id.clone(), s))
        .collect();
    let todo: Vec<(usize, &TaskInstance)> = instances
        .iter()
        .enumerate()
        .filter(|(_, inst)| !done.contains(&inst.id))
        .collect();
    let skipped = instances.len() - todo.len();
    let batch = cfg.limit.map_or(todo.len(), |l| l.min(todo.len()));

    let ctx = RunContext {
        run_id: run_id.clone(),
        run_dir: run_dir.clone(),
        cfg,
        shape_tags: vocab.shape_tags(),
        builder: PromptBuilder::new(prompts),
        plan,
        vocab,
        client,
        log,
        stages,
    };
    let calls_before = client.calls();
    let written = Mutex::new((0usize, 0usize));
    let failures: Mutex<Vec<RunError>> = Mutex::new(Vec::new());
    let records_path = run_dir.join(RECORDS_LOG);
    futures::stream::iter(todo.into_iter().take(batch))
        .for_each_concurrent(cfg.backend.max_concurrency, |(index, inst)| {
            let ctx = &ctx;
            let written = &written;
            let failures = &failures;
            let records_path = &records_path;
            async move {
                let record = ctx.process(index, inst).await;
                let is_error = record.error.is_some();
                match ctx
                    .log
                    .append(records_path, &record, Some(DedupKey::new("instance_id", &inst.id)))
                    .await
                {
                    Ok(true) => {
                        let mut w = written.lock().expect("counter lock");
                        w.0 += 1;
                        w.1 += is_error as usize;
                    }
                    Ok(false) => {}
                    Err(e) => failures.lock().expect("failure lock").push(e.into()),
                }
            }
        })
        .await;
    if let Some(e) = failures.into_inner().expect("failure lock").into_iter().next() {
        return Err(e);
    }
    let (new_records, errors) = written.into_inner().expect("counter lock");
    Ok(RunSummary {
        run_id,
        run_dir,
        instances: instances.len(),
        new_records,
        skipped,
        errors,
        remaining: instances.len() - skipped - new_records,
        backend_calls: client.calls() - calls_before,
    })
}
