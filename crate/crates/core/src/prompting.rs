//! Chat transcript builders for the four prompting strategies.
//!
//! Every builder is a pure function of the plan, the instance and the
//! [`PromptConfig`]; identical inputs give byte-identical transcripts.
//! Few-shot assistant turns end with an `Answer: <label>` line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::fnv1a64;
use crate::trajdata::{MotionClass, Point3D};
use crate::trajgen::{round_half_up, Coord, DirectionLabel, NumericFormat, Point2D};

const DEFAULT_PROMPTS: &str = include_str!("../config/prompts.toml");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("plan does not fit this builder: {0}")]
    PlanMismatch(String),
    #[error("chain-of-thought example {index} has no rationale")]
    MissingRationale { index: usize },
    #[error("stage-one answer is empty")]
    EmptyStageOneAnswer,
    #[error("label `{0}` is not in the plan's label set")]
    LabelOutsideSet(String),
    #[error("{got} points exceeds the configured maximum of {max}")]
    TooManyPoints { got: usize, max: usize },
    #[error("prefix question pool is empty")]
    EmptyPrefixPool,
    #[error("malformed transcript: {0}")]
    InvalidTranscript(String),
    #[error("prompt config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub messages: Vec<ChatMessage>,
}

impl ChatTranscript {
    /// First message is System; the rest alternate User/Assistant starting
    /// with User; no message is empty.
    pub fn validate(&self) -> Result<(), PromptError> {
        let bad = |m: &str| Err(PromptError::InvalidTranscript(m.to_string()));
        match self.messages.first() {
            Some(m) if m.role == Role::System => {}
            _ => return bad("first message must be the system message"),
        }
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return bad("empty message content");
        }
        for (i, m) in self.messages.iter().enumerate().skip(1) {
            let expected = if i % 2 == 1 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return bad(&format!("message {i} should be {}", expected.as_str()));
            }
        }
        Ok(())
    }

    /// Plain-text form used for golden fixtures and digests.
    pub fn to_fixture_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str("### ");
            out.push_str(m.role.as_str());
            out.push('\n');
            out.push_str(&m.content);
            out.push_str("\n\n");
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_fixture_text().as_bytes()))
    }

    pub fn is_prefix_of(&self, other: &ChatTranscript) -> bool {
        self.messages.len() < other.messages.len() && other.messages.starts_with(&self.messages)
    }

    fn push(&mut self, role: Role, content: impl Into<String>) {
        self.messages.push(ChatMessage::new(role, content));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "zero-shot", alias = "zeroshot")]
    ZeroShot,
    #[serde(rename = "in-context", alias = "icl")]
    InContext,
    #[serde(rename = "chain-of-thought", alias = "cot")]
    ChainOfThought,
    #[serde(rename = "spatial-prefix", alias = "spp")]
    SpatialPrefix,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::ZeroShot,
        Strategy::InContext,
        Strategy::ChainOfThought,
        Strategy::SpatialPrefix,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero-shot",
            Strategy::InContext => "in-context",
            Strategy::ChainOfThought => "chain-of-thought",
            Strategy::SpatialPrefix => "spatial-prefix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero-shot" | "zeroshot" => Some(Strategy::ZeroShot),
            "in-context" | "icl" => Some(Strategy::InContext),
            "chain-of-thought" | "cot" => Some(Strategy::ChainOfThought),
            "spatial-prefix" | "spp" => Some(Strategy::SpatialPrefix),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Direction2D,
    Shape2D,
    Motion3D,
    SpartQA,
}

impl Task {
    pub fn slug(self) -> &'static str {
        match self {
            Task::Direction2D => "direction2d",
            Task::Shape2D => "shape2d",
            Task::Motion3D => "motion3d",
            Task::SpartQA => "spartqa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Task::Direction2D, Task::Shape2D, Task::Motion3D, Task::SpartQA]
            .into_iter()
            .find(|t| t.slug().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// The data a prompt is about: a 2D or 3D point sequence, or a QA item.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptInput {
    Points2D {
        points: Vec<Point2D>,
        format: NumericFormat,
    },
    Points3D {
        points: Vec<Point3D>,
    },
    Text {
        story: String,
        question: String,
        candidates: Vec<String>,
    },
}

impl PromptInput {
    fn point_count(&self) -> Option<usize> {
        match self {
            PromptInput::Points2D { points, .. } => Some(points.len()),
            PromptInput::Points3D { points } => Some(points.len()),
            PromptInput::Text { .. } => None,
        }
    }

    fn fits(&self, task: Task) -> bool {
        matches!(
            (self, task),
            (PromptInput::Points2D { .. }, Task::Direction2D | Task::Shape2D)
                | (PromptInput::Points3D { .. }, Task::Motion3D)
                | (PromptInput::Text { .. }, Task::SpartQA)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    pub input: PromptInput,
    pub answer: String,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixQuestion {
    pub id: String,
    pub text: String,
    pub expected_topic: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPlan {
    pub strategy: Strategy,
    pub task: Task,
    pub label_set: Vec<String>,
    pub examples: Vec<FewShotExample>,
    pub prefix: Option<PrefixQuestion>,
}

impl PromptPlan {
    pub fn new(strategy: Strategy, task: Task, label_set: Vec<String>) -> Self {
        PromptPlan {
            strategy,
            task,
            label_set,
            examples: Vec::new(),
            prefix: None,
        }
    }

    pub fn motion_labels() -> Vec<String> {
        MotionClass::ALL.iter().map(|c| c.as_str().to_string()).collect()
    }

    pub fn direction_labels() -> Vec<String> {
        DirectionLabel::ALL.iter().map(|d| d.as_str().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTexts {
    pub direction2d: String,
    pub shape2d: String,
    pub motion3d: String,
    pub spartqa: String,
}

impl TaskTexts {
    pub fn get(&self, task: Task) -> &str {
        match task {
            Task::Direction2D => &self.direction2d,
            Task::Shape2D => &self.shape2d,
            Task::Motion3D => &self.motion3d,
            Task::SpartQA => &self.spartqa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    #[serde(default)]
    pub max_points: usize,
    pub system: TaskTexts,
    pub query: TaskTexts,
    #[serde(default)]
    pub cot_rationales: BTreeMap<String, String>,
    #[serde(default)]
    pub prefix_pool: Vec<PrefixQuestion>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_PROMPTS).expect("bundled prompt config parses")
    }
}

impl PromptConfig {
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        toml::from_str(text).map_err(|e| PromptError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Formatting shared by 2D and 3D points.
pub trait RenderPoint {
    fn render(&self, format: NumericFormat) -> String;
}

impl RenderPoint for Point2D {
    fn render(&self, format: NumericFormat) -> String {
        format!("({}, {})", self.x.render(format), self.y.render(format))
    }
}

fn float_coord(v: f64, format: NumericFormat) -> Coord {
    match format {
        NumericFormat::Integer => Coord::from_int(round_half_up(v)),
        NumericFormat::Fixed2 => Coord::from_hundredths(round_half_up(v * 100.0)),
    }
}

impl RenderPoint for Point3D {
    fn render(&self, format: NumericFormat) -> String {
        format!(
            "({}, {}, {})",
            float_coord(self.x, format).render(format),
            float_coord(self.y, format).render(format),
            float_coord(self.z, format).render(format)
        )
    }
}

/// `(x, y), (x, y), ...` with integer values bare and fixed-point values at
/// two decimals.
pub fn render_points<P: RenderPoint>(points: &[P], format: NumericFormat) -> String {
    points
        .iter()
        .map(|p| p.render(format))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    config: PromptConfig,
}

impl PromptBuilder {
    pub fn new(config: PromptConfig) -> Self {
        PromptBuilder { config }
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn system_text(&self, plan: &PromptPlan) -> String {
        self.config
            .system
            .get(plan.task)
            .replace("{labels}", &plan.label_set.join(", "))
    }

    pub fn query_text(&self, task: Task, input: &PromptInput) -> Result<String, PromptError> {
        if !input.fits(task) {
            return Err(PromptError::PlanMismatch(format!("input does not fit task {task}")));
        }
        if let Some(n) = input.point_count() {
            let max = self.config.max_points;
            if max > 0 && n > max {
                return Err(PromptError::TooManyPoints { got: n, max });
            }
        }
        let template = self.config.query.get(task);
        Ok(match input {
            PromptInput::Points2D { points, format } => template
                .replace("{segments}", &points.len().saturating_sub(1).to_string())
                .replace("{points}", &render_points(points, *format)),
            PromptInput::Points3D { points } => {
                template.replace("{points}", &render_points(points, NumericFormat::Integer))
            }
            PromptInput::Text {
                story,
                question,
                candidates,
            } => template
                .replace("{story}", story)
                .replace("{question}", question)
                .replace("{candidates}", &candidates.join(", ")),
        })
    }

    /// Picks a prefix question by hashing the instance id over the pool.
    pub fn select_prefix(&self, instance_id: &str) -> Result<&PrefixQuestion, PromptError> {
        let pool = &self.config.prefix_pool;
        if pool.is_empty() {
            return Err(PromptError::EmptyPrefixPool);
        }
        Ok(&pool[(fnv1a64(instance_id.as_bytes()) % pool.len() as u64) as usize])
    }

    /// Dispatches the single-turn strategies.
    pub fn build(&self, plan: &PromptPlan, input: &PromptInput) -> Result<ChatTranscript, PromptError> {
        match plan.strategy {
            Strategy::ZeroShot => self.zero_shot(plan, input),
            Strategy::InContext => self.icl(plan, input),
            Strategy::ChainOfThought => self.cot(plan, input),
            Strategy::SpatialPrefix => Err(PromptError::PlanMismatch(
                "spatial prefix prompting needs the two-stage builders".into(),
            )),
        }
    }

    pub fn zero_shot(&self, plan: &PromptPlan, input: &PromptInput) -> Result<ChatTranscript, PromptError> {
        expect_strategy(plan, Strategy::ZeroShot)?;
        if !plan.examples.is_empty() || plan.prefix.is_some() {
            return Err(PromptError::PlanMismatch("zero-shot takes no examples or prefix".into()));
        }
        let mut t = ChatTranscript::default();
        t.push(Role::System, self.system_text(plan));
        t.push(Role::User, self.query_text(plan.task, input)?);
        Ok(t)
    }

    pub fn icl(&self, plan: &PromptPlan, input: &PromptInput) -> Result<ChatTranscript, PromptError> {
        expect_strategy(plan, Strategy::InContext)?;
        if plan.examples.iter().any(|e| e.rationale.is_some()) {
            return Err(PromptError::PlanMismatch("in-context examples carry no rationale".into()));
        }
        self.few_shot(plan, input, |e| format!("Answer: {}", e.answer))
    }

    pub fn cot(&self, plan: &PromptPlan, input: &PromptInput) -> Result<ChatTranscript, PromptError> {
        expect_strategy(plan, Strategy::ChainOfThought)?;
        for (index, e) in plan.examples.iter().enumerate() {
            match &e.rationale {
                Some(r) if !r.trim().is_empty() => {}
                _ => return Err(PromptError::MissingRationale { index }),
            }
        }
        self.few_shot(plan, input, |e| {
            format!(
                "{}\nAnswer: {}",
                e.rationale.as_deref().unwrap_or_default().trim(),
                e.answer
            )
        })
    }

    fn few_shot(
        &self,
        plan: &PromptPlan,
        input: &PromptInput,
        assistant: impl Fn(&FewShotExample) -> String,
    ) -> Result<ChatTranscript, PromptError> {
        if plan.examples.is_empty() {
            return Err(PromptError::PlanMismatch("few-shot prompting needs at least one example".into()));
        }
        if plan.prefix.is_some() {
            return Err(PromptError::PlanMismatch("few-shot prompting takes no prefix".into()));
        }
        let mut t = ChatTranscript::default();
        t.push(Role::System, self.system_text(plan));
        for e in &plan.examples {
            check_example(plan, e)?;
            t.push(Role::User, self.query_text(plan.task, &e.input)?);
            t.push(Role::Assistant, assistant(e));
        }
        t.push(Role::User, self.query_text(plan.task, input)?);
        Ok(t)
    }

    pub fn spp_stage1(&self, plan: &PromptPlan) -> Result<ChatTranscript, PromptError> {
        expect_strategy(plan, Strategy::SpatialPrefix)?;
        if !plan.examples.is_empty() {
            return Err(PromptError::PlanMismatch("spatial prefix prompting takes no examples".into()));
        }
        let prefix = plan
            .prefix
            .as_ref()
            .ok_or_else(|| PromptError::PlanMismatch("spatial prefix prompting needs a prefix question".into()))?;
        let mut t = ChatTranscript::default();
        t.push(Role::System, self.system_text(plan));
        t.push(Role::User, prefix.text.clone());
        Ok(t)
    }

    /// Stage one, the model's own prefix answer verbatim, then the query.
    pub fn spp_stage2(
        &self,
        plan: &PromptPlan,
        input: &PromptInput,
        stage1_answer: &str,
    ) -> Result<ChatTranscript, PromptError> {
        let mut t = self.spp_stage1(plan)?;
        if stage1_answer.trim().is_empty() {
            return Err(PromptError::EmptyStageOneAnswer);
        }
        t.push(Role::Assistant, stage1_answer);
        t.push(Role::User, self.query_text(plan.task, input)?);
        Ok(t)
    }
}

fn expect_strategy(plan: &PromptPlan, strategy: Strategy) -> Result<(), PromptError> {
    if plan.strategy != strategy {
        return Err(PromptError::PlanMismatch(format!(
            "plan strategy is {}, builder is {}",
            plan.strategy, strategy
        )));
    }
    Ok(())
}

fn check_example(plan: &PromptPlan, e: &FewShotExample) -> Result<(), PromptError> {
    if !e.input.fits(plan.task) {
        return Err(PromptError::PlanMismatch(format!("example input does not fit task {}", plan.task)));
    }
    let in_set = |label: &str| plan.label_set.iter().any(|l| l.eq_ignore_ascii_case(label));
    match (&e.input, plan.task) {
        (PromptInput::Points2D { points, .. }, Task::Direction2D) => {
            let labels: Vec<&str> = e.answer.split(',').map(str::trim).collect();
            if let Some(bad) = labels.iter().find(|l| !in_set(l)) {
                return Err(PromptError::LabelOutsideSet(bad.to_string()));
            }
            if labels.len() + 1 != points.len() {
                return Err(PromptError::PlanMismatch(format!(
                    "{} points need {} labels, example has {}",
                    points.len(),
                    points.len().saturating_sub(1),
                    labels.len()
                )));
            }
        }
        (PromptInput::Text { candidates, .. }, _) => {
            if !candidates.iter().any(|c| c.eq_ignore_ascii_case(e.answer.trim())) {
                return Err(PromptError::LabelOutsideSet(e.answer.clone()));
            }
        }
        _ => {
            if !in_set(e.answer.trim()) {
                return Err(PromptError::LabelOutsideSet(e.answer.clone()));
            }
        }
    }
    Ok(())
}
