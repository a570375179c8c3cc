//! Metrics over a run's records, with human grades applied on top, and
//! side-by-side comparison against bundled reference tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{
    io_err, Assumptions, GoldAnswer, GradeRecord, HumanGrade, RunError, RunManifest, RunRecord, GRADES_LOG,
    RECORDS_LOG,
};
use crate::extract::ParsedAnswer;
use crate::manifest;
use crate::metrics::{self, ConfusionMatrix, MetricsReport, SubtypeScore};
use crate::prompting::{Strategy, Task};
use crate::spartqa::all_gold_mentioned;
use crate::trajdata::MotionClass;
use crate::trajgen::DirectionLabel;

const TABLES: [(&str, &str); 3] = [
    ("table1", include_str!("../../fixtures/reference/table1.toml")),
    ("table2", include_str!("../../fixtures/reference/table2.toml")),
    ("table3", include_str!("../../fixtures/reference/table3.toml")),
];

/// Everything persisted for one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub manifest: RunManifest,
    pub records: Vec<RunRecord>,
    pub grades: Vec<GradeRecord>,
}

impl RunData {
    pub fn load(runs_root: &Path, run_id: &str) -> Result<Self, RunError> {
        super::check_run_id(run_id).map_err(|_| RunError::UnknownRun(run_id.to_string()))?;
        let dir = runs_root.join(run_id);
        if !dir.join(super::RUN_MANIFEST).is_file() {
            return Err(RunError::UnknownRun(run_id.to_string()));
        }
        let manifest = RunManifest::load(&dir)?;
        let mut records: Vec<RunRecord> = manifest::read_log(&dir.join(RECORDS_LOG))?;
        records.sort_by_key(|r| r.index);
        let grades = manifest::read_log(&dir.join(GRADES_LOG))?;
        Ok(RunData {
            manifest,
            records,
            grades,
        })
    }

    /// Latest grade per instance, in log order.
    pub fn latest_grades(&self) -> HashMap<&str, &GradeRecord> {
        let mut out = HashMap::new();
        for g in &self.grades {
            out.insert(g.instance_id.as_str(), g);
        }
        out
    }

    /// Records waiting for a human decision, in dataset order.
    pub fn pending(&self) -> Vec<&RunRecord> {
        let grades = self.latest_grades();
        self.records
            .iter()
            .filter(|r| r.needs_review && !grades.contains_key(r.instance_id.as_str()))
            .collect()
    }
}

/// A record's prediction after any human grade is applied. `Correct` turns the
/// prediction into the gold answer; `Incorrect` on an answer that parsed as
/// gold turns it into no answer; otherwise the parse stands.
fn effective<'a>(record: &'a RunRecord, grade: Option<&GradeRecord>) -> Option<Prediction<'a>> {
    let parsed = record.parsed.as_ref().filter(|p| !p.is_unparseable());
    match grade.map(|g| g.human_grade) {
        Some(HumanGrade::Correct) => Some(Prediction::Gold),
        Some(HumanGrade::Incorrect) if parsed.is_some_and(|p| record.gold.matches(p)) => None,
        _ => parsed.map(Prediction::Parsed),
    }
}

enum Prediction<'a> {
    Gold,
    Parsed(&'a ParsedAnswer),
}

/// Class label of a single-label gold answer (first gold for QA).
fn gold_label(gold: &GoldAnswer) -> String {
    match gold {
        GoldAnswer::Motion(m) => m.as_str().to_string(),
        GoldAnswer::Shape(s) => s.to_lowercase(),
        GoldAnswer::Choice(c) => c.first().map(|s| s.to_lowercase()).unwrap_or_default(),
        GoldAnswer::Directions(d) => crate::trajgen::join_labels(d),
    }
}

fn predicted_label(gold: &GoldAnswer, p: &Prediction<'_>) -> Option<String> {
    match p {
        Prediction::Gold => Some(gold_label(gold)),
        Prediction::Parsed(parsed) if gold.matches(parsed) => Some(gold_label(gold)),
        Prediction::Parsed(ParsedAnswer::Motion(m)) => Some(m.as_str().to_string()),
        Prediction::Parsed(ParsedAnswer::Shape(s) | ParsedAnswer::SpartChoice(s)) => Some(s.to_lowercase()),
        Prediction::Parsed(_) => None,
    }
}

/// Metrics for one group of records of the same task.
pub fn compute_metrics(
    task: Task,
    records: &[&RunRecord],
    grades: &HashMap<&str, &GradeRecord>,
) -> Result<MetricsReport, RunError> {
    if records.is_empty() {
        return Err(metrics::MetricsError::EmptyRun.into());
    }
    let grade_of = |r: &RunRecord| grades.get(r.instance_id.as_str()).copied();
    if task == Task::Direction2D {
        return direction_metrics(records, grade_of);
    }

    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let gold = gold_label(&r.gold);
        let pred = effective(r, grade_of(r)).and_then(|p| predicted_label(&r.gold, &p));
        pairs.push((Some(gold), pred));
    }
    let observed: BTreeSet<String> = pairs.iter().filter_map(|(g, _)| g.clone()).collect();
    let labels: Vec<String> = match task {
        Task::Motion3D => MotionClass::ALL
            .iter()
            .map(|m| m.as_str().to_string())
            .filter(|m| observed.contains(m))
            .collect(),
        _ => observed.into_iter().collect(),
    };
    let mut cm = ConfusionMatrix::new(labels);
    for (g, p) in &pairs {
        cm.record(g.as_deref().unwrap_or_default(), p.as_deref())?;
    }
    let accuracy = metrics::accuracy(&pairs)?;
    let macro_f1 = metrics::macro_f1(&cm)?;

    let (per_subtype, strict_accuracy) = if task == Task::SpartQA {
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (r, (g, p)) in records.iter().zip(&pairs) {
            if let Some(t) = r.subtype {
                let e = groups.entry(t.as_str().to_string()).or_default();
                e.0 += 1;
                e.1 += (g == p) as usize;
            }
        }
        let per_subtype = groups
            .into_iter()
            .map(|(k, (n, hits))| {
                (
                    k,
                    SubtypeScore {
                        n,
                        accuracy: hits as f64 / n as f64,
                    },
                )
            })
            .collect();
        let strict_hits = records
            .iter()
            .filter(|r| match grade_of(r).map(|g| g.human_grade) {
                Some(h) => h == HumanGrade::Correct,
                None => match (&r.gold, r.answer_text()) {
                    (GoldAnswer::Choice(gold), Some(text)) => all_gold_mentioned(text, gold),
                    _ => false,
                },
            })
            .count();
        (Some(per_subtype), Some(strict_hits as f64 / records.len() as f64))
    } else {
        (None, None)
    };

    Ok(MetricsReport {
        n: records.len(),
        accuracy,
        macro_f1,
        err_rate: None,
        per_class: cm.per_class(),
        per_subtype,
        strict_accuracy,
    })
}

fn direction_metrics<'g>(
    records: &[&RunRecord],
    grade_of: impl Fn(&RunRecord) -> Option<&'g GradeRecord>,
) -> Result<MetricsReport, RunError> {
    let mut runs: Vec<(Vec<DirectionLabel>, Option<Vec<DirectionLabel>>)> = Vec::with_capacity(records.len());
    for r in records {
        let GoldAnswer::Directions(gold) = &r.gold else {
            return Err(RunError::Config(format!("{} is not a direction record", r.instance_id)));
        };
        let pred = match effective(r, grade_of(r)) {
            Some(Prediction::Gold) => Some(gold.clone()),
            Some(Prediction::Parsed(ParsedAnswer::DirectionList(p))) => Some(p.clone()),
            _ => None,
        };
        runs.push((gold.clone(), pred));
    }
    let observed: BTreeSet<DirectionLabel> = runs.iter().flat_map(|(g, _)| g.iter().copied()).collect();
    let labels: Vec<String> = DirectionLabel::ALL
        .iter()
        .filter(|d| observed.contains(d))
        .map(|d| d.as_str().to_string())
        .collect();
    let mut cm = ConfusionMatrix::new(labels);
    for (gold, pred) in &runs {
        for (i, g) in gold.iter().enumerate() {
            let p = pred.as_ref().and_then(|p| p.get(i)).map(|d| d.as_str());
            cm.record(g.as_str(), p)?;
        }
    }
    let pairs: Vec<_> =
        runs.iter().map(|(g, p)| (Some(g), p.as_ref())).collect();
    Ok(MetricsReport {
        n: records.len(),
        accuracy: metrics::accuracy(&pairs)?,
        macro_f1: metrics::macro_f1(&cm)?,
        err_rate: Some(metrics::err_rate(&runs)?),
        per_class: cm.per_class(),
        per_subtype: None,
        strict_accuracy: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    MacroF1,
    ErrRate,
}

impl MetricName {
    fn of(self, m: &MetricsReport) -> Option<f64> {
        match self {
            MetricName::Accuracy => Some(m.accuracy),
            MetricName::MacroF1 => Some(m.macro_f1),
            MetricName::ErrRate => m.err_rate,
        }
    }

    fn label(self) -> &'static str {
        match self {
            MetricName::Accuracy => "acc",
            MetricName::MacroF1 => "f1",
            MetricName::ErrRate => "err#",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub strategy: Strategy,
    /// `overall`, a split name, or a question type.
    pub split: String,
    pub metric: MetricName,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub name: String,
    pub title: String,
    pub rows: Vec<ReferenceRow>,
}

/// Looks up a bundled table by name. Accepts `table2`, `fixtures/table2` or
/// `table2.toml`.
pub fn reference_table(name: &str) -> Result<ReferenceTable, RunError> {
    let key = Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let (_, text) = TABLES
        .iter()
        .find(|(n, _)| *n == key)
        .ok_or_else(|| RunError::UnknownFixture(name.to_string()))?;
    toml::from_str(text).map_err(|e| RunError::Config(format!("reference table {key}: {e}")))
}

pub fn reference_table_names() -> Vec<&'static str> {
    TABLES.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub split: String,
    pub metric: MetricName,
    pub reference: f64,
    pub harness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub table: String,
    pub title: String,
    /// Always false: reference numbers come from other backends and graders.
    pub comparable: bool,
    pub note: String,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedReport {
    pub run_id: String,
    pub task: Task,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_label: Option<String>,
    pub backend: String,
    pub instances: usize,
    pub records: usize,
    pub complete: bool,
    pub errors: usize,
    /// True while any record awaits a human grade.
    pub provisional: bool,
    pub pending: usize,
    pub human_grades: usize,
    pub overall: MetricsReport,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, MetricsReport>,
    pub assumptions: Assumptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    pub generated_at: DateTime<Utc>,
}

/// Computes the report for loaded run data without touching disk.
pub fn build_report(data: &RunData, compare: Option<&str>) -> Result<ExportedReport, RunError> {
    let table = compare.map(reference_table).transpose()?;
    let m = &data.manifest;
    let grades = data.latest_grades();
    let all: Vec<&RunRecord> = data.records.iter().collect();
    let overall = compute_metrics(m.task, &all, &grades)?;

    let mut by_split: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &data.records {
        if let Some(s) = &r.split {
            by_split.entry(s.clone()).or_default().push(r);
        }
    }
    let splits = by_split
        .into_iter()
        .map(|(k, rs)| compute_metrics(m.task, &rs, &grades).map(|rep| (k, rep)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;

    let comparison = table.map(|t| compare_with(&t, m, &overall, &splits));
    let pending = data.pending().len();
    Ok(ExportedReport {
        run_id: m.run_id.clone(),
        task: m.task,
        strategy: m.strategy,
        dataset_label: m.dataset_label.clone(),
        backend: m.config.backend.model_name.clone(),
        instances: m.instance_ids.len(),
        records: data.records.len(),
        complete: data.records.len() == m.instance_ids.len(),
        errors: data.records.iter().filter(|r| r.error.is_some()).count(),
        provisional: pending > 0,
        pending,
        human_grades: grades.len(),
        overall,
        splits,
        assumptions: m.assumptions.clone(),
        comparison,
        generated_at: Utc::now(),
    })
}

fn compare_with(
    table: &ReferenceTable,
    m: &RunManifest,
    overall: &MetricsReport,
    splits: &BTreeMap<String, MetricsReport>,
) -> Comparison {
    let rows = table
        .rows
        .iter()
        .filter(|r| r.task == m.task && r.strategy == m.strategy)
        .filter(|r| r.dataset.is_none() || r.dataset == m.dataset_label)
        .map(|r| {
            let harness = if r.split == "overall" {
                r.metric.of(overall)
            } else if let Some(s) = splits.get(&r.split) {
                r.metric.of(s)
            } else {
                overall
                    .per_subtype
                    .as_ref()
                    .and_then(|p| p.get(&r.split))
                    .filter(|_| r.metric == MetricName::Accuracy)
                    .map(|s| s.accuracy)
            };
            ComparisonRow {
                model: r.model.clone(),
                dataset: r.dataset.clone(),
                split: r.split.clone(),
                metric: r.metric,
                reference: r.value,
                harness,
            }
        })
        .collect();
    Comparison {
        table: table.name.clone(),
        title: table.title.clone(),
        comparable: false,
        note: format!(
            "reference values come from different model backends and human graders; this run used `{}`",
            m.config.backend.model_name
        ),
        rows,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Plain-text table in the layout of the reference tables.
pub fn render_text(r: &ExportedReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {}", r.run_id);
    let _ = writeln!(
        s,
        "task {}  strategy {}  dataset {}  backend {} (temperature {})",
        r.task,
        r.strategy,
        r.dataset_label.as_deref().unwrap_or("-"),
        r.backend,
        r.assumptions.temperature
    );
    let _ = writeln!(
        s,
        "records {}/{}  errors {}  human grades {}  pending {}{}",
        r.records,
        r.instances,
        r.errors,
        r.human_grades,
        r.pending,
        if r.provisional { "  [PROVISIONAL]" } else { "" }
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<16} {:>5} {:>6} {:>6} {:>6}", "split", "n", "acc", "f1", "err#");
    let mut row = |name: &str, m: &MetricsReport| {
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>6.2} {:>6.2} {:>6}",
            name,
            m.n,
            m.accuracy,
            m.macro_f1,
            fmt_opt(m.err_rate)
        );
    };
    for (k, m) in &r.splits {
        row(k, m);
    }
    row("overall", &r.overall);
    if let Some(sub) = &r.overall.per_subtype {
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>5} {:>6}", "subtype", "n", "acc");
        for (k, v) in sub {
            let _ = writeln!(s, "{:<16} {:>5} {:>6.2}", k, v.n, v.accuracy);
        }
        if let Some(strict) = r.overall.strict_accuracy {
            let _ = writeln!(s, "{:<16} {:>5} {:>6.2}", "all-gold", r.overall.n, strict);
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<16} {:>9} {:>6} {:>6} {:>7}", "class", "precision", "recall", "f1", "support");
    for c in &r.overall.per_class {
        let _ = writeln!(
            s,
            "{:<16} {:>9.2} {:>6.2} {:>6.2} {:>7}",
            c.label, c.precision, c.recall, c.f1, c.support
        );
    }
    if let Some(c) = &r.comparison {
        let _ = writeln!(s);
        let _ = writeln!(s, "compared with {} ({}): NOT COMPARABLE, {}", c.table, c.title, c.note);
        let _ = writeln!(
            s,
            "{:<12} {:<16} {:<14} {:<6} {:>9} {:>8}",
            "model", "dataset", "split", "metric", "reference", "harness"
        );
        for row in &c.rows {
            let _ = writeln!(
                s,
                "{:<12} {:<16} {:<14} {:<6} {:>9.2} {:>8}",
                row.model,
                row.dataset.as_deref().unwrap_or("-"),
                row.split,
                row.metric.label(),
                row.reference,
                fmt_opt(row.harness)
            );
        }
        if c.rows.is_empty() {
            let _ = writeln!(s, "(no reference rows for this task and strategy)");
        }
    }
    s
}

/// Writes `report.json` and `report.txt` into the run directory.
pub fn export_report(
    runs_root: &Path,
    run_id: &str,
    compare: Option<&str>,
) -> Result<(ExportedReport, PathBuf), RunError> {
    let data = RunData::load(runs_root, run_id)?;
    let report = build_report(&data, compare)?;
    let dir = runs_root.join(run_id);
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(io_err(&json_path))?;
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, render_text(&report)).map_err(io_err(&txt_path))?;
    Ok((report, json_path))
}
