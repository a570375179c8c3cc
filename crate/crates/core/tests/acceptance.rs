//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! Golden transcripts live in `tests/golden`; set `TRAJLAB_UPDATE_GOLDEN=1` to
//! rewrite them after an intended prompt change.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::runtime::Runtime;

use trajlab_core::extract::{parse_directions, parse_motion, parse_shape, parse_spartqa};
use trajlab_core::llmio::{CompletionRequest, Stage};
use trajlab_core::manifest::read_log;
use trajlab_core::metrics::{accuracy, err_rate, macro_f1};
use trajlab_core::prompting::{FewShotExample, PromptBuilder, PromptConfig, PromptInput};
use trajlab_core::rng::SplitMix64;
use trajlab_core::runner::report::export_report;
use trajlab_core::runner::{
    self, Appender, MockSpec, RunSummary, StageRecord, RECORDS_LOG, STAGES_LOG,
};
use trajlab_core::trajdata::normalize_grid;
use trajlab_core::trajgen::{generate_dataset, oracle_label_segments, scale_to_range, write_dataset};
use trajlab_core::{
    samples, BackendConfig, ChatTranscript, ConfusionMatrix, DatasetSpec, DirectionLabel, ExperimentConfig,
    LlmClient, MotionClass, NumericFormat, ParsedAnswer, Point2D, Point3D, PromptPlan, Role,
    RunRecord, Strategy, Task, Trajectory3D, Vocabulary,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

type Check = fn(&Runtime) -> Outcome;

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let checks: [(&str, Check); 10] = [
        ("determinism", determinism),
        ("oracle-round-trip", oracle_round_trip),
        ("scaling-invariance", scaling_invariance),
        ("metrics-oracle", metrics_oracle),
        ("err-rate-semantics", err_rate_semantics),
        ("mock-end-to-end", mock_end_to_end),
        ("prompt-snapshots", prompt_snapshots),
        ("parsing-suite", parsing_suite),
        ("backend-robustness", backend_robustness),
        ("run-accounting", run_accounting),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&rt)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(p.as_ref()))));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name:<20} {secs:>6.2}s  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name:<20} {secs:>6.2}s  {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into())
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

// Generation

fn determinism(_: &Runtime) -> Outcome {
    let dir = scratch();
    let started = Instant::now();
    let spec = DatasetSpec::standard(7);
    let mut seqs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        seqs = ok(generate_dataset(&spec))?;
        ok(write_dataset(&dir.path().join(name), &seqs))?;
    }
    let elapsed = started.elapsed();
    let a = ok(fs::read(dir.path().join("a.jsonl")))?;
    let b = ok(fs::read(dir.path().join("b.jsonl")))?;
    ensure!(a == b, "two seed-7 files differ");
    ensure!(seqs.len() == 30, "expected 30 sequences, got {}", seqs.len());

    let mut splits: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for s in &seqs {
        splits.entry(s.split()).or_default().push(s.gold_labels.len());
    }
    let expect = [("fixed2-short", 6..=8), ("integer-long", 35..=40), ("integer-short", 6..=8)];
    for (split, range) in expect {
        let lens = splits.get(split).cloned().unwrap_or_default();
        ensure!(lens.len() == 10, "{split} has {} sequences", lens.len());
        ensure!(lens.iter().all(|n| range.contains(n)), "{split} segment counts {lens:?} outside {range:?}");
    }
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{} bytes identical, 10/10/10, {:.0} ms", a.len(), elapsed.as_secs_f64() * 1e3))
}

fn many_sequences() -> Result<Vec<trajlab_core::DirectionSequence>, String> {
    let mut out = Vec::new();
    for seed in 1..=34 {
        out.extend(ok(generate_dataset(&DatasetSpec::standard(seed)))?);
    }
    Ok(out)
}

fn oracle_round_trip(_: &Runtime) -> Outcome {
    let started = Instant::now();
    let seqs = many_sequences()?;
    let mut mismatches = 0;
    for s in &seqs {
        if oracle_label_segments(&s.points).ok().as_ref() != Some(&s.gold_labels) {
            mismatches += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure!(seqs.len() >= 1000, "only {} sequences", seqs.len());
    ensure!(mismatches == 0, "{mismatches} of {} sequences mislabeled", seqs.len());
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{} sequences, 0 mismatches, {:.2} s", seqs.len(), elapsed.as_secs_f64()))
}

fn as_raw(points: &[Point2D]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [p.x.to_f64(), p.y.to_f64()]).collect()
}

fn scaling_invariance(_: &Runtime) -> Outcome {
    let seqs = many_sequences()?;
    let mut rng = SplitMix64::new(99);
    let mut checked = 0;
    for s in &seqs {
        // Positive affine maps of the sequence, scaled back in its own format.
        for _ in 0..5 {
            let a = 0.01 + rng.unit_f64() * 50.0;
            let b = (rng.unit_f64() - 0.5) * 2000.0;
            let raw: Vec<[f64; 2]> = as_raw(&s.points).iter().map(|p| [a * p[0] + b, a * p[1] - b]).collect();
            let scaled = ok(scale_to_range(&raw, 0.0, 100.0, s.format))?;
            let labels = ok(oracle_label_segments(&scaled))?;
            ensure!(labels == s.gold_labels, "{} changed labels under x*{a}+{b}", s.id);
            checked += 1;
        }
        if s.format == NumericFormat::Integer {
            let scaled = ok(scale_to_range(&as_raw(&s.points), 0.0, 100.0, NumericFormat::Fixed2))?;
            ensure!(
                ok(oracle_label_segments(&scaled))? == s.gold_labels,
                "{} changed labels in fixed2",
                s.id
            );
            checked += 1;
        }
    }

    let mut grid_checks = 0;
    for i in 0..500 {
        let n = 2 + rng.below(99) as usize;
        let flat: Vec<bool> = (0..3).map(|_| rng.below(4) == 0).collect();
        let consts: Vec<f64> = (0..3).map(|_| (rng.unit_f64() - 0.5) * 10.0).collect();
        let spans: Vec<f64> = (0..3).map(|_| 1e-3 + rng.unit_f64() * 5.0).collect();
        let axis = |k: usize, rng: &mut SplitMix64| {
            if flat[k] {
                consts[k]
            } else {
                consts[k] + rng.unit_f64() * spans[k]
            }
        };
        let points: Vec<Point3D> = (0..n)
            .map(|_| {
                let (x, y, z) = (axis(0, &mut rng), axis(1, &mut rng), axis(2, &mut rng));
                Point3D::new(x, y, z)
            })
            .collect();
        let traj = Trajectory3D {
            id: format!("grid-{i}"),
            points,
            gold_class: MotionClass::Lift,
            cleaned: false,
            source: String::new(),
        };
        let grid = normalize_grid(&traj);
        for k in 0..3 {
            let vals: Vec<f64> = grid.points.iter().map(|p| [p.x, p.y, p.z][k]).collect();
            let raw: Vec<f64> = traj.points.iter().map(|p| [p.x, p.y, p.z][k]).collect();
            let degenerate = raw.iter().all(|v| *v == raw[0]);
            ensure!(
                vals.iter().all(|v| v.fract() == 0.0 && (0.0..=300.0).contains(v)),
                "{}: axis {k} leaves the integer grid",
                traj.id
            );
            if degenerate {
                ensure!(vals.iter().all(|v| *v == 150.0), "{}: flat axis {k} not at 150", traj.id);
            } else {
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                ensure!(lo == 0.0 && hi == 300.0, "{}: axis {k} spans [{lo}, {hi}]", traj.id);
            }
            grid_checks += 1;
        }
    }
    Ok(format!("{checked} rescalings unchanged, {grid_checks} grid axes in [0,300]"))
}

// Metrics

/// Per-class F1 as 2TP / (2TP + FP + FN) counted straight from the pairs.
fn brute_macro_f1(classes: usize, pairs: &[(usize, Option<usize>)]) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let tp = pairs.iter().filter(|(g, p)| *g == c && *p == Some(c)).count();
        let fp = pairs.iter().filter(|(g, p)| *g != c && *p == Some(c)).count();
        let fn_ = pairs.iter().filter(|(g, p)| *g == c && *p != Some(c)).count();
        if tp > 0 {
            total += (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    total / classes as f64
}

fn matrix(classes: usize, pairs: &[(usize, Option<usize>)]) -> Result<ConfusionMatrix, String> {
    let labels: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
    let mut cm = ConfusionMatrix::new(labels.clone());
    for (g, p) in pairs {
        ok(cm.record(&labels[*g], p.map(|p| labels[p].as_str())))?;
    }
    Ok(cm)
}

fn metrics_oracle(_: &Runtime) -> Outcome {
    let mut rng = SplitMix64::new(4242);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let classes = 1 + rng.below(5) as usize;
        let extra = rng.below(20 * classes as u64) as usize;
        let mut pairs: Vec<(usize, Option<usize>)> = Vec::new();
        for i in 0..classes + extra {
            // The first `classes` rows guarantee every class has gold support.
            let gold = if i < classes { i } else { rng.below(classes as u64) as usize };
            let p = rng.below(classes as u64 + 1) as usize;
            pairs.push((gold, (p < classes).then_some(p)));
        }
        let got = ok(macro_f1(&matrix(classes, &pairs)?))?;
        worst = worst.max((got - brute_macro_f1(classes, &pairs)).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");

    let mut pairs = Vec::new();
    pairs.extend(std::iter::repeat_n((0, Some(0)), 10));
    pairs.extend(std::iter::repeat_n((1, Some(1)), 5));
    pairs.extend(std::iter::repeat_n((1, Some(2)), 5));
    pairs.extend(std::iter::repeat_n((2, Some(2)), 10));
    let cm = matrix(3, &pairs)?;
    let f1s: Vec<f64> = cm.per_class().iter().map(|s| s.f1).collect();
    let worked = ok(macro_f1(&cm))?;
    ensure!((f1s[1] - 0.6667).abs() < 5e-5 && (f1s[2] - 0.8).abs() < 1e-12, "per-class {f1s:?}");
    ensure!((worked - 0.8222).abs() <= 5e-5, "worked example {worked}");
    ensure!((worked - brute_macro_f1(3, &pairs)).abs() <= 1e-12, "worked example disagrees with brute force");
    Ok(format!("10000 matrices, max |diff| {worst:.1e}; worked example {worked:.4}"))
}

fn err_rate_semantics(_: &Runtime) -> Outcome {
    use DirectionLabel::*;
    let one = vec![(vec![Up, Up, Left, Down], Some(vec![Up, Up, Left, Up]))];
    let two = vec![one[0].clone(), (vec![Right, Down], Some(vec![Right, Down]))];
    let (e1, e2) = (ok(err_rate(&one))?, ok(err_rate(&two))?);
    ensure!(e1 == 0.25, "one sequence gives {e1}");
    ensure!(e2 == 0.125, "two sequences give {e2}");

    let mut rng = SplitMix64::new(2718);
    let mut perfect = 0;
    for run in 0..1000 {
        let n = 1 + rng.below(4) as usize;
        let mut seqs = Vec::new();
        for _ in 0..n {
            let len = 1 + rng.below(8) as usize;
            let gold: Vec<DirectionLabel> = (0..len).map(|_| DirectionLabel::ALL[rng.below(4) as usize]).collect();
            let pred = match rng.below(10) {
                0 => None,
                1 => {
                    let mut p = gold.clone();
                    let i = rng.below(len as u64) as usize;
                    p[i] = DirectionLabel::ALL[(p[i] as usize + 1 + rng.below(3) as usize) % 4];
                    Some(p)
                }
                _ => Some(gold.clone()),
            };
            seqs.push((gold, pred));
        }
        let err = ok(err_rate(&seqs))?;
        let pairs: Vec<_> = seqs.iter().map(|(g, p)| (Some(g), p.as_ref())).collect();
        let acc = ok(accuracy(&pairs))?;
        ensure!((err == 0.0) == (acc == 1.0), "run {run}: err {err}, acc {acc}");
        perfect += (acc == 1.0) as usize;
    }
    ensure!(perfect > 0 && perfect < 1000, "degenerate sample: {perfect} perfect runs");
    Ok(format!("0.25 and 0.125 exact; 1000 runs agree ({perfect} perfect)"))
}

// End-to-end runs

fn base_config(data: &Path, out: &Path, task: Task, strategy: Strategy, mock: MockSpec) -> ExperimentConfig {
    ExperimentConfig {
        task,
        strategy,
        data: data.to_path_buf(),
        cleanings: None,
        examples: None,
        example_count: 3,
        prompts: None,
        vocabulary: None,
        backend: BackendConfig::mock("mock"),
        mock: Some(mock),
        output: out.to_path_buf(),
        seed: 0,
        run_id: None,
        dataset_label: None,
        allow_any_strategy: false,
        human_review: false,
        limit: None,
    }
}

async fn run_once(cfg: &ExperimentConfig) -> Result<RunSummary, String> {
    let client = ok(runner::client_for(cfg))?;
    ok(runner::run_experiment(cfg, &client, &Appender::spawn()).await)
}

fn mock_end_to_end(rt: &Runtime) -> Outcome {
    let dir = scratch();
    let d = dir.path();
    ok(samples::write_all(d))?;
    let out = d.join("out");
    let oracle = MockSpec::Oracle;
    let mut configs = Vec::new();
    let add = |task, strategy, data: &str, examples: Option<&str>, cleanings: bool| {
        let mut c = base_config(&d.join(data), &out, task, strategy, oracle.clone());
        c.examples = examples.map(|e| d.join(e));
        c.cleanings = cleanings.then(|| d.join("cleanings.jsonl"));
        c
    };
    configs.push(add(Task::Direction2D, Strategy::ZeroShot, "directions.jsonl", None, false));
    configs.push(add(Task::Direction2D, Strategy::InContext, "directions.jsonl", Some("directions_pool.jsonl"), false));
    configs.push(add(Task::Shape2D, Strategy::ZeroShot, "shapes.jsonl", None, false));
    for strategy in [Strategy::ZeroShot, Strategy::InContext, Strategy::ChainOfThought, Strategy::SpatialPrefix] {
        for cleaned in [false, true] {
            configs.push(add(Task::Motion3D, strategy, "trajectories.jsonl", Some("motion_pool.jsonl"), cleaned));
        }
        configs.push(add(Task::SpartQA, strategy, "spartqa.jsonl", Some("spartqa_pool.jsonl"), false));
    }
    for c in configs.iter_mut().filter(|c| matches!(c.strategy, Strategy::ZeroShot | Strategy::SpatialPrefix)) {
        c.examples = None;
    }

    let mut runs = 0;
    for cfg in &configs {
        let summary = rt.block_on(run_once(cfg))?;
        let (report, _) = ok(export_report(&out.join("runs"), &summary.run_id, None))?;
        let o = &report.overall;
        ensure!(
            report.complete && !report.provisional && report.errors == 0,
            "{}: complete {} provisional {} errors {}",
            summary.run_id,
            report.complete,
            report.provisional,
            report.errors
        );
        ensure!(o.accuracy == 1.0 && o.macro_f1 == 1.0, "{}: acc {} f1 {}", summary.run_id, o.accuracy, o.macro_f1);
        if cfg.task == Task::Direction2D {
            ensure!(o.err_rate == Some(0.0), "{}: err {:?}", summary.run_id, o.err_rate);
        }
        runs += 1;
    }

    let cfg = base_config(
        &d.join("trajectories.jsonl"),
        &out,
        Task::Motion3D,
        Strategy::ZeroShot,
        MockSpec::Fixed { label: "slide".into() },
    );
    let summary = rt.block_on(run_once(&cfg))?;
    let (report, _) = ok(export_report(&out.join("runs"), &summary.run_id, None))?;

    // Gold straight from the manifest file, not from the run records.
    #[derive(Deserialize)]
    struct Gold {
        gold_class: String,
    }
    let golds: Vec<Gold> = ok(read_log(&d.join("trajectories.jsonl")))?;
    let classes = ["lift", "rotate", "slide"];
    let slide = classes.iter().position(|c| *c == "slide");
    let pairs: Vec<(usize, Option<usize>)> = golds
        .iter()
        .map(|g| (classes.iter().position(|c| *c == g.gold_class).expect("known class"), slide))
        .collect();
    ensure!(pairs.len() == 30, "dataset has {} instances", pairs.len());
    for (c, name) in classes.iter().enumerate() {
        let n = pairs.iter().filter(|(g, _)| *g == c).count();
        ensure!(n == 10, "class {name} has {n} instances");
    }
    let brute = brute_macro_f1(3, &pairs);
    let o = &report.overall;
    ensure!(o.accuracy == 10.0 / 30.0, "fixed slide accuracy {}", o.accuracy);
    ensure!(o.macro_f1 == brute, "fixed slide F1 {} vs brute force {brute}", o.macro_f1);
    Ok(format!(
        "{runs} oracle runs at acc/F1 1.0 (direction Err# 0.0); fixed slide acc {:.4} F1 {:.4}",
        o.accuracy, o.macro_f1
    ))
}

// Prompts

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn pts3(xs: &[[f64; 3]]) -> PromptInput {
    PromptInput::Points3D {
        points: xs.iter().map(|p| Point3D::new(p[0], p[1], p[2])).collect(),
    }
}

fn motion_examples(with_rationale: bool) -> Vec<FewShotExample> {
    let cfg = PromptConfig::default();
    let raw = [
        ("lift", pts3(&[[150.0, 150.0, 0.0], [150.0, 151.0, 100.0], [151.0, 150.0, 200.0], [150.0, 150.0, 300.0]])),
        ("slide", pts3(&[[0.0, 150.0, 150.0], [100.0, 151.0, 150.0], [200.0, 150.0, 151.0], [300.0, 150.0, 150.0]])),
        ("rotate", pts3(&[[0.0, 300.0, 150.0], [300.0, 0.0, 150.0], [0.0, 300.0, 151.0], [300.0, 0.0, 150.0]])),
    ];
    raw.into_iter()
        .map(|(label, input)| FewShotExample {
            input,
            answer: label.to_string(),
            rationale: with_rationale.then(|| cfg.cot_rationales[label].clone()),
        })
        .collect()
}

const GOLDEN_QUERY_ID: &str = "golden-query";
const GOLDEN_STAGE1_ANSWER: &str = "Yes. All four points are 10 units from (0, 0), so (0, 0) is the center.";

fn golden_query() -> PromptInput {
    pts3(&[[10.0, 150.0, 150.0], [10.0, 150.0, 210.5], [12.0, 149.0, 280.25], [11.0, 150.0, 300.0]])
}

fn golden_transcripts() -> Result<Vec<(&'static str, ChatTranscript)>, String> {
    let b = PromptBuilder::default();
    let query = golden_query();
    let labels = PromptPlan::motion_labels();
    let mut out = Vec::new();

    let zs = PromptPlan::new(Strategy::ZeroShot, Task::Motion3D, labels.clone());
    out.push(("zero_shot", ok(b.build(&zs, &query))?));

    let mut icl = PromptPlan::new(Strategy::InContext, Task::Motion3D, labels.clone());
    icl.examples = motion_examples(false);
    out.push(("in_context", ok(b.build(&icl, &query))?));

    let mut cot = PromptPlan::new(Strategy::ChainOfThought, Task::Motion3D, labels.clone());
    cot.examples = motion_examples(true);
    out.push(("chain_of_thought", ok(b.build(&cot, &query))?));

    let mut spp = PromptPlan::new(Strategy::SpatialPrefix, Task::Motion3D, labels);
    spp.prefix = Some(ok(b.select_prefix(GOLDEN_QUERY_ID))?.clone());
    out.push(("spatial_prefix_stage1", ok(b.spp_stage1(&spp))?));
    out.push(("spatial_prefix_stage2", ok(b.spp_stage2(&spp, &query, GOLDEN_STAGE1_ANSWER))?));

    let dir = PromptPlan::new(Strategy::ZeroShot, Task::Direction2D, PromptPlan::direction_labels());
    let fixed = PromptInput::Points2D {
        points: vec![
            Point2D::from_hundredths(0, 0),
            Point2D::from_hundredths(0, 4250),
            Point2D::from_hundredths(10000, 4250),
            Point2D::from_hundredths(10000, 10000),
        ],
        format: NumericFormat::Fixed2,
    };
    out.push(("direction_zero_shot_fixed2", ok(b.build(&dir, &fixed))?));
    Ok(out)
}

fn prompt_snapshots(_: &Runtime) -> Outcome {
    let transcripts = golden_transcripts()?;
    let update = std::env::var_os("TRAJLAB_UPDATE_GOLDEN").is_some();
    let dir = golden_dir();
    for (name, t) in &transcripts {
        ok(t.validate())?;
        let path = dir.join(format!("{name}.txt"));
        let text = t.to_fixture_text();
        if update {
            ok(fs::create_dir_all(&dir))?;
            ok(fs::write(&path, &text))?;
            continue;
        }
        let want = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure!(want == text, "{name} differs from {}", path.display());
    }

    let get = |n: &str| transcripts.iter().find(|(name, _)| *name == n).map(|(_, t)| t.clone()).expect("built");
    let (s1, s2) = (get("spatial_prefix_stage1"), get("spatial_prefix_stage2"));
    ensure!(s1.is_prefix_of(&s2), "stage 2 does not extend stage 1");
    let replay = &s2.messages[s1.messages.len()];
    ensure!(
        replay.role == Role::Assistant && replay.content == GOLDEN_STAGE1_ANSWER,
        "stage 1 answer not replayed verbatim"
    );

    let b = PromptBuilder::default();
    let pool = motion_examples(false);
    for k in 1..=6 {
        let mut plan = PromptPlan::new(Strategy::InContext, Task::Motion3D, PromptPlan::motion_labels());
        plan.examples = pool.iter().cycle().take(k).cloned().collect();
        let t = ok(b.build(&plan, &golden_query()))?;
        ensure!(t.messages.len() == 2 * k + 2, "k={k} gives {} messages", t.messages.len());
    }
    let verb = if update { "rewrote" } else { "matched" };
    Ok(format!("{verb} {} golden transcripts; SPP extends verbatim; ICL 2k+2 for k=1..6", transcripts.len()))
}

#[derive(Deserialize)]
struct ParseCase {
    name: String,
    parser: String,
    text: String,
    #[serde(default)]
    expected_len: usize,
    #[serde(default)]
    candidates: Vec<String>,
    expect: ParsedAnswer,
}

#[derive(Deserialize)]
struct ParseCases {
    case: Vec<ParseCase>,
}

fn parsing_suite(_: &Runtime) -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/parsing.toml");
    let cases: ParseCases = ok(toml::from_str(&ok(fs::read_to_string(&path))?))?;
    let vocab = Vocabulary::default();
    let tags = vocab.shape_tags();
    let mut failures = Vec::new();
    let mut phrases = 0;
    for c in &cases.case {
        let got = match c.parser.as_str() {
            "motion" => parse_motion(&c.text, &vocab),
            "directions" => parse_directions(&c.text, c.expected_len, &vocab),
            "spartqa" => parse_spartqa(&c.text, &c.candidates),
            "shape" => parse_shape(&c.text, &tags, &vocab),
            other => return Err(format!("{}: unknown parser {other}", c.name)),
        };
        if got != c.expect {
            failures.push(format!("{}: got {got:?}", c.name));
        }
        if c.text == "moves in a circular path" || c.text == "mirrors the pattern of a checkmark" {
            phrases += 1;
        }
    }
    ensure!(cases.case.len() >= 30, "only {} fixtures", cases.case.len());
    ensure!(phrases == 2, "published example phrases missing from fixtures");
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(format!("{} fixtures exact", cases.case.len()))
}

// Backend

async fn spawn_stub(app: Router) -> Result<String, String> {
    let listener = ok(tokio::net::TcpListener::bind("127.0.0.1:0").await)?;
    let addr = ok(listener.local_addr())?;
    tokio::spawn(async move {
        axum::serve(listener, app).await.expect("stub server");
    });
    Ok(format!("http://{addr}/v1"))
}

fn reply(text: &str) -> Response {
    Json(json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] })).into_response()
}

fn one_turn() -> ChatTranscript {
    ChatTranscript {
        messages: vec![
            trajlab_core::ChatMessage::new(Role::System, "Label the motion."),
            trajlab_core::ChatMessage::new(Role::User, "(0, 0, 0), (0, 0, 300)"),
        ],
    }
}

struct Gauge {
    now: AtomicUsize,
    high: AtomicUsize,
}

impl Gauge {
    fn new() -> Arc<Self> {
        Arc::new(Gauge {
            now: AtomicUsize::new(0),
            high: AtomicUsize::new(0),
        })
    }

    async fn hold(&self, d: Duration) {
        let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
        self.high.fetch_max(n, Ordering::SeqCst);
        tokio::time::sleep(d).await;
        self.now.fetch_sub(1, Ordering::SeqCst);
    }
}

fn backend_robustness(rt: &Runtime) -> Outcome {
    rt.block_on(async {
        let hits: Arc<Mutex<Vec<Instant>>> = Arc::default();
        let h = hits.clone();
        let app = Router::new().route(
            "/v1/chat/completions",
            post(move || {
                let h = h.clone();
                async move {
                    let n = {
                        let mut h = h.lock().expect("hits");
                        h.push(Instant::now());
                        h.len()
                    };
                    if n <= 2 {
                        (StatusCode::TOO_MANY_REQUESTS, "rate limited").into_response()
                    } else {
                        reply("lift")
                    }
                }
            }),
        );
        let base = spawn_stub(app).await?;
        let cfg = BackendConfig::http(base, "stub");
        ensure!(cfg.retry_base_ms == 1000, "default backoff base is {} ms", cfg.retry_base_ms);
        let client = ok(LlmClient::new(cfg, None))?;
        let t = one_turn();
        let resp = ok(client
            .complete(CompletionRequest {
                instance_id: "retry",
                transcript: &t,
                stage: Stage::Main,
                oracle: None,
            })
            .await)?;
        let hits = hits.lock().expect("hits").clone();
        ensure!(resp.text == "lift" && resp.attempt == 3, "attempt {} text {:?}", resp.attempt, resp.text);
        ensure!(hits.len() == 3, "stub saw {} requests", hits.len());
        let gaps: Vec<Duration> = hits.windows(2).map(|w| w[1] - w[0]).collect();
        ensure!(gaps.iter().all(|g| *g >= Duration::from_secs(1)), "gaps {gaps:?}");

        // In-flight requests as seen by the server, for direct calls and a run.
        let gauge = Gauge::new();
        let g = gauge.clone();
        let app = Router::new().route(
            "/v1/chat/completions",
            post(move || {
                let g = g.clone();
                async move {
                    g.hold(Duration::from_millis(25)).await;
                    reply("slide")
                }
            }),
        );
        let base = spawn_stub(app).await?;
        let mut cfg = BackendConfig::http(base.clone(), "stub");
        cfg.max_concurrency = 2;
        let client = ok(LlmClient::new(cfg, None))?;
        let calls = (0..16).map(|i| {
            let (client, t) = (&client, &t);
            async move {
                let id = format!("c{i}");
                client
                    .complete(CompletionRequest {
                        instance_id: &id,
                        transcript: t,
                        stage: Stage::Main,
                        oracle: None,
                    })
                    .await
            }
        });
        for r in futures::future::join_all(calls).await {
            ok(r)?;
        }
        let direct_high = gauge.high.swap(0, Ordering::SeqCst);
        ensure!(direct_high <= 2, "direct calls reached {direct_high} in flight, limit 2");

        let dir = scratch();
        ok(samples::write_all(dir.path()))?;
        let mut cfg = base_config(
            &dir.path().join("trajectories.jsonl"),
            &dir.path().join("out"),
            Task::Motion3D,
            Strategy::SpatialPrefix,
            MockSpec::Oracle,
        );
        cfg.mock = None;
        cfg.backend = BackendConfig::http(base, "stub");
        cfg.backend.max_concurrency = 3;
        let summary = run_once(&cfg).await?;
        let run_high = gauge.high.load(Ordering::SeqCst);
        ensure!(summary.new_records == 30 && summary.errors == 0, "run summary {summary:?}");
        ensure!(run_high <= 3, "run reached {run_high} in flight, limit 3");
        Ok(format!(
            "attempt 3 after gaps {:.2}s/{:.2}s; high-water {direct_high}/2 direct, {run_high}/3 in a run",
            gaps[0].as_secs_f64(),
            gaps[1].as_secs_f64()
        ))
    })
}

// Resume

fn run_accounting(rt: &Runtime) -> Outcome {
    rt.block_on(async {
        let dir = scratch();
        let d = dir.path();
        ok(samples::write_all(d))?;
        let mut cfg = base_config(
            &d.join("trajectories.jsonl"),
            &d.join("out"),
            Task::Motion3D,
            Strategy::SpatialPrefix,
            MockSpec::Oracle,
        );
        cfg.cleanings = Some(d.join("cleanings.jsonl"));
        let run_dir = cfg.run_dir();
        let mut calls = 0;

        cfg.limit = Some(7);
        let first = run_once(&cfg).await?;
        calls += first.backend_calls;
        ensure!(first.new_records == 7 && first.remaining == 23, "first pass {first:?}");

        // A crash after a stage-one answer was synced but before its record,
        // then a torn half-line at the end of the records log.
        let ids: Vec<String> = trajlab_core::runner::RunManifest::load(&run_dir)
            .map_err(|e| e.to_string())?
            .instance_ids;
        let orphan = ids[7].clone();
        let b = PromptBuilder::default();
        let prefix = ok(b.select_prefix(&orphan))?.clone();
        let stage = StageRecord {
            run_id: first.run_id.clone(),
            instance_id: orphan.clone(),
            prefix_id: prefix.id,
            question: prefix.text,
            response: trajlab_core::ModelResponse {
                text: "Up.".into(),
                latency_ms: 0,
                backend: "mock".into(),
                attempt: 1,
            },
            logged_at: chrono::Utc::now(),
        };
        append_raw(&run_dir.join(STAGES_LOG), &format!("{}\n", ok(serde_json::to_string(&stage))?))?;
        append_raw(&run_dir.join(RECORDS_LOG), "{\"run_id\":\"torn")?;

        cfg.limit = Some(11);
        let second = run_once(&cfg).await?;
        calls += second.backend_calls;
        ensure!(second.skipped == 7 && second.new_records == 11, "second pass {second:?}");

        cfg.limit = None;
        let third = run_once(&cfg).await?;
        calls += third.backend_calls;
        ensure!(third.skipped == 18 && third.new_records == 12 && third.remaining == 0, "third pass {third:?}");

        let again = run_once(&cfg).await?;
        ensure!(again.backend_calls == 0 && again.new_records == 0, "rerun of a finished run {again:?}");

        let records: Vec<RunRecord> = ok(read_log(&run_dir.join(RECORDS_LOG)))?;
        let stages: Vec<StageRecord> = ok(read_log(&run_dir.join(STAGES_LOG)))?;
        let unique: HashSet<&str> = records.iter().map(|r| r.instance_id.as_str()).collect();
        let stage_ids: HashSet<&str> = stages.iter().map(|s| s.instance_id.as_str()).collect();
        ensure!(records.len() == 30 && unique.len() == 30, "{} records, {} unique", records.len(), unique.len());
        ensure!(stages.len() == 30 && stage_ids.len() == 30, "{} stage records", stages.len());
        ensure!(ids.iter().all(|i| unique.contains(i.as_str())), "some instance has no record");
        let reused = records.iter().find(|r| r.instance_id == orphan).map(|r| r.responses[0].text.clone());
        ensure!(reused.as_deref() == Some("Up."), "logged stage one was not reused: {reused:?}");
        // Two calls per instance, minus the stage-one answer already on disk.
        ensure!(calls == 2 * 30 - 1, "{calls} backend calls, expected 59");
        Ok(format!("30 records once each over 3 passes (7+11+12); {calls} calls, 0 duplicates"))
    })
}

fn append_raw(path: &Path, text: &str) -> Result<(), String> {
    use std::io::Write;
    let mut f = ok(fs::OpenOptions::new().append(true).create(true).open(path))?;
    ok(f.write_all(text.as_bytes()))
}
