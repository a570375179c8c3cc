//! Small deterministic datasets for demos, tests and benchmarks.
//!
//! None of this is real benchmark data. The 3D trajectories imitate the
//! three manipulation motions with a few millimetres of noise, the shape
//! traces are parametric circles and checkmarks, and the QA items are short
//! hand-written scenes covering all four question types.

use std::f64::consts::TAU;
use std::path::Path;

use chrono::DateTime;

use crate::manifest::{self, ManifestError};
use crate::rng::SplitMix64;
use crate::spartqa::{QType, SpartQAInstance};
use crate::trajdata::{CleaningSelection, MotionClass, Point3D, Trajectory3D};
use crate::trajgen::{self, DatasetSpec, NumericFormat, ShapeManifestEntry};

fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

fn noise(rng: &mut SplitMix64, amplitude: f64) -> f64 {
    (rng.unit_f64() - 0.5) * 2.0 * amplitude
}

fn motion_trajectory(rng: &mut SplitMix64, id: String, class: MotionClass) -> Trajectory3D {
    let n = rng.inclusive(50, 100) as usize;
    let (x0, y0, z0) = (noise(rng, 0.1), noise(rng, 0.1), 0.45 + rng.unit_f64() * 0.05);
    let heading = if rng.below(2) == 0 { 1.0 } else { -1.0 };
    let cycles = 2.0 + rng.below(2) as f64;
    let points = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let (x, y, z) = match class {
                // Reach down, grasp, then raise.
                MotionClass::Lift => {
                    let dz = if t < 0.3 { -0.05 * t / 0.3 } else { -0.05 + 0.25 * (t - 0.3) / 0.7 };
                    (x0 + 0.02 * t, y0, z0 + dz)
                }
                MotionClass::Rotate => {
                    let phase = (TAU * cycles * t).sin();
                    (x0 + 0.06 * phase, y0 + 0.04 * (TAU * cycles * t).cos(), z0)
                }
                MotionClass::Slide => (x0 + heading * 0.25 * t, y0 + 0.01 * t, z0),
            };
            Point3D::new(
                round4(x + noise(rng, 0.002)),
                round4(y + noise(rng, 0.002)),
                round4(z + noise(rng, 0.002)),
            )
        })
        .collect();
    Trajectory3D {
        id,
        points,
        gold_class: class,
        cleaned: false,
        source: "synthetic".into(),
    }
}

/// `per_class` trajectories of each motion class, 50 to 100 points each,
/// class-interleaved.
pub fn motion_trajectories(seed: u64, per_class: usize, id_prefix: &str) -> Vec<Trajectory3D> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(per_class * 3);
    for i in 0..per_class {
        for class in MotionClass::ALL {
            out.push(motion_trajectory(&mut rng, format!("{id_prefix}-{class}-{i:02}"), class));
        }
    }
    out
}

/// The balanced 30-trajectory evaluation set.
pub fn motion_dataset() -> Vec<Trajectory3D> {
    motion_trajectories(2024, 10, "calvin")
}

/// Few-shot pool with ids disjoint from [`motion_dataset`].
pub fn motion_example_pool() -> Vec<Trajectory3D> {
    motion_trajectories(77, 2, "pool")
}

/// Keeps the middle 60% of every lift and slide trajectory.
pub fn sample_cleanings(trajs: &[Trajectory3D]) -> Vec<CleaningSelection> {
    trajs
        .iter()
        .filter(|t| t.gold_class != MotionClass::Rotate)
        .map(|t| {
            let n = t.points.len();
            CleaningSelection {
                trajectory_id: t.id.clone(),
                start_index: n / 5,
                end_index: n - n / 5,
                annotator: "sample".into(),
                timestamp: DateTime::from_timestamp(1_700_000_000, 0).expect("valid timestamp"),
                submission_id: Some(format!("sample-{}", t.id)),
            }
        })
        .collect()
}

fn circle(rng: &mut SplitMix64) -> Vec<[f64; 2]> {
    let n = 16 + rng.below(9) as usize;
    let r = 20.0 + rng.unit_f64() * 30.0;
    let start = rng.unit_f64() * TAU;
    (0..=n)
        .map(|i| {
            let a = start + TAU * i as f64 / n as f64;
            [round4(r * a.cos() + noise(rng, 0.5)), round4(r * a.sin() + noise(rng, 0.5))]
        })
        .collect()
}

fn checkmark(rng: &mut SplitMix64) -> Vec<[f64; 2]> {
    let down = 4 + rng.below(3) as usize;
    let up = 8 + rng.below(4) as usize;
    let scale = 10.0 + rng.unit_f64() * 10.0;
    let mut pts = Vec::with_capacity(down + up + 1);
    for i in 0..=down {
        let t = i as f64 / down as f64;
        pts.push([t * scale, scale * (1.0 - t)]);
    }
    for i in 1..=up {
        let t = i as f64 / up as f64;
        pts.push([scale + t * 2.0 * scale, t * 3.0 * scale]);
    }
    pts.into_iter()
        .map(|[x, y]| [round4(x + noise(rng, 0.3)), round4(y + noise(rng, 0.3))])
        .collect()
}

/// Thirteen traces (seven circles, six checkmarks), each in both numeric
/// formats.
pub fn shape_manifest() -> Vec<ShapeManifestEntry> {
    let mut rng = SplitMix64::new(13);
    let mut out = Vec::with_capacity(26);
    for i in 0..13 {
        let (tag, points) = if i % 2 == 0 {
            ("circle", circle(&mut rng))
        } else {
            ("checkmark", checkmark(&mut rng))
        };
        for format in [NumericFormat::Integer, NumericFormat::Fixed2] {
            out.push(ShapeManifestEntry {
                id: format!("shape-{}-{i:02}", format.as_str()),
                points: points.clone(),
                gold_shape: Some(tag.into()),
                cleaned: false,
                format,
            });
        }
    }
    out
}

fn qa(
    id: &str,
    qtype: QType,
    story: &str,
    question: &str,
    candidates: &[&str],
    gold: &[&str],
    rationale: Option<&str>,
) -> SpartQAInstance {
    SpartQAInstance {
        id: id.into(),
        story: story.into(),
        question: question.into(),
        qtype,
        candidates: candidates.iter().map(|s| s.to_string()).collect(),
        gold: gold.iter().map(|s| s.to_string()).collect(),
        rationale: rationale.map(String::from),
    }
}

const RELATIONS: &[&str] = &["left", "right", "above", "below", "near to", "far from", "touching"];
const BLOCKS: &[&str] = &["block A", "block B", "block C"];
const YES_NO: &[&str] = &["Yes", "No"];

const STORY_1: &str = "There are three blocks called A, B and C. Block A is to the left of block B and block C is \
to the right of block B. In block A there is a small yellow circle above a medium black square. A large blue \
triangle is below the medium black square. Block B contains a medium yellow square touching the bottom edge.";

const STORY_2: &str = "There are three blocks called A, B and C. Block B is above block A and block C is below \
block A. Block A has a large black circle to the right of a small blue square. Block C has a medium black \
triangle and a small yellow circle. The small yellow circle is far from the medium black triangle.";

/// Eight QA items, two per question type, one with two gold answers.
pub fn spartqa_dataset() -> Vec<SpartQAInstance> {
    vec![
        qa(
            "sq-fr-0",
            QType::FR,
            STORY_1,
            "Where is the small yellow circle relative to the medium black square?",
            RELATIONS,
            &["above"],
            None,
        ),
        qa(
            "sq-fr-1",
            QType::FR,
            STORY_2,
            "Where is the small blue square relative to the large black circle?",
            RELATIONS,
            &["left", "near to"],
            None,
        ),
        qa(
            "sq-fb-0",
            QType::FB,
            STORY_1,
            "Which block has a medium yellow square?",
            BLOCKS,
            &["block B"],
            None,
        ),
        qa(
            "sq-fb-1",
            QType::FB,
            STORY_2,
            "Which block has a medium black triangle?",
            BLOCKS,
            &["block C"],
            None,
        ),
        qa(
            "sq-co-0",
            QType::CO,
            STORY_1,
            "Which object is below the medium black square, the large blue triangle or the small yellow circle?",
            &["large blue triangle", "small yellow circle"],
            &["large blue triangle"],
            None,
        ),
        qa(
            "sq-co-1",
            QType::CO,
            STORY_2,
            "Which object is to the right of the small blue square, the large black circle or the small yellow circle?",
            &["large black circle", "small yellow circle"],
            &["large black circle"],
            None,
        ),
        qa(
            "sq-yn-0",
            QType::YN,
            STORY_1,
            "Is the large blue triangle above the small yellow circle?",
            YES_NO,
            &["No"],
            None,
        ),
        qa(
            "sq-yn-1",
            QType::YN,
            STORY_2,
            "Is block C below block B?",
            YES_NO,
            &["Yes"],
            None,
        ),
    ]
}

/// Few-shot QA pool with worked reasoning.
pub fn spartqa_example_pool() -> Vec<SpartQAInstance> {
    const STORY: &str = "There are two blocks called A and B. Block A is above block B. Block A has a small \
black triangle to the left of a large yellow square. Block B has a medium blue circle.";
    vec![
        qa(
            "sq-pool-0",
            QType::FR,
            STORY,
            "Where is the large yellow square relative to the small black triangle?",
            RELATIONS,
            &["right"],
            Some("The triangle is to the left of the square, so the square is to the right of the triangle."),
        ),
        qa(
            "sq-pool-1",
            QType::YN,
            STORY,
            "Is the medium blue circle below the small black triangle?",
            YES_NO,
            &["Yes"],
            Some("The circle is in block B, which is below block A holding the triangle."),
        ),
        qa(
            "sq-pool-2",
            QType::FB,
            STORY,
            "Which block has a medium blue circle?",
            &["block A", "block B"],
            &["block B"],
            Some("Only block B is described as containing a circle."),
        ),
    ]
}

/// Direction pool with ids disjoint from the standard generated sets.
pub fn direction_example_pool() -> DatasetSpec {
    DatasetSpec {
        n_short: 2,
        n_long: 0,
        n_float: 1,
        id_prefix: "pool".into(),
        ..DatasetSpec::standard(8)
    }
}

/// Writes every sample dataset under `dir` and returns the file names.
pub fn write_all(dir: &Path) -> Result<Vec<&'static str>, ManifestError> {
    std::fs::create_dir_all(dir).map_err(|source| ManifestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let gen = |spec: &DatasetSpec| {
        trajgen::generate_dataset(spec).map_err(|e| ManifestError::Parse {
            line: 0,
            message: e.to_string(),
        })
    };
    let motion = motion_dataset();
    trajgen::write_dataset(&dir.join("directions.jsonl"), &gen(&DatasetSpec::standard(7))?)?;
    trajgen::write_dataset(&dir.join("directions_pool.jsonl"), &gen(&direction_example_pool())?)?;
    manifest::write_records(&dir.join("trajectories.jsonl"), &motion)?;
    manifest::write_records(&dir.join("motion_pool.jsonl"), motion_example_pool())?;
    manifest::write_records(&dir.join("cleanings.jsonl"), sample_cleanings(&motion))?;
    manifest::write_records(&dir.join("shapes.jsonl"), shape_manifest())?;
    manifest::write_records(&dir.join("spartqa.jsonl"), spartqa_dataset())?;
    manifest::write_records(&dir.join("spartqa_pool.jsonl"), spartqa_example_pool())?;
    Ok(vec![
        "directions.jsonl",
        "directions_pool.jsonl",
        "trajectories.jsonl",
        "motion_pool.jsonl",
        "cleanings.jsonl",
        "shapes.jsonl",
        "spartqa.jsonl",
        "spartqa_pool.jsonl",
    ])
}
