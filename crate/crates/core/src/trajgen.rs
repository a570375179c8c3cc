//! Seeded 2D direction-labeling datasets and the ground-truth direction oracle.
//!
//! Sequences are random walks on the integer lattice, one axis per segment,
//! then min-max scaled onto `[0, 100]` as integers or two-decimal fixed point.
//! PRNG draw order per sequence: segment count, then for each segment a
//! direction (uniform over [`DirectionLabel::ALL`]) and a step in `1..=10`.
//! A sequence whose scaled form no longer relabels to its gold labels is
//! discarded and the walk redrawn from the following PRNG output.

use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::manifest::{self, ManifestError};
use crate::rng::SplitMix64;

const STEP_RANGE: (u64, u64) = (1, 10);
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum TrajGenError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("segment {index} moves equally along x and y; no single direction applies")]
    AmbiguousSegment { index: usize },
    #[error("invalid scaling request: {0}")]
    InvalidScale(String),
    #[error("no valid sequence after {0} attempts")]
    GenerationExhausted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionLabel {
    Left,
    Right,
    Up,
    Down,
}

impl DirectionLabel {
    pub const ALL: [DirectionLabel; 4] = [
        DirectionLabel::Left,
        DirectionLabel::Right,
        DirectionLabel::Up,
        DirectionLabel::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DirectionLabel::Left => "left",
            DirectionLabel::Right => "right",
            DirectionLabel::Up => "up",
            DirectionLabel::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
    }

    /// Unit lattice step, with Up = +y and Right = +x.
    fn unit(self) -> (i64, i64) {
        match self {
            DirectionLabel::Left => (-1, 0),
            DirectionLabel::Right => (1, 0),
            DirectionLabel::Up => (0, 1),
            DirectionLabel::Down => (0, -1),
        }
    }
}

impl fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Joins labels the way gold answers are written: `up, up, left`.
pub fn join_labels(labels: &[DirectionLabel]) -> String {
    labels
        .iter()
        .map(|l| l.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericFormat {
    Integer,
    Fixed2,
}

impl NumericFormat {
    /// Hundredths per representable step.
    fn quantum(self) -> i64 {
        match self {
            NumericFormat::Integer => 100,
            NumericFormat::Fixed2 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NumericFormat::Integer => "integer",
            NumericFormat::Fixed2 => "fixed2",
        }
    }
}

/// A scaled coordinate stored exactly, in hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord(i64);

impl Coord {
    pub fn from_hundredths(h: i64) -> Self {
        Coord(h)
    }

    pub fn from_int(v: i64) -> Self {
        Coord(v * 100)
    }

    pub fn hundredths(self) -> i64 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Nearest coordinate to a finite float.
    pub fn from_f64(v: f64) -> Self {
        Coord((v * 100.0).round() as i64)
    }

    pub fn render(self, format: NumericFormat) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        match format {
            NumericFormat::Integer => {
                // Integer data always sits on whole units; round defensively.
                let units = (abs + 50) / 100;
                if units == 0 {
                    "0".to_string()
                } else {
                    format!("{sign}{units}")
                }
            }
            NumericFormat::Fixed2 => format!("{sign}{}.{:02}", abs / 100, abs % 100),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Point2D {
    pub x: Coord,
    pub y: Coord,
}

impl Point2D {
    pub fn int(x: i64, y: i64) -> Self {
        Point2D {
            x: Coord::from_int(x),
            y: Coord::from_int(y),
        }
    }

    pub fn from_hundredths(x: i64, y: i64) -> Self {
        Point2D {
            x: Coord::from_hundredths(x),
            y: Coord::from_hundredths(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionSequence {
    pub id: String,
    pub points: Vec<Point2D>,
    pub gold_labels: Vec<DirectionLabel>,
    pub horizon: Horizon,
    pub format: NumericFormat,
}

impl DirectionSequence {
    /// Split name used by reports: `integer-short`, `fixed2-short`, `integer-long`.
    pub fn split(&self) -> String {
        let horizon = match self.horizon {
            Horizon::Short => "short",
            Horizon::Long => "long",
        };
        format!("{}-{horizon}", self.format.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_short: usize,
    pub n_long: usize,
    pub n_float: usize,
    #[serde(default = "default_short")]
    pub short_segments: RangeInclusive<usize>,
    #[serde(default = "default_long")]
    pub long_segments: RangeInclusive<usize>,
    /// Prefix for generated ids, so pools from different seeds never collide.
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_short() -> RangeInclusive<usize> {
    6..=8
}

fn default_long() -> RangeInclusive<usize> {
    35..=40
}

fn default_prefix() -> String {
    "d2".to_string()
}

impl DatasetSpec {
    /// The 10/10/10 short/long/float recipe.
    pub fn standard(seed: u64) -> Self {
        DatasetSpec {
            seed,
            n_short: 10,
            n_long: 10,
            n_float: 10,
            short_segments: default_short(),
            long_segments: default_long(),
            id_prefix: default_prefix(),
        }
    }

    fn validate(&self) -> Result<(), TrajGenError> {
        for (name, r) in [("short_segments", &self.short_segments), ("long_segments", &self.long_segments)] {
            if r.is_empty() {
                return Err(TrajGenError::InvalidSpec(format!("{name} range {r:?} is empty")));
            }
            if *r.start() < 1 {
                return Err(TrajGenError::InvalidSpec(format!("{name} must start at 1 or more")));
            }
        }
        Ok(())
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<DirectionSequence>, TrajGenError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let groups = [
        (spec.n_short, Horizon::Short, NumericFormat::Integer, &spec.short_segments, "short-int"),
        (spec.n_long, Horizon::Long, NumericFormat::Integer, &spec.long_segments, "long-int"),
        (spec.n_float, Horizon::Short, NumericFormat::Fixed2, &spec.short_segments, "short-fixed2"),
    ];
    let mut out = Vec::with_capacity(spec.n_short + spec.n_long + spec.n_float);
    for (count, horizon, format, segments, tag) in groups {
        for i in 0..count {
            let (points, gold_labels) = draw_sequence(&mut rng, segments, format)?;
            out.push(DirectionSequence {
                id: format!("{}-{tag}-{i:03}", spec.id_prefix),
                points,
                gold_labels,
                horizon,
                format,
            });
        }
    }
    Ok(out)
}

fn draw_sequence(
    rng: &mut SplitMix64,
    segments: &RangeInclusive<usize>,
    format: NumericFormat,
) -> Result<(Vec<Point2D>, Vec<DirectionLabel>), TrajGenError> {
    for _ in 0..MAX_ATTEMPTS {
        let n = rng.inclusive(*segments.start() as u64, *segments.end() as u64) as usize;
        let mut labels = Vec::with_capacity(n);
        let mut walk = Vec::with_capacity(n + 1);
        let (mut x, mut y) = (0i64, 0i64);
        walk.push([0.0, 0.0]);
        for _ in 0..n {
            let dir = DirectionLabel::ALL[rng.below(4) as usize];
            let step = rng.inclusive(STEP_RANGE.0, STEP_RANGE.1) as i64;
            let (dx, dy) = dir.unit();
            x += dx * step;
            y += dy * step;
            labels.push(dir);
            walk.push([x as f64, y as f64]);
        }
        let scaled = scale_to_range(&walk, 0.0, 100.0, format)?;
        if oracle_label_segments(&scaled).ok().as_deref() == Some(labels.as_slice()) {
            return Ok((scaled, labels));
        }
    }
    Err(TrajGenError::GenerationExhausted(MAX_ATTEMPTS))
}

/// Labels each consecutive pair by its dominant axis; ties (including a zero
/// move) are an error rather than a guess.
pub fn oracle_label_segments(points: &[Point2D]) -> Result<Vec<DirectionLabel>, TrajGenError> {
    if points.len() < 2 {
        return Err(TrajGenError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    points
        .windows(2)
        .enumerate()
        .map(|(index, w)| {
            let dx = w[1].x.hundredths() - w[0].x.hundredths();
            let dy = w[1].y.hundredths() - w[0].y.hundredths();
            match dx.abs().cmp(&dy.abs()) {
                std::cmp::Ordering::Equal => Err(TrajGenError::AmbiguousSegment { index }),
                std::cmp::Ordering::Greater if dx > 0 => Ok(DirectionLabel::Right),
                std::cmp::Ordering::Greater => Ok(DirectionLabel::Left),
                std::cmp::Ordering::Less if dy > 0 => Ok(DirectionLabel::Up),
                std::cmp::Ordering::Less => Ok(DirectionLabel::Down),
            }
        })
        .collect()
}

/// Per-axis min-max map onto `[lo, hi]` with half-up rounding to `format`.
/// An axis with zero range lands on the midpoint.
pub fn scale_to_range(
    raw: &[[f64; 2]],
    lo: f64,
    hi: f64,
    format: NumericFormat,
) -> Result<Vec<Point2D>, TrajGenError> {
    if raw.is_empty() {
        return Err(TrajGenError::InvalidScale("no points".into()));
    }
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(TrajGenError::InvalidScale(format!("need hi > lo, got [{lo}, {hi}]")));
    }
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrajGenError::InvalidScale("non-finite coordinate".into()));
    }
    let xs = scale_axis(raw.iter().map(|p| p[0]), lo, hi, format);
    let ys = scale_axis(raw.iter().map(|p| p[1]), lo, hi, format);
    Ok(xs
        .into_iter()
        .zip(ys)
        .map(|(x, y)| Point2D { x, y })
        .collect())
}

fn scale_axis(values: impl Iterator<Item = f64> + Clone, lo: f64, hi: f64, format: NumericFormat) -> Vec<Coord> {
    let q = match format {
        NumericFormat::Integer => 1.0,
        NumericFormat::Fixed2 => 100.0,
    };
    let (min, max) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let quantum = format.quantum();
    values
        .map(|v| {
            let units = if max > min {
                // Multiply before dividing so lattice inputs round exactly.
                lo * q + (v - min) * (hi - lo) * q / (max - min)
            } else {
                (lo + hi) / 2.0 * q
            };
            Coord::from_hundredths(round_half_up(units) * quantum)
        })
        .collect()
}

pub(crate) fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeInstance {
    pub id: String,
    pub points: Vec<Point2D>,
    pub gold_shape: String,
    pub cleaned: bool,
    pub format: NumericFormat,
}

/// One line of a 2D manifest as read from disk, before scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifestEntry {
    pub id: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_shape: Option<String>,
    #[serde(default)]
    pub cleaned: bool,
    pub format: NumericFormat,
}

pub fn load_shape_dataset(path: &Path) -> Result<Vec<ShapeInstance>, ManifestError> {
    manifest::read_records::<ShapeManifestEntry>(path)?
        .into_iter()
        .map(|(line, e)| {
            let gold_shape = match e.gold_shape {
                Some(s) if !s.trim().is_empty() => s.trim().to_lowercase(),
                _ => return Err(ManifestError::invalid(line, &e.id, "gold_shape", "missing shape label")),
            };
            let points = scale_to_range(&e.points, 0.0, 100.0, e.format)
                .map_err(|err| ManifestError::invalid(line, &e.id, "points", err.to_string()))?;
            Ok(ShapeInstance {
                id: e.id,
                points,
                gold_shape,
                cleaned: e.cleaned,
                format: e.format,
            })
        })
        .collect()
}

/// Serialized form of a generated sequence. Integer coordinates are written
/// bare and fixed-point ones with exactly two decimals.
#[derive(Serialize)]
struct SequenceOut<'a> {
    id: &'a str,
    points: FormattedPoints<'a>,
    gold_labels: &'a [DirectionLabel],
    horizon: Horizon,
    cleaned: bool,
    format: NumericFormat,
}

struct FormattedPoints<'a>(&'a [Point2D], NumericFormat);

impl Serialize for FormattedPoints<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for p in self.0 {
            let pair = format!("[{},{}]", p.x.render(self.1), p.y.render(self.1));
            let raw = RawValue::from_string(pair).map_err(serde::ser::Error::custom)?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

#[derive(Deserialize)]
struct SequenceIn {
    id: String,
    points: Vec<[f64; 2]>,
    gold_labels: Option<Vec<DirectionLabel>>,
    horizon: Option<Horizon>,
    format: NumericFormat,
}

pub fn sequence_to_json(seq: &DirectionSequence) -> String {
    serde_json::to_string(&SequenceOut {
        id: &seq.id,
        points: FormattedPoints(&seq.points, seq.format),
        gold_labels: &seq.gold_labels,
        horizon: seq.horizon,
        cleaned: false,
        format: seq.format,
    })
    .expect("sequence serializes")
}

pub fn dataset_to_jsonl(seqs: &[DirectionSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&sequence_to_json(s));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, seqs: &[DirectionSequence]) -> Result<(), ManifestError> {
    std::fs::write(path, dataset_to_jsonl(seqs)).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a generated direction dataset back without rescaling, checking every
/// sequence invariant.
pub fn load_direction_dataset(path: &Path) -> Result<Vec<DirectionSequence>, ManifestError> {
    manifest::read_records::<SequenceIn>(path)?
        .into_iter()
        .map(|(line, r)| {
            let bad = |field: &str, msg: String| ManifestError::invalid(line, &r.id, field, msg);
            let points: Vec<Point2D> = r
                .points
                .iter()
                .map(|p| Point2D {
                    x: Coord::from_f64(p[0]),
                    y: Coord::from_f64(p[1]),
                })
                .collect();
            if r.format == NumericFormat::Integer
                && points.iter().any(|p| p.x.hundredths() % 100 != 0 || p.y.hundredths() % 100 != 0)
            {
                return Err(bad("points", "fractional value in integer-format sequence".into()));
            }
            let gold_labels = r
                .gold_labels
                .clone()
                .ok_or_else(|| bad("gold_labels", "missing".into()))?;
            let oracle = oracle_label_segments(&points).map_err(|e| bad("points", e.to_string()))?;
            if oracle != gold_labels {
                return Err(bad("gold_labels", "labels disagree with point deltas".into()));
            }
            if points.windows(2).any(|w| w[0].x != w[1].x && w[0].y != w[1].y) {
                return Err(bad("points", "segment moves along both axes".into()));
            }
            Ok(DirectionSequence {
                id: r.id,
                points,
                gold_labels,
                horizon: r.horizon.unwrap_or(Horizon::Short),
                format: r.format,
            })
        })
        .collect()
}
