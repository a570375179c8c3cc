//! 3D end-effector trajectories: manifest ingestion, `[0, 300]` grid
//! normalization and human cleaning selections.
//!
//! The standard pipeline cleans first and normalizes afterwards, so a cleaned
//! slice fills the whole grid on its own.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::manifest::{self, ManifestError};
use crate::trajgen::round_half_up;

pub const GRID_MAX: f64 = 300.0;
pub const GRID_MID: f64 = 150.0;

#[derive(Debug, Error, PartialEq)]
pub enum CleaningError {
    #[error("rotate trajectories are kept whole and cannot be cleaned")]
    RotateNotCleanable,
    #[error("selection [{start}, {end}) is out of bounds for {len} points")]
    BoundsError { start: usize, end: usize, len: usize },
    #[error("selection is for `{selection}`, not `{trajectory}`")]
    WrongTrajectory { selection: String, trajectory: String },
    #[error("unknown trajectory `{0}`")]
    UnknownTrajectory(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3D { x, y, z }
    }

    fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

fn write_coord<S: serde::ser::SerializeSeq>(seq: &mut S, v: f64) -> Result<(), S::Error> {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        seq.serialize_element(&(v as i64))
    } else {
        seq.serialize_element(&v)
    }
}

impl Serialize for Point3D {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(3))?;
        for v in self.coords() {
            write_coord(&mut seq, v)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Point3D {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(deserializer)?;
        Ok(Point3D { x, y, z })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Lift,
    Rotate,
    Slide,
}

impl MotionClass {
    pub const ALL: [MotionClass; 3] = [MotionClass::Lift, MotionClass::Rotate, MotionClass::Slide];

    pub fn as_str(self) -> &'static str {
        match self {
            MotionClass::Lift => "lift",
            MotionClass::Rotate => "rotate",
            MotionClass::Slide => "slide",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory3D {
    pub id: String,
    pub points: Vec<Point3D>,
    pub gold_class: MotionClass,
    #[serde(default)]
    pub cleaned: bool,
    #[serde(default)]
    pub source: String,
}

impl Trajectory3D {
    /// True when every coordinate is an integer in `[0, 300]`.
    pub fn is_on_grid(&self) -> bool {
        self.points
            .iter()
            .flat_map(|p| p.coords())
            .all(|v| v.fract() == 0.0 && (0.0..=GRID_MAX).contains(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningSelection {
    pub trajectory_id: String,
    pub start_index: usize,
    pub end_index: usize,
    pub annotator: String,
    #[serde(default = "Utc::now")]
    pub timestamp: DateTime<Utc>,
    /// Client token; a repeated token is acknowledged without a second append.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission_id: Option<String>,
}

impl CleaningSelection {
    pub fn validate_for(&self, traj: &Trajectory3D) -> Result<(), CleaningError> {
        if self.trajectory_id != traj.id {
            return Err(CleaningError::WrongTrajectory {
                selection: self.trajectory_id.clone(),
                trajectory: traj.id.clone(),
            });
        }
        if traj.gold_class == MotionClass::Rotate {
            return Err(CleaningError::RotateNotCleanable);
        }
        let len = traj.points.len();
        if self.start_index >= self.end_index
            || self.end_index > len
            || self.end_index - self.start_index < 2
        {
            return Err(CleaningError::BoundsError {
                start: self.start_index,
                end: self.end_index,
                len,
            });
        }
        Ok(())
    }
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory3D>, ManifestError> {
    let records = manifest::read_records::<Trajectory3D>(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (line, t) in records {
        if t.points.len() < 2 {
            return Err(ManifestError::invalid(
                line,
                &t.id,
                "points",
                format!("need at least 2 points, got {}", t.points.len()),
            ));
        }
        if t.points.iter().flat_map(|p| p.coords()).any(|v| !v.is_finite()) {
            return Err(ManifestError::invalid(line, &t.id, "points", "non-finite coordinate"));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory3D]) -> Result<(), ManifestError> {
    manifest::write_records(path, trajs)
}

pub fn load_cleanings(path: &Path) -> Result<Vec<CleaningSelection>, ManifestError> {
    manifest::read_log(path)
}

/// Per-axis min-max onto the integer grid `[0, 300]`, half-up; a flat axis
/// sits at 150.
pub fn normalize_grid(traj: &Trajectory3D) -> Trajectory3D {
    let mut axes: [Vec<f64>; 3] = Default::default();
    for (a, axis) in axes.iter_mut().enumerate() {
        let values: Vec<f64> = traj.points.iter().map(|p| p.coords()[a]).collect();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        *axis = values
            .iter()
            .map(|&v| {
                if max > min {
                    round_half_up((v - min) * GRID_MAX / (max - min)) as f64
                } else {
                    GRID_MID
                }
            })
            .collect();
    }
    let points = (0..traj.points.len())
        .map(|i| Point3D::new(axes[0][i], axes[1][i], axes[2][i]))
        .collect();
    Trajectory3D {
        points,
        ..traj.clone()
    }
}

pub fn apply_cleaning(traj: &Trajectory3D, sel: &CleaningSelection) -> Result<Trajectory3D, CleaningError> {
    sel.validate_for(traj)?;
    Ok(Trajectory3D {
        points: traj.points[sel.start_index..sel.end_index].to_vec(),
        cleaned: true,
        ..traj.clone()
    })
}

/// Applies the latest selection per trajectory (log order), leaving
/// trajectories without one untouched.
pub fn apply_cleanings(
    trajs: &[Trajectory3D],
    selections: &[CleaningSelection],
) -> Result<Vec<Trajectory3D>, CleaningError> {
    let mut latest: HashMap<&str, &CleaningSelection> = HashMap::new();
    for sel in selections {
        latest.insert(sel.trajectory_id.as_str(), sel);
    }
    for id in latest.keys() {
        if !trajs.iter().any(|t| t.id == *id) {
            return Err(CleaningError::UnknownTrajectory(id.to_string()));
        }
    }
    trajs
        .iter()
        .map(|t| match latest.get(t.id.as_str()) {
            Some(sel) => apply_cleaning(t, sel),
            None => Ok(t.clone()),
        })
        .collect()
}
