//! The trajectory data model: points, trajectories, databases, simplified
//! databases, per-point importance scores, and the retention budget.
//!
//! Conventions used throughout the crate:
//! - `x` is longitude in degrees, `y` is latitude in degrees, `t` is epoch
//!   seconds;
//! - a point is identified by its trajectory id and its index within the
//!   original trajectory;
//! - a compression rate `cr` in (0, 1] is the fraction of points *retained*,
//!   and the point budget is `round(cr * total_points)` (half up, at least 1)
//!   shared across the whole database.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

/// Opaque trajectory identifier. Cheap to clone and totally ordered, so
/// query results and reports are deterministic.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrajId(Arc<str>);

impl TrajId {
    pub fn new(id: impl AsRef<str>) -> Self {
        TrajId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TrajId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for TrajId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TrajId({})", self.0)
    }
}

impl From<&str> for TrajId {
    fn from(s: &str) -> Self {
        TrajId::new(s)
    }
}

impl From<String> for TrajId {
    fn from(s: String) -> Self {
        TrajId::new(s)
    }
}

/// One GPS sample: longitude, latitude (degrees) and a timestamp (seconds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub t: i64,
}

impl Point {
    pub fn new(x: f64, y: f64, t: i64) -> Self {
        Point { x, y, t }
    }
}

/// A time-ordered sequence of points. Well-formed trajectories have at least
/// two points and strictly increasing timestamps; [`validate_database`]
/// reports violations instead of constructors rejecting them, because
/// simplified trajectories may legitimately shrink below two points.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: TrajId,
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(id: impl Into<TrajId>, points: Vec<Point>) -> Self {
        Trajectory {
            id: id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self) -> Option<i64> {
        self.points.first().map(|p| p.t)
    }

    pub fn end_time(&self) -> Option<i64> {
        self.points.last().map(|p| p.t)
    }

    /// True when `t` lies within the closed time span of the trajectory.
    pub fn covers_time(&self, t: i64) -> bool {
        match (self.start_time(), self.end_time()) {
            (Some(a), Some(b)) => a <= t && t <= b,
            _ => false,
        }
    }
}

/// Axis-aligned bounds of a database over x, y and t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
    pub min_t: i64,
    pub max_t: i64,
}

/// An ordered collection of trajectories with unique ids.
#[derive(Clone, Debug)]
pub struct TrajectoryDatabase {
    trajectories: Vec<Trajectory>,
    index: HashMap<TrajId, usize>,
}

impl TrajectoryDatabase {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut index = HashMap::with_capacity(trajectories.len());
        for (i, traj) in trajectories.iter().enumerate() {
            if index.insert(traj.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate trajectory id {}",
                    traj.id
                )));
            }
        }
        Ok(TrajectoryDatabase {
            trajectories,
            index,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: &TrajId) -> Option<&Trajectory> {
        self.index.get(id).map(|&i| &self.trajectories[i])
    }

    pub fn total_points(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Mean latitude over all points; 0 for an empty database.
    pub fn mean_latitude(&self) -> f64 {
        let n = self.total_points();
        if n == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .trajectories
            .iter()
            .flat_map(|t| &t.points)
            .map(|p| p.y)
            .sum();
        sum / n as f64
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut points = self.trajectories.iter().flat_map(|t| &t.points);
        let first = *points.next()?;
        let mut bb = BoundingBox {
            min_x: first.x,
            max_x: first.x,
            min_y: first.y,
            max_y: first.y,
            min_t: first.t,
            max_t: first.t,
        };
        for p in points {
            bb.min_x = bb.min_x.min(p.x);
            bb.max_x = bb.max_x.max(p.x);
            bb.min_y = bb.min_y.min(p.y);
            bb.max_y = bb.max_y.max(p.y);
            bb.min_t = bb.min_t.min(p.t);
            bb.max_t = bb.max_t.max(p.t);
        }
        Some(bb)
    }
}

/// A violation found by [`validate_database`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonIncreasingTime { id: TrajId, index: usize },
    TooShort { id: TrajId, len: usize },
    NonFiniteCoordinate { id: TrajId, index: usize },
    CoordinateOutOfRange { id: TrajId, index: usize },
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every point and trajectory invariant and reports all violations.
/// Purely informational: nothing is rejected or repaired.
pub fn validate_database(db: &TrajectoryDatabase) -> ValidationReport {
    let mut report = ValidationReport::default();
    for traj in db.trajectories() {
        if traj.len() < 2 {
            report.violations.push(Violation::TooShort {
                id: traj.id.clone(),
                len: traj.len(),
            });
        }
        for (i, p) in traj.points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                report.violations.push(Violation::NonFiniteCoordinate {
                    id: traj.id.clone(),
                    index: i,
                });
            } else if p.x.abs() > 180.0 || p.y.abs() > 90.0 {
                report.violations.push(Violation::CoordinateOutOfRange {
                    id: traj.id.clone(),
                    index: i,
                });
            }
            if i > 0 && traj.points[i - 1].t >= p.t {
                report.violations.push(Violation::NonIncreasingTime {
                    id: traj.id.clone(),
                    index: i,
                });
            }
        }
    }
    report
}

/// The global retention budget: `round(cr * total_points)` rounded half up,
/// never below one point. `cr` must lie in (0, 1].
pub fn compute_budget(total_points: usize, cr: f64) -> Result<usize> {
    if !(cr > 0.0 && cr <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "compression rate must be in (0, 1], got {cr}"
        )));
    }
    if total_points == 0 {
        return Err(Error::EmptyInput(
            "cannot budget an empty database".to_string(),
        ));
    }
    let budget = (cr * total_points as f64).round() as usize;
    Ok(budget.max(1))
}

/// A simplified view of a database: per trajectory, the retained original
/// indices (strictly increasing) and the corresponding points. Trajectories
/// may keep fewer than two points, or none, under a global budget.
#[derive(Clone, Debug)]
pub struct SimplifiedDatabase {
    database: TrajectoryDatabase,
    kept: BTreeMap<TrajId, Vec<usize>>,
    compression_rate: f64,
}

impl SimplifiedDatabase {
    /// Builds the simplified database from retained indices. `kept` must
    /// contain one entry per original trajectory (possibly empty), with
    /// strictly increasing in-range indices.
    pub fn new(
        original: &TrajectoryDatabase,
        kept: BTreeMap<TrajId, Vec<usize>>,
        compression_rate: f64,
    ) -> Result<Self> {
        if kept.len() != original.len() {
            return Err(Error::Contract(format!(
                "kept map covers {} of {} trajectories",
                kept.len(),
                original.len()
            )));
        }
        let mut trajectories = Vec::with_capacity(original.len());
        for traj in original.trajectories() {
            let indices = kept.get(&traj.id).ok_or_else(|| {
                Error::Contract(format!("kept map is missing trajectory {}", traj.id))
            })?;
            let mut points = Vec::with_capacity(indices.len());
            let mut prev: Option<usize> = None;
            for &ix in indices {
                if ix >= traj.len() {
                    return Err(Error::Contract(format!(
                        "index {ix} out of range for trajectory {} of length {}",
                        traj.id,
                        traj.len()
                    )));
                }
                if let Some(p) = prev {
                    if ix <= p {
                        return Err(Error::Contract(format!(
                            "kept indices for {} are not strictly increasing",
                            traj.id
                        )));
                    }
                }
                prev = Some(ix);
                points.push(traj.points[ix]);
            }
            trajectories.push(Trajectory::new(traj.id.clone(), points));
        }
        Ok(SimplifiedDatabase {
            database: TrajectoryDatabase::new(trajectories)?,
            kept,
            compression_rate,
        })
    }

    /// Reconstructs the retained-index mapping by matching timestamps, for
    /// simplified databases that were round-tripped through files. Fails if
    /// any simplified trajectory is not a point-for-point subsequence of its
    /// original.
    pub fn from_databases(
        original: &TrajectoryDatabase,
        simplified: &TrajectoryDatabase,
        compression_rate: f64,
    ) -> Result<Self> {
        let mut kept = BTreeMap::new();
        for orig in original.trajectories() {
            let indices = match simplified.get(&orig.id) {
                None => Vec::new(),
                Some(simp) => {
                    let mut indices = Vec::with_capacity(simp.len());
                    let mut cursor = 0usize;
                    for sp in &simp.points {
                        let found = orig.points[cursor..]
                            .iter()
                            .position(|op| op.t == sp.t && op.x == sp.x && op.y == sp.y);
                        match found {
                            Some(offset) => {
                                indices.push(cursor + offset);
                                cursor += offset + 1;
                            }
                            None => {
                                return Err(Error::Contract(format!(
                                    "trajectory {} is not a subsequence of its original",
                                    orig.id
                                )))
                            }
                        }
                    }
                    indices
                }
            };
            kept.insert(orig.id.clone(), indices);
        }
        for traj in simplified.trajectories() {
            if original.get(&traj.id).is_none() {
                return Err(Error::Contract(format!(
                    "simplified database has unknown trajectory {}",
                    traj.id
                )));
            }
        }
        SimplifiedDatabase::new(original, kept, compression_rate)
    }

    pub fn database(&self) -> &TrajectoryDatabase {
        &self.database
    }

    pub fn kept_indices(&self, id: &TrajId) -> Option<&[usize]> {
        self.kept.get(id).map(|v| v.as_slice())
    }

    pub fn compression_rate(&self) -> f64 {
        self.compression_rate
    }

    pub fn total_points(&self) -> usize {
        self.database.total_points()
    }
}

/// Importance scores for one point: the raw model output, the database-level
/// min-max normalisation of it, and the query-adjusted blend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImportanceScore {
    pub raw: f64,
    pub normalized: f64,
    pub adjusted: f64,
}

/// One importance score per database point, keyed by trajectory id and
/// aligned with point indices.
#[derive(Clone, Debug, Default)]
pub struct ImportanceVector {
    entries: BTreeMap<TrajId, Vec<ImportanceScore>>,
}

impl ImportanceVector {
    pub fn from_raw(raw: BTreeMap<TrajId, Vec<f64>>) -> Self {
        let entries = raw
            .into_iter()
            .map(|(id, scores)| {
                let scores = scores
                    .into_iter()
                    .map(|raw| ImportanceScore {
                        raw,
                        normalized: raw,
                        adjusted: raw,
                    })
                    .collect();
                (id, scores)
            })
            .collect();
        ImportanceVector { entries }
    }

    /// Checks the exactly-one-score-per-point alignment against a database.
    pub fn assert_matches(&self, db: &TrajectoryDatabase) -> Result<()> {
        if self.entries.len() != db.len() {
            return Err(Error::Contract(format!(
                "importance covers {} of {} trajectories",
                self.entries.len(),
                db.len()
            )));
        }
        for traj in db.trajectories() {
            match self.entries.get(&traj.id) {
                Some(scores) if scores.len() == traj.len() => {}
                Some(scores) => {
                    return Err(Error::Contract(format!(
                        "importance for {} has {} scores for {} points",
                        traj.id,
                        scores.len(),
                        traj.len()
                    )))
                }
                None => {
                    return Err(Error::Contract(format!(
                        "importance is missing trajectory {}",
                        traj.id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &TrajId) -> Option<&[ImportanceScore]> {
        self.entries.get(id).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, id: &TrajId) -> Option<&mut Vec<ImportanceScore>> {
        self.entries.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TrajId, &[ImportanceScore])> {
        self.entries.iter().map(|(id, v)| (id, v.as_slice()))
    }

    pub fn num_points(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Database-level min-max normalisation of the raw scores into the open
    /// interval `(eps, 1 - eps)`; if all raw scores are equal every point
    /// maps to the midpoint 0.5. `adjusted` is reset to the normalised value.
    pub fn normalize(&mut self, eps: f64) {
        assert!(eps > 0.0 && eps < 0.5, "eps must be in (0, 0.5)");
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for scores in self.entries.values() {
            for s in scores {
                min = min.min(s.raw);
                max = max.max(s.raw);
            }
        }
        let span = max - min;
        for scores in self.entries.values_mut() {
            for s in scores.iter_mut() {
                let unit = if span > 0.0 { (s.raw - min) / span } else { 0.5 };
                s.normalized = eps + (1.0 - 2.0 * eps) * unit;
                s.adjusted = s.normalized;
            }
        }
    }
}
