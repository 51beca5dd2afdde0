//! Distance measures and simplification error.
//!
//! A simplified trajectory partitions its original into anchor segments:
//! consecutive retained points span one segment each, original index `i` is
//! covered by the segment with `start <= i < end`, and the final original
//! index belongs to the final segment. Per-point deviations against the
//! anchor segment come in three kinds:
//!
//! - PED: perpendicular (point-to-segment) distance in metres;
//! - SED: distance to the position interpolated on the segment at the
//!   point's timestamp;
//! - DAD: absolute angular difference (radians, in [0, pi]) between the
//!   point's heading to its successor and the segment's heading.
//!
//! The simplification error of one trajectory is the maximum per-point
//! deviation over all covered points. EDR (edit distance on real sequences)
//! with a per-axis metre threshold rounds out the module.

use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::traj::{Point, Trajectory};

/// Which per-point deviation to measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    Ped,
    Sed,
    Dad,
}

impl std::fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorKind::Ped => "ped",
            ErrorKind::Sed => "sed",
            ErrorKind::Dad => "dad",
        };
        f.write_str(s)
    }
}

/// One anchor segment: the retained endpoints and their original indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorSegment {
    pub start: Point,
    pub end: Point,
    pub start_index: usize,
    pub end_index: usize,
}

/// Builds the anchor segments of a simplification given the retained
/// original indices. Requires at least two retained points including both
/// endpoints of the original (index 0 and index n-1), strictly increasing.
pub fn anchor_segments(original: &Trajectory, kept: &[usize]) -> Result<Vec<AnchorSegment>> {
    let n = original.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "trajectory {} has {} points; need at least 2",
            original.id, n
        )));
    }
    if kept.len() < 2 {
        return Err(Error::Contract(
            "need at least two retained points".to_string(),
        ));
    }
    if kept[0] != 0 || *kept.last().unwrap() != n - 1 {
        return Err(Error::Contract(format!(
            "retained indices must include both endpoints 0 and {}",
            n - 1
        )));
    }
    for w in kept.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Contract(
                "retained indices must be strictly increasing".to_string(),
            ));
        }
    }
    if *kept.last().unwrap() >= n {
        return Err(Error::Contract("retained index out of range".to_string()));
    }
    Ok(kept
        .windows(2)
        .map(|w| AnchorSegment {
            start: original.points[w[0]],
            end: original.points[w[1]],
            start_index: w[0],
            end_index: w[1],
        })
        .collect())
}

/// Index of the segment covering original index `i`: the segment with
/// `start_index <= i < end_index`; the final original index maps to the
/// final segment.
pub fn anchor_index(segments: &[AnchorSegment], i: usize) -> usize {
    debug_assert!(!segments.is_empty());
    let last = segments.len() - 1;
    if i >= segments[last].end_index {
        return last;
    }
    // Binary search over start indices.
    let mut lo = 0usize;
    let mut hi = last;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if segments[mid].start_index <= i {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Perpendicular distance (metres) from a point to a segment, clamped to the
/// segment; for a zero-length segment this is the distance to its endpoint.
pub fn ped(p: &Point, seg: &AnchorSegment, proj: &Projection) -> f64 {
    let pp = proj.project(p);
    let pa = proj.project(&seg.start);
    let pb = proj.project(&seg.end);
    let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
    let len_sq = dx * dx + dy * dy;
    if len_sq == 0.0 {
        return (pp[0] - pa[0]).hypot(pp[1] - pa[1]);
    }
    let u = (((pp[0] - pa[0]) * dx + (pp[1] - pa[1]) * dy) / len_sq).clamp(0.0, 1.0);
    let cx = pa[0] + u * dx;
    let cy = pa[1] + u * dy;
    (pp[0] - cx).hypot(pp[1] - cy)
}

/// Synchronised distance (metres): the point is compared against the
/// segment position linearly interpolated at the point's timestamp. The
/// timestamp must lie within the segment's closed time interval, and the
/// segment endpoints must not share a timestamp.
pub fn sed(p: &Point, seg: &AnchorSegment, proj: &Projection) -> Result<f64> {
    let (t0, t1) = (seg.start.t, seg.end.t);
    if t0 == t1 {
        return Err(Error::Degenerate(format!(
            "segment endpoints share timestamp {t0}"
        )));
    }
    if p.t < t0.min(t1) || p.t > t0.max(t1) {
        return Err(Error::Contract(format!(
            "timestamp {} outside segment interval [{t0}, {t1}]",
            p.t
        )));
    }
    let u = (p.t - t0) as f64 / (t1 - t0) as f64;
    let ix = seg.start.x + u * (seg.end.x - seg.start.x);
    let iy = seg.start.y + u * (seg.end.y - seg.start.y);
    Ok(proj.distance_m(p, &Point::new(ix, iy, p.t)))
}

fn heading(from: [f64; 2], to: [f64; 2]) -> Result<f64> {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::Degenerate(
            "zero-length heading vector".to_string(),
        ));
    }
    Ok(dy.atan2(dx))
}

/// Direction-aware deviation (radians in [0, pi]): angular difference
/// between the heading from `original[index]` to its successor and the
/// anchor segment's heading. The point must have a successor, and neither
/// heading vector may be zero length after projection.
pub fn dad(
    original: &Trajectory,
    index: usize,
    seg: &AnchorSegment,
    proj: &Projection,
) -> Result<f64> {
    if index + 1 >= original.len() {
        return Err(Error::Contract(format!(
            "point {index} has no successor in a trajectory of length {}",
            original.len()
        )));
    }
    let h_point = heading(
        proj.project(&original.points[index]),
        proj.project(&original.points[index + 1]),
    )?;
    let h_seg = heading(proj.project(&seg.start), proj.project(&seg.end))?;
    let mut diff = (h_point - h_seg).rem_euclid(2.0 * std::f64::consts::PI);
    if diff > std::f64::consts::PI {
        diff = 2.0 * std::f64::consts::PI - diff;
    }
    Ok(diff)
}

/// Maximum per-point deviation of a simplification, taken over every
/// original point and its anchor segment. For DAD the final point has no
/// successor and is skipped. Kind-specific degeneracies propagate as
/// errors.
pub fn simplification_error(
    original: &Trajectory,
    kept: &[usize],
    kind: ErrorKind,
    proj: &Projection,
) -> Result<f64> {
    let segments = anchor_segments(original, kept)?;
    let mut worst: f64 = 0.0;
    for (i, p) in original.points.iter().enumerate() {
        if kind == ErrorKind::Dad && i + 1 == original.len() {
            continue;
        }
        let seg = &segments[anchor_index(&segments, i)];
        let err = match kind {
            ErrorKind::Ped => ped(p, seg, proj),
            ErrorKind::Sed => sed(p, seg, proj)?,
            ErrorKind::Dad => dad(original, i, seg, proj)?,
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Edit distance on real sequences: two points match when both coordinate
/// deltas (metres, per axis) are within the threshold; mismatches,
/// insertions and deletions each cost one operation. An empty sequence
/// against a sequence of length n costs n.
pub fn edr(a: &[Point], b: &[Point], threshold_m: f64, proj: &Projection) -> usize {
    let pa: Vec<[f64; 2]> = a.iter().map(|p| proj.project(p)).collect();
    let pb: Vec<[f64; 2]> = b.iter().map(|p| proj.project(p)).collect();
    let (n, m) = (pa.len(), pb.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let matched = (pa[i - 1][0] - pb[j - 1][0]).abs() <= threshold_m
                && (pa[i - 1][1] - pb[j - 1][1]).abs() <= threshold_m;
            let sub = prev[j - 1] + if matched { 0 } else { 1 };
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}
