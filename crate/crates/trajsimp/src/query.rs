//! Spatio-temporal queries over a trajectory database.
//!
//! Four query families: range (which trajectories touch a space-time box),
//! k-nearest-neighbour under EDR, similarity (stay within a distance bound of
//! a query trajectory at every clock tick), and single-linkage clustering
//! over pairwise EDR. Range queries run against a uniform grid index; the
//! grid only prunes candidates, membership is always re-checked exactly, so
//! grid and linear scan return identical results.

use crate::dist::edr;
use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::traj::{Point, TrajId, Trajectory, TrajectoryDatabase};
use std::collections::{BTreeSet, HashMap};

/// Uniform space-time grid over a database. Spatial cells are square in
/// projected metres, temporal cells are fixed spans of seconds; each point
/// lands in exactly one cell, recomputable from its coordinates alone.
#[derive(Clone, Debug)]
pub struct GridIndex {
    projection: Projection,
    spatial_cell_m: f64,
    temporal_cell_s: i64,
    /// Cell coordinates to (trajectory position, point index) lists.
    cells: HashMap<(i64, i64, i64), Vec<(usize, usize)>>,
}

impl GridIndex {
    pub fn cell_of(&self, p: &Point) -> (i64, i64, i64) {
        let [x, y] = self.projection.project(p);
        (
            (x / self.spatial_cell_m).floor() as i64,
            (y / self.spatial_cell_m).floor() as i64,
            p.t.div_euclid(self.temporal_cell_s),
        )
    }

    pub fn num_occupied_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn entries(&self, cell: (i64, i64, i64)) -> &[(usize, usize)] {
        self.cells.get(&cell).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }
}

/// Builds the grid index for a database. An empty database yields an empty
/// index.
pub fn build_index(
    db: &TrajectoryDatabase,
    spatial_cell_m: f64,
    temporal_cell_s: i64,
) -> Result<GridIndex> {
    if !(spatial_cell_m > 0.0) || temporal_cell_s <= 0 {
        return Err(Error::InvalidArgument(format!(
            "cell sizes must be positive, got {spatial_cell_m} m / {temporal_cell_s} s"
        )));
    }
    let mut index = GridIndex {
        projection: Projection::for_database(db),
        spatial_cell_m,
        temporal_cell_s,
        cells: HashMap::new(),
    };
    for (ti, traj) in db.trajectories().iter().enumerate() {
        for (pi, p) in traj.points.iter().enumerate() {
            let cell = index.cell_of(p);
            index.cells.entry(cell).or_default().push((ti, pi));
        }
    }
    Ok(index)
}

/// A closed space-time box in database units (degrees and seconds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeQuery {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub t_min: i64,
    pub t_max: i64,
}

impl RangeQuery {
    pub fn contains(&self, p: &Point) -> bool {
        self.x_min <= p.x
            && p.x <= self.x_max
            && self.y_min <= p.y
            && p.y <= self.y_max
            && self.t_min <= p.t
            && p.t <= self.t_max
    }

    fn validate(&self) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max || self.t_min > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "degenerate query box {self:?}"
            )));
        }
        Ok(())
    }
}

/// The k trajectories most similar to a query trajectory within a time
/// window, under windowed EDR.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnQuery {
    pub k: usize,
    pub query: Trajectory,
    pub t_start: i64,
    pub t_end: i64,
}

/// Trajectories staying within `delta_m` of the query trajectory at every
/// tick of the window.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityQuery {
    pub query: Trajectory,
    pub t_start: i64,
    pub t_end: i64,
    pub delta_m: f64,
}

/// The ids a query returned. `short` is set only by kNN when fewer than `k`
/// candidate trajectories existed in the window.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryResult {
    pub ids: BTreeSet<TrajId>,
    pub short: bool,
}

impl QueryResult {
    pub fn from_ids(ids: impl IntoIterator<Item = TrajId>) -> Self {
        QueryResult {
            ids: ids.into_iter().collect(),
            short: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Trajectories with at least one point inside the closed box. The grid
/// index prunes candidate cells; each candidate point is re-checked against
/// the box exactly, so the result equals a full linear scan.
pub fn range_query(
    db: &TrajectoryDatabase,
    index: &GridIndex,
    q: &RangeQuery,
) -> Result<QueryResult> {
    q.validate()?;
    // The projection is monotone per axis, so the box's cell range in metres
    // covers every cell that can hold an in-box point.
    let corner_min = index.cell_of(&Point::new(q.x_min, q.y_min, q.t_min));
    let corner_max = index.cell_of(&Point::new(q.x_max, q.y_max, q.t_max));
    let (cx0, cx1) = (corner_min.0.min(corner_max.0), corner_min.0.max(corner_max.0));
    let (cy0, cy1) = (corner_min.1.min(corner_max.1), corner_min.1.max(corner_max.1));
    let (ct0, ct1) = (corner_min.2, corner_max.2);
    let mut ids = BTreeSet::new();
    let trajs = db.trajectories();
    for cx in cx0..=cx1 {
        for cy in cy0..=cy1 {
            for ct in ct0..=ct1 {
                for &(ti, pi) in index.entries((cx, cy, ct)) {
                    let traj = &trajs[ti];
                    if q.contains(&traj.points[pi]) {
                        ids.insert(traj.id.clone());
                    }
                }
            }
        }
    }
    Ok(QueryResult { ids, short: false })
}

fn restrict_to_window(traj: &Trajectory, t_start: i64, t_end: i64) -> Vec<Point> {
    traj.points
        .iter()
        .filter(|p| t_start <= p.t && p.t <= t_end)
        .copied()
        .collect()
}

/// The `k` trajectories minimising EDR against the query, both restricted to
/// the window; ties break toward the ascending trajectory id. When fewer
/// than `k` trajectories have any point in the window, all of them are
/// returned and the result is flagged short.
pub fn knn_query(db: &TrajectoryDatabase, q: &KnnQuery, edr_threshold_m: f64) -> Result<QueryResult> {
    if q.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".to_string()));
    }
    if q.t_start > q.t_end {
        return Err(Error::InvalidArgument(format!(
            "empty time window [{}, {}]",
            q.t_start, q.t_end
        )));
    }
    let proj = Projection::for_database(db);
    let query_window = restrict_to_window(&q.query, q.t_start, q.t_end);
    let mut scored: Vec<(usize, TrajId)> = Vec::new();
    for traj in db.trajectories() {
        let window = restrict_to_window(traj, q.t_start, q.t_end);
        if window.is_empty() {
            continue;
        }
        let d = edr(&query_window, &window, edr_threshold_m, &proj);
        scored.push((d, traj.id.clone()));
    }
    scored.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let short = scored.len() < q.k;
    let ids = scored
        .into_iter()
        .take(q.k)
        .map(|(_, id)| id)
        .collect();
    Ok(QueryResult { ids, short })
}

/// Position of a trajectory at time `t` by linear interpolation between the
/// neighbouring samples, in degrees; `None` outside the trajectory's span.
pub fn interpolate_position(traj: &Trajectory, t: i64) -> Option<[f64; 2]> {
    if !traj.covers_time(t) {
        return None;
    }
    let i = traj.points.partition_point(|p| p.t < t);
    if i < traj.len() && traj.points[i].t == t {
        let p = traj.points[i];
        return Some([p.x, p.y]);
    }
    let (a, b) = (traj.points[i - 1], traj.points[i]);
    let u = (t - a.t) as f64 / (b.t - a.t) as f64;
    Some([a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)])
}

/// Trajectories whose interpolated position stays within `delta_m` of the
/// query's at every tick `t_start + k * tick` not exceeding `t_end`.
/// Trajectories that do not cover the whole window are excluded. The query
/// trajectory itself must cover the window.
pub fn similarity_query(
    db: &TrajectoryDatabase,
    q: &SimilarityQuery,
    tick_s: i64,
) -> Result<QueryResult> {
    if tick_s <= 0 {
        return Err(Error::InvalidArgument(format!(
            "tick must be positive, got {tick_s}"
        )));
    }
    if !(q.delta_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distance bound must be positive, got {}",
            q.delta_m
        )));
    }
    if q.t_start > q.t_end {
        return Err(Error::InvalidArgument(format!(
            "empty time window [{}, {}]",
            q.t_start, q.t_end
        )));
    }
    if !(q.query.covers_time(q.t_start) && q.query.covers_time(q.t_end)) {
        return Err(Error::Contract(format!(
            "query trajectory does not span the window [{}, {}]",
            q.t_start, q.t_end
        )));
    }
    let proj = Projection::for_database(db);
    let ticks: Vec<i64> = {
        let mut ts = Vec::new();
        let mut t = q.t_start;
        while t <= q.t_end {
            ts.push(t);
            t += tick_s;
        }
        ts
    };
    let query_pos: Vec<[f64; 2]> = ticks
        .iter()
        .map(|&t| interpolate_position(&q.query, t).expect("query spans the window"))
        .collect();
    let mut ids = BTreeSet::new();
    'trajs: for traj in db.trajectories() {
        if !(traj.covers_time(q.t_start) && traj.covers_time(q.t_end)) {
            continue;
        }
        for (t, qp) in ticks.iter().zip(&query_pos) {
            let tp = interpolate_position(traj, *t).expect("span checked above");
            let a = Point::new(qp[0], qp[1], *t);
            let b = Point::new(tp[0], tp[1], *t);
            if proj.distance_m(&a, &b) > q.delta_m {
                continue 'trajs;
            }
        }
        ids.insert(traj.id.clone());
    }
    Ok(QueryResult { ids, short: false })
}

/// Single-linkage clustering: trajectories whose pairwise EDR does not
/// exceed `link_threshold` are linked, and connected components form the
/// clusters. Clusters and their members are ordered ascending by id, so the
/// partition is deterministic.
pub fn cluster(
    db: &TrajectoryDatabase,
    edr_threshold_m: f64,
    link_threshold: usize,
) -> Result<Vec<Vec<TrajId>>> {
    if !(edr_threshold_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "match threshold must be positive, got {edr_threshold_m}"
        )));
    }
    let proj = Projection::for_database(db);
    let trajs = db.trajectories();
    let n = trajs.len();
    // Union-find over trajectory positions.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = edr(&trajs[i].points, &trajs[j].points, edr_threshold_m, &proj);
            if d <= link_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<TrajId>> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(trajs[i].id.clone());
    }
    let mut partition: Vec<Vec<TrajId>> = groups.into_values().collect();
    for group in &mut partition {
        group.sort();
    }
    partition.sort_by(|a, b| a[0].cmp(&b[0]));
    Ok(partition)
}
