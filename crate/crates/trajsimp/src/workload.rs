//! Query workload generation and F1 quality metrics.
//!
//! A workload is a reproducible list of concrete queries drawn from a
//! database under one of two distributions: `data` picks query centers
//! uniformly from the database's own points, `gaussian` draws them from a
//! normal distribution over the normalized bounding cube. Simplification
//! quality is the F1 agreement between query results on the simplified and
//! the original database, averaged per query type.

use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::query::{
    build_index, cluster, knn_query, range_query, similarity_query, KnnQuery, QueryResult,
    RangeQuery, SimilarityQuery,
};
use crate::traj::{TrajId, TrajectoryDatabase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// The four query families a workload can exercise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Range,
    Knn,
    Similarity,
    Clustering,
}

impl std::fmt::Display for QueryType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QueryType::Range => "range",
            QueryType::Knn => "knn",
            QueryType::Similarity => "similarity",
            QueryType::Clustering => "clustering",
        };
        f.write_str(s)
    }
}

/// Where query centers come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialDistribution {
    /// Centers drawn uniformly from database points.
    Data,
    /// Centers drawn per axis from N(mu, sigma^2) over the normalized
    /// bounding cube of the database, clipped to [0, 1].
    Gaussian { mu: f64, sigma: f64 },
}

/// Parameters generating one workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub query_type: QueryType,
    pub count: usize,
    pub distribution: SpatialDistribution,
    /// Side length of the square spatial query window, metres.
    pub spatial_window_m: f64,
    /// Length of the temporal query window, seconds.
    pub temporal_window_s: i64,
    /// Result size for kNN queries.
    pub k: usize,
    /// Distance bound for similarity queries, metres.
    pub delta_m: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    /// The evaluation defaults: 100 queries, data distribution, 2 km x 2 km
    /// spatial window, 1 h temporal window, k = 3, delta = 5 km.
    pub fn new(query_type: QueryType, seed: u64) -> Self {
        WorkloadSpec {
            query_type,
            count: 100,
            distribution: SpatialDistribution::Data,
            spatial_window_m: 2_000.0,
            temporal_window_s: 3_600,
            k: 3,
            delta_m: 5_000.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("count must be at least 1".to_string()));
        }
        if let SpatialDistribution::Gaussian { sigma, .. } = self.distribution {
            if !(sigma > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gaussian sigma must be positive, got {sigma}"
                )));
            }
        }
        if !(self.spatial_window_m > 0.0) || self.temporal_window_s <= 0 {
            return Err(Error::InvalidArgument(
                "query windows must have positive extent".to_string(),
            ));
        }
        if self.k == 0 || !(self.delta_m > 0.0) {
            return Err(Error::InvalidArgument(
                "k and delta must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// One generated query.
#[derive(Clone, Debug, PartialEq)]
pub enum ConcreteQuery {
    Range(RangeQuery),
    Knn(KnnQuery),
    Similarity(SimilarityQuery),
    /// Clustering has no per-query parameters; thresholds live in
    /// [`EvalSettings`]. It is deterministic per database, so a workload
    /// carries it once.
    Clustering,
}

/// A concrete query list plus the spec that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryWorkload {
    pub spec: WorkloadSpec,
    pub queries: Vec<ConcreteQuery>,
}

/// A query center in space-time.
#[derive(Clone, Copy, Debug)]
struct Center {
    x: f64,
    y: f64,
    t: i64,
}

fn draw_center(
    db: &TrajectoryDatabase,
    dist: &SpatialDistribution,
    rng: &mut ChaCha8Rng,
) -> Center {
    match dist {
        SpatialDistribution::Data => {
            let total = db.total_points();
            let mut target = rng.gen_range(0..total);
            for traj in db.trajectories() {
                if target < traj.len() {
                    let p = traj.points[target];
                    return Center { x: p.x, y: p.y, t: p.t };
                }
                target -= traj.len();
            }
            unreachable!("target index within total points");
        }
        SpatialDistribution::Gaussian { mu, sigma } => {
            let bb = db.bounding_box().expect("non-empty database");
            let normal = Normal::new(*mu, *sigma).expect("validated sigma");
            let mut unit = || normal.sample(rng).clamp(0.0, 1.0);
            let (ux, uy, ut) = (unit(), unit(), unit());
            Center {
                x: bb.min_x + ux * (bb.max_x - bb.min_x),
                y: bb.min_y + uy * (bb.max_y - bb.min_y),
                t: bb.min_t + (ut * (bb.max_t - bb.min_t) as f64).round() as i64,
            }
        }
    }
}

/// Clamps a window of the configured length around `center` into the query
/// trajectory's time span; when the span is shorter than the window, the
/// window shrinks to the span. Guarantees the trajectory covers the window.
fn clamp_window(span: (i64, i64), center: i64, window_s: i64) -> (i64, i64) {
    let (lo, hi) = span;
    let w = window_s.min(hi - lo);
    let start = (center - w / 2).clamp(lo, hi - w);
    (start, start + w)
}

/// Generates the workload described by `spec` against `db`. The result is a
/// pure function of `(db, spec)` including the seed.
pub fn generate_workload(db: &TrajectoryDatabase, spec: &WorkloadSpec) -> Result<QueryWorkload> {
    spec.validate()?;
    if db.is_empty() || db.total_points() == 0 {
        return Err(Error::EmptyInput(
            "cannot generate a workload for an empty database".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proj = Projection::for_database(db);
    let half_dx = 0.5 * spec.spatial_window_m * proj.deg_per_meter_x();
    let half_dy = 0.5 * spec.spatial_window_m * proj.deg_per_meter_y();
    let mut queries = Vec::with_capacity(spec.count);
    match spec.query_type {
        QueryType::Range => {
            for _ in 0..spec.count {
                let c = draw_center(db, &spec.distribution, &mut rng);
                let t_lo = c.t - spec.temporal_window_s / 2;
                queries.push(ConcreteQuery::Range(RangeQuery {
                    x_min: c.x - half_dx,
                    x_max: c.x + half_dx,
                    y_min: c.y - half_dy,
                    y_max: c.y + half_dy,
                    t_min: t_lo,
                    t_max: t_lo + spec.temporal_window_s,
                }));
            }
        }
        QueryType::Knn | QueryType::Similarity => {
            for _ in 0..spec.count {
                let qi = rng.gen_range(0..db.len());
                let query = db.trajectories()[qi].clone();
                let span = (
                    query.start_time().expect("non-empty trajectory"),
                    query.end_time().expect("non-empty trajectory"),
                );
                let c = draw_center(db, &spec.distribution, &mut rng);
                let (t_start, t_end) = clamp_window(span, c.t, spec.temporal_window_s);
                queries.push(match spec.query_type {
                    QueryType::Knn => ConcreteQuery::Knn(KnnQuery {
                        k: spec.k,
                        query,
                        t_start,
                        t_end,
                    }),
                    _ => ConcreteQuery::Similarity(SimilarityQuery {
                        query,
                        t_start,
                        t_end,
                        delta_m: spec.delta_m,
                    }),
                });
            }
        }
        QueryType::Clustering => {
            // Clustering is parameter-free per query and deterministic per
            // database; one entry stands for the whole workload.
            queries.push(ConcreteQuery::Clustering);
        }
    }
    Ok(QueryWorkload {
        spec: spec.clone(),
        queries,
    })
}

/// F1 agreement between two query result sets. Both empty counts as perfect
/// agreement; an empty intersection as total disagreement.
pub fn f1_query(rs: &QueryResult, ro: &QueryResult) -> f64 {
    let inter = rs.ids.intersection(&ro.ids).count() as f64;
    if rs.is_empty() && ro.is_empty() {
        return 1.0;
    }
    if inter == 0.0 {
        return 0.0;
    }
    let p = inter / rs.len() as f64;
    let r = inter / ro.len() as f64;
    2.0 * p * r / (p + r)
}

fn co_membership_pairs(partition: &[Vec<TrajId>]) -> Result<BTreeSet<(TrajId, TrajId)>> {
    let mut pairs = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for group in partition {
        for id in group {
            if !seen.insert(id.clone()) {
                return Err(Error::Contract(format!(
                    "{id} appears in more than one cluster"
                )));
            }
        }
        for i in 0..group.len() {
            for j in (i + 1)..group.len() {
                let (a, b) = (group[i].clone(), group[j].clone());
                let pair = if a <= b { (a, b) } else { (b, a) };
                pairs.insert(pair);
            }
        }
    }
    Ok(pairs)
}

fn universe(partition: &[Vec<TrajId>]) -> BTreeSet<TrajId> {
    partition.iter().flatten().cloned().collect()
}

/// F1 agreement between two partitions of the same trajectory ids, computed
/// over unordered same-cluster pairs. Two all-singleton partitions agree
/// perfectly (both pair sets empty).
pub fn f1_clustering(cs: &[Vec<TrajId>], co: &[Vec<TrajId>]) -> Result<f64> {
    if universe(cs) != universe(co) {
        return Err(Error::Contract(
            "partitions cover different trajectory sets".to_string(),
        ));
    }
    let ps = co_membership_pairs(cs)?;
    let po = co_membership_pairs(co)?;
    if ps.is_empty() && po.is_empty() {
        return Ok(1.0);
    }
    let inter = ps.intersection(&po).count() as f64;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let p = inter / ps.len() as f64;
    let r = inter / po.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Fixed thresholds used when executing workload queries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Per-axis EDR match threshold, metres.
    pub edr_threshold_m: f64,
    /// Similarity-query sampling tick, seconds.
    pub tick_s: i64,
    /// Maximum EDR linking two trajectories into one cluster.
    pub link_threshold: usize,
    /// Grid-index spatial cell, metres.
    pub spatial_cell_m: f64,
    /// Grid-index temporal cell, seconds.
    pub temporal_cell_s: i64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            edr_threshold_m: 2_000.0,
            tick_s: 60,
            link_threshold: 5,
            spatial_cell_m: 500.0,
            temporal_cell_s: 3_600,
        }
    }
}

/// Mean F1 of one workload evaluated on a simplified database against the
/// original.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub query_type: QueryType,
    pub mean_f1: f64,
    pub per_query: Vec<f64>,
}

/// Runs every workload query on both databases and reports the mean F1. For
/// clustering the databases are partitioned once and the partitions
/// compared.
pub fn evaluate_suite(
    original: &TrajectoryDatabase,
    simplified: &TrajectoryDatabase,
    workload: &QueryWorkload,
    settings: &EvalSettings,
) -> Result<SuiteReport> {
    let mut per_query = Vec::with_capacity(workload.queries.len());
    let index_orig = build_index(original, settings.spatial_cell_m, settings.temporal_cell_s)?;
    let index_simp = build_index(simplified, settings.spatial_cell_m, settings.temporal_cell_s)?;
    for query in &workload.queries {
        let f1 = match query {
            ConcreteQuery::Range(q) => {
                let ro = range_query(original, &index_orig, q)?;
                let rs = range_query(simplified, &index_simp, q)?;
                f1_query(&rs, &ro)
            }
            ConcreteQuery::Knn(q) => {
                let ro = knn_query(original, q, settings.edr_threshold_m)?;
                let rs = knn_query(simplified, q, settings.edr_threshold_m)?;
                f1_query(&rs, &ro)
            }
            ConcreteQuery::Similarity(q) => {
                let ro = similarity_query(original, q, settings.tick_s)?;
                let rs = similarity_query(simplified, q, settings.tick_s)?;
                f1_query(&rs, &ro)
            }
            ConcreteQuery::Clustering => {
                let co = cluster(original, settings.edr_threshold_m, settings.link_threshold)?;
                let cs = cluster(simplified, settings.edr_threshold_m, settings.link_threshold)?;
                f1_clustering(&cs, &co)?
            }
        };
        per_query.push(f1);
    }
    let mean_f1 = per_query.iter().sum::<f64>() / per_query.len() as f64;
    Ok(SuiteReport {
        query_type: workload.spec.query_type,
        mean_f1,
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{Point, Trajectory};

    fn ids(names: &[&str]) -> QueryResult {
        QueryResult::from_ids(names.iter().map(|n| TrajId::new(n)))
    }

    fn partition(groups: &[&[&str]]) -> Vec<Vec<TrajId>> {
        groups
            .iter()
            .map(|g| g.iter().map(|n| TrajId::new(n)).collect())
            .collect()
    }

    /// Dense synthetic database: every trajectory samples every 60 s, so
    /// any 1 h window inside the span contains points.
    fn synth_db(n: usize, seed: u64) -> TrajectoryDatabase {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..n)
            .map(|i| {
                let mut x = rng.gen_range(-0.05..0.05f64);
                let mut y = rng.gen_range(-0.05..0.05f64);
                let t0 = rng.gen_range(0..2_000i64);
                let points = (0..30)
                    .map(|j| {
                        x += rng.gen_range(-0.003..0.003);
                        y += rng.gen_range(-0.003..0.003);
                        Point::new(x, y, t0 + j * 60)
                    })
                    .collect();
                Trajectory::new(format!("t{i:02}"), points)
            })
            .collect();
        TrajectoryDatabase::new(trajs).unwrap()
    }

    #[test]
    fn f1_query_fixtures() {
        assert_eq!(f1_query(&ids(&["a", "b"]), &ids(&["a", "b"])), 1.0);
        assert_eq!(f1_query(&ids(&["a"]), &ids(&["b"])), 0.0);
        assert_eq!(f1_query(&ids(&[]), &ids(&[])), 1.0);
        assert_eq!(f1_query(&ids(&[]), &ids(&["a"])), 0.0);
        // |Rs| = 2, |Ro| = 4, overlap 2: P = 1, R = 1/2, F1 = 2/3.
        let rs = ids(&["a", "b"]);
        let ro = ids(&["a", "b", "c", "d"]);
        assert!((f1_query(&rs, &ro) - 2.0 / 3.0).abs() < 1e-12);
        // Symmetry.
        assert_eq!(f1_query(&rs, &ro), f1_query(&ro, &rs));
    }

    #[test]
    fn f1_clustering_fixtures() {
        let same = partition(&[&["a", "b"], &["c"]]);
        assert_eq!(f1_clustering(&same, &same).unwrap(), 1.0);
        let singles = partition(&[&["a"], &["b"], &["c"]]);
        assert_eq!(f1_clustering(&same, &singles).unwrap(), 0.0);
        assert_eq!(f1_clustering(&singles, &singles).unwrap(), 1.0);
        // {{a,b,c}} vs {{a,b},{c}}: pairs {ab,ac,bc} vs {ab}; P=1/3, R=1.
        let all = partition(&[&["a", "b", "c"]]);
        let split = partition(&[&["a", "b"], &["c"]]);
        assert!((f1_clustering(&all, &split).unwrap() - 0.5).abs() < 1e-12);
        // Mismatched universes and duplicated members are contract errors.
        let other = partition(&[&["a"], &["x"], &["c"]]);
        assert!(f1_clustering(&same, &other).is_err());
        let dup = partition(&[&["a", "b"], &["b", "c"]]);
        assert!(f1_clustering(&dup, &same).is_err());
    }

    #[test]
    fn workloads_are_reproducible() {
        let db = synth_db(10, 3);
        for qt in [QueryType::Range, QueryType::Knn, QueryType::Similarity] {
            let spec = WorkloadSpec {
                count: 20,
                ..WorkloadSpec::new(qt, 99)
            };
            let a = generate_workload(&db, &spec).unwrap();
            let b = generate_workload(&db, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.queries.len(), 20);
        }
        let spec = WorkloadSpec::new(QueryType::Clustering, 1);
        assert_eq!(generate_workload(&db, &spec).unwrap().queries.len(), 1);
    }

    #[test]
    fn data_distribution_centers_boxes_on_database_points() {
        let db = synth_db(5, 7);
        let proj = Projection::for_database(&db);
        let spec = WorkloadSpec {
            count: 30,
            ..WorkloadSpec::new(QueryType::Range, 5)
        };
        let wl = generate_workload(&db, &spec).unwrap();
        let points: Vec<Point> = db
            .trajectories()
            .iter()
            .flat_map(|t| t.points.iter().copied())
            .collect();
        for q in &wl.queries {
            let ConcreteQuery::Range(r) = q else { panic!("range workload") };
            // Box side matches the configured window.
            let width_m = (r.x_max - r.x_min) / proj.deg_per_meter_x();
            let height_m = (r.y_max - r.y_min) / proj.deg_per_meter_y();
            assert!((width_m - 2_000.0).abs() < 1e-6);
            assert!((height_m - 2_000.0).abs() < 1e-6);
            assert_eq!(r.t_max - r.t_min, 3_600);
            // Center coincides with some database point.
            let cx = 0.5 * (r.x_min + r.x_max);
            let cy = 0.5 * (r.y_min + r.y_max);
            assert!(
                points
                    .iter()
                    .any(|p| (p.x - cx).abs() < 1e-9 && (p.y - cy).abs() < 1e-9),
                "box center ({cx}, {cy}) is not a database point"
            );
        }
    }

    #[test]
    fn tiny_sigma_collapses_gaussian_centers_to_the_midpoint() {
        let db = synth_db(5, 11);
        let bb = db.bounding_box().unwrap();
        let spec = WorkloadSpec {
            count: 10,
            distribution: SpatialDistribution::Gaussian {
                mu: 0.5,
                sigma: 1e-12,
            },
            ..WorkloadSpec::new(QueryType::Range, 2)
        };
        let wl = generate_workload(&db, &spec).unwrap();
        let mid_x = bb.min_x + 0.5 * (bb.max_x - bb.min_x);
        let mid_y = bb.min_y + 0.5 * (bb.max_y - bb.min_y);
        for q in &wl.queries {
            let ConcreteQuery::Range(r) = q else { panic!("range workload") };
            assert!((0.5 * (r.x_min + r.x_max) - mid_x).abs() < 1e-9);
            assert!((0.5 * (r.y_min + r.y_max) - mid_y).abs() < 1e-9);
        }
    }

    #[test]
    fn knn_and_similarity_windows_fit_the_query_trajectory() {
        let db = synth_db(8, 13);
        for qt in [QueryType::Knn, QueryType::Similarity] {
            let spec = WorkloadSpec {
                count: 40,
                ..WorkloadSpec::new(qt, 17)
            };
            let wl = generate_workload(&db, &spec).unwrap();
            for q in &wl.queries {
                let (query, t_start, t_end) = match q {
                    ConcreteQuery::Knn(k) => (&k.query, k.t_start, k.t_end),
                    ConcreteQuery::Similarity(s) => (&s.query, s.t_start, s.t_end),
                    _ => panic!("unexpected query"),
                };
                assert!(query.covers_time(t_start) && query.covers_time(t_end));
                let span = query.end_time().unwrap() - query.start_time().unwrap();
                assert_eq!(t_end - t_start, span.min(3_600));
            }
        }
    }

    #[test]
    fn identity_simplification_scores_one_everywhere() {
        let db = synth_db(12, 19);
        let settings = EvalSettings::default();
        for qt in [
            QueryType::Range,
            QueryType::Knn,
            QueryType::Similarity,
            QueryType::Clustering,
        ] {
            let spec = WorkloadSpec {
                count: 15,
                ..WorkloadSpec::new(qt, 23)
            };
            let wl = generate_workload(&db, &spec).unwrap();
            let report = evaluate_suite(&db, &db, &wl, &settings).unwrap();
            assert_eq!(report.mean_f1, 1.0, "{qt}");
        }
    }

    #[test]
    fn empty_simplification_scores_zero() {
        // Four mutually distant trajectories: the original partition is all
        // singletons, so clustering agreement with the all-linked empty
        // database is zero, and every range query result is non-empty at
        // the original (data distribution centers boxes on points).
        let trajs: Vec<Trajectory> = (0..4)
            .map(|i| {
                let base = i as f64 * 1.0;
                let points = (0..20)
                    .map(|j| Point::new(base + j as f64 * 1e-4, base, j * 60))
                    .collect();
                Trajectory::new(format!("t{i}"), points)
            })
            .collect();
        let db = TrajectoryDatabase::new(trajs).unwrap();
        let empty = TrajectoryDatabase::new(
            db.trajectories()
                .iter()
                .map(|t| Trajectory::new(t.id.clone(), Vec::new()))
                .collect(),
        )
        .unwrap();
        let settings = EvalSettings::default();
        for qt in [
            QueryType::Range,
            QueryType::Knn,
            QueryType::Similarity,
            QueryType::Clustering,
        ] {
            let spec = WorkloadSpec {
                count: 10,
                ..WorkloadSpec::new(qt, 31)
            };
            let wl = generate_workload(&db, &spec).unwrap();
            let report = evaluate_suite(&db, &empty, &wl, &settings).unwrap();
            assert_eq!(report.mean_f1, 0.0, "{qt}");
        }
    }

    #[test]
    fn suite_means_match_independent_recomputation() {
        use crate::sampling::uniform_indices_without_replacement;
        use crate::traj::SimplifiedDatabase;
        use rand::SeedableRng;
        use std::collections::BTreeMap;

        let db = synth_db(20, 37);
        // Uniform 50% sample, reconstructed into per-trajectory index lists.
        let total = db.total_points();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chosen = uniform_indices_without_replacement(total, total / 2, &mut rng).unwrap();
        let mut kept: BTreeMap<TrajId, Vec<usize>> = db
            .trajectories()
            .iter()
            .map(|t| (t.id.clone(), Vec::new()))
            .collect();
        let mut offset = 0usize;
        for traj in db.trajectories() {
            for &c in &chosen {
                if c >= offset && c < offset + traj.len() {
                    kept.get_mut(&traj.id).unwrap().push(c - offset);
                }
            }
            offset += traj.len();
        }
        let simp = SimplifiedDatabase::new(&db, kept, 0.5).unwrap();

        let settings = EvalSettings::default();
        let spec = WorkloadSpec {
            count: 12,
            ..WorkloadSpec::new(QueryType::Range, 41)
        };
        let wl = generate_workload(&db, &spec).unwrap();
        let report = evaluate_suite(&db, simp.database(), &wl, &settings).unwrap();
        // Second path: run the same queries by hand and average.
        let io = build_index(&db, settings.spatial_cell_m, settings.temporal_cell_s).unwrap();
        let is = build_index(
            simp.database(),
            settings.spatial_cell_m,
            settings.temporal_cell_s,
        )
        .unwrap();
        let mut sum = 0.0;
        for q in &wl.queries {
            let ConcreteQuery::Range(r) = q else { panic!("range workload") };
            let ro = range_query(&db, &io, r).unwrap();
            let rs = range_query(simp.database(), &is, r).unwrap();
            sum += f1_query(&rs, &ro);
        }
        let mean = sum / wl.queries.len() as f64;
        assert!((report.mean_f1 - mean).abs() < 1e-15);
    }
}
