//! Point-importance model: a graph-attention stack over a point/window
//! graph, trained with two self-supervised terms plus an optional
//! label-matching term.
//!
//! Each trajectory becomes a bipartite graph: one node per point, one node
//! per window (the same windows the encoder uses), every point connected to
//! every window. Window features are the mean of their member points'
//! encoder embeddings. After graph attention, two per-point statistics are
//! computed over the refined embeddings `g`:
//!
//! * uniqueness: mean euclidean distance to the `k` most cosine-similar
//!   points of the same trajectory. High for points that stand apart from
//!   their closest peers.
//! * globality: `ln` of the mean of `exp(-2 d^2)` over all other points of
//!   the trajectory. Near zero when a point sits close to everything,
//!   strongly negative when it is far from everything.
//!
//! A point's raw importance is `uniqueness * globality + eps`; scores are
//! min-max normalized per database before use. The training loss is
//! `mean(uniqueness) + 0.5 * mean(globality)` per trajectory; when labels
//! are given, a binary cross entropy between normalized importance and the
//! labels (summed over points, weighted 0.5) is added, which is what pulls
//! the ranking toward externally provided keep/drop signals.

use crate::encoder::{segment_spans, EncoderMeta, PointEncoder};
use crate::error::{Error, Result};
use crate::traj::{ImportanceVector, TrajId, Trajectory, TrajectoryDatabase};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use tapegrad::nn::{Adjacency, GatLayer, GatMerge};
use tapegrad::optim::Adam;
use tapegrad::{Array, ParamStore, Tape, Var};

/// Offset added to every raw importance product so scores are never zero;
/// also the margin kept at both ends of normalized scores.
pub const IMPORTANCE_EPS: f64 = 1e-6;

/// Weight of the globality term inside the self-supervised loss.
pub const LAMBDA_GLOB: f64 = 0.5;

/// Default weight of the label-matching term.
pub const LAMBDA_LABELS: f64 = 0.5;

/// Cap on squared embedding distances inside the training-path globality;
/// keeps `exp(-2 d^2)` away from a hard zero so its logarithm stays finite.
const GLOB_D2_CAP: f64 = 300.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatConfig {
    pub layers: usize,
    pub heads: usize,
    /// Width of each attention head; hidden layers concatenate heads, the
    /// final layer averages them, so this is also the output width.
    pub head_dim: usize,
    /// Neighbourhood size for the uniqueness statistic.
    pub neighbors: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            layers: 2,
            heads: 2,
            head_dim: 8,
            neighbors: 10,
        }
    }
}

impl GatConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.neighbors == 0 {
            return Err(Error::Config(
                "graph attention needs positive layer, head, width and neighbour counts".into(),
            ));
        }
        Ok(())
    }
}

/// Bipartite point/window graph of one trajectory.
pub struct TrajGraph {
    adj: Adjacency,
    /// `[m, n]` mean-pool matrix turning point embeddings into window
    /// features.
    pool: Array,
    n: usize,
}

/// Builds the graph for an `n`-point trajectory cut into windows of `w`.
/// Every node also attends to itself: the propagation takes a node's own
/// previous embedding alongside its neighbours, and without that self term
/// all points (which share the same window neighbourhood) would collapse
/// onto one embedding.
pub fn build_graph(n: usize, w: usize) -> TrajGraph {
    let spans = segment_spans(n, w);
    let m = spans.len();
    let mut pool = Array::zeros(&[m, n]);
    let mut edges = Vec::with_capacity(n * m + n + m);
    for (j, seg) in spans.iter().enumerate() {
        for i in seg.start..seg.start + seg.len {
            pool.set2(j, i, 1.0 / seg.len as f64);
        }
    }
    for i in 0..n {
        for j in 0..m {
            edges.push((i, n + j));
        }
    }
    for v in 0..n + m {
        edges.push((v, v));
    }
    TrajGraph {
        adj: Adjacency::new(n + m, &edges),
        pool,
        n,
    }
}

/// Metadata needed to rebuild a [`GnnTs`] from a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnnTsMeta {
    pub encoder: EncoderMeta,
    pub gat: GatConfig,
}

/// Per-epoch loss summary from [`GnnTs::train`].
#[derive(Clone, Debug, Serialize)]
pub struct GnnEpochStats {
    pub contrastive: f64,
    pub label_match: Option<f64>,
    pub total: f64,
}

/// The importance model: a frozen point encoder plus a trainable graph
/// attention stack.
pub struct GnnTs {
    pub encoder: PointEncoder,
    config: GatConfig,
    gat_store: ParamStore,
    gat: Vec<GatLayer>,
}

impl GnnTs {
    pub fn new(encoder: PointEncoder, config: GatConfig, seed: u64) -> Result<GnnTs> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gat_store = ParamStore::new();
        let mut gat = Vec::with_capacity(config.layers);
        let mut d_in = encoder.config().dim;
        for l in 0..config.layers {
            let merge = if l + 1 == config.layers {
                GatMerge::Average
            } else {
                GatMerge::Concat
            };
            let layer = GatLayer::new(
                &mut gat_store,
                &format!("gat.l{l}"),
                d_in,
                config.head_dim,
                config.heads,
                merge,
                &mut rng,
            );
            d_in = layer.output_dim();
            gat.push(layer);
        }
        Ok(GnnTs {
            encoder,
            config,
            gat_store,
            gat,
        })
    }

    pub fn config(&self) -> &GatConfig {
        &self.config
    }

    pub fn gat_store(&self) -> &ParamStore {
        &self.gat_store
    }

    /// Output width of the refined embeddings.
    pub fn refined_dim(&self) -> usize {
        self.config.head_dim
    }

    /// Runs the graph attention stack. `h_points` is `[n, dim]` from the
    /// encoder; the result keeps only the `n` point rows, `[n, head_dim]`.
    pub fn refine(&self, tape: &Tape, h_points: &Array, graph: &TrajGraph) -> Var {
        assert_eq!(h_points.rows(), graph.n, "graph size mismatch");
        let windows = graph.pool.matmul(h_points);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(graph.adj.num_nodes());
        for i in 0..h_points.rows() {
            rows.push(h_points.row(i).to_vec());
        }
        for j in 0..windows.rows() {
            rows.push(windows.row(j).to_vec());
        }
        let mut x = tape.constant(Array::matrix(&rows));
        for (l, layer) in self.gat.iter().enumerate() {
            x = layer.forward(tape, &x, &graph.adj);
            if l + 1 < self.gat.len() {
                x = x.elu();
            }
        }
        x.slice_rows(0, graph.n)
    }

    /// Refined embeddings of one trajectory as plain values.
    pub fn refined_embeddings(&self, traj: &Trajectory) -> Array {
        let h = self.encoder.point_embeddings(traj);
        let graph = build_graph(traj.len(), self.encoder.config().window);
        let tape = Tape::inference();
        let g = self.refine(&tape, &h, &graph);
        (*g.value()).clone()
    }

    /// Per-point uniqueness and globality of `g` (`[n]` each) on the tape,
    /// for training. The statistics are computed on row-normalized (unit
    /// sphere) embeddings: that is the convention under which this family
    /// of alignment/uniformity losses is bounded, and without it the
    /// spread term rewards inflating the embedding scale without limit.
    /// The neighbour choice is made from current values and enters the
    /// graph as a constant.
    fn contrastive_terms(&self, tape: &Tape, g: &Var) -> (Var, Var) {
        let g = &normalize_rows_on_tape(g);
        let values = g.value();
        let n = values.rows();
        assert!(n >= 2, "contrastive terms need at least two points");

        let selection = neighbor_selection(&values, self.config.neighbors);
        let mut sel = Array::zeros(&[n, n]);
        for (i, row) in selection.iter().enumerate() {
            for &j in row {
                sel.set2(i, j, 1.0 / row.len() as f64);
            }
        }
        let mut offdiag = Array::full(&[n, n], 1.0);
        for i in 0..n {
            offdiag.set2(i, i, 0.0);
        }

        let sq = g.mul(g).row_sums();
        let cross = g.matmul(&g.transpose()).scale(-2.0);
        let d2 = cross.add_col_vec(&sq).add_row_vec(&sq);

        // The matmul form of d2 can dip slightly negative for numerically
        // identical rows; clamp before the square root.
        let uni = d2
            .clamp(0.0, f64::INFINITY)
            .add_scalar(1e-12)
            .sqrt()
            .mul(&tape.constant(sel))
            .row_sums();

        let glob = d2
            .clamp(-1.0, GLOB_D2_CAP)
            .scale(-2.0)
            .exp()
            .mul(&tape.constant(offdiag))
            .row_sums()
            .scale(1.0 / (n - 1) as f64)
            .ln();

        (uni, glob)
    }

    /// Exact raw importance of one trajectory: `uniqueness * globality +
    /// eps` per point, computed in plain f64 with a max-shifted
    /// log-sum-exp so far-apart embeddings cannot underflow to `ln 0`.
    pub fn raw_importance(&self, traj: &Trajectory) -> Vec<f64> {
        let n = traj.len();
        if n == 0 {
            return Vec::new();
        }
        if n == 1 {
            return vec![IMPORTANCE_EPS];
        }
        let g = self.refined_embeddings(traj);
        raw_scores_from_refined(&g, self.config.neighbors)
    }

    /// Raw importance for every trajectory, then min-max normalized over
    /// the whole database into `(eps, 1 - eps)`.
    pub fn importance(&self, db: &TrajectoryDatabase) -> ImportanceVector {
        let mut raw = BTreeMap::new();
        for traj in db.trajectories() {
            raw.insert(traj.id.clone(), self.raw_importance(traj));
        }
        let mut scores = ImportanceVector::from_raw(raw);
        scores.normalize(IMPORTANCE_EPS);
        scores
    }

    /// Trains the graph attention stack; the encoder stays frozen, so
    /// `embeddings` (per-trajectory encoder outputs) are computed once
    /// up front. `labels`, when given, supply one keep/drop target per
    /// point and enable the label-matching term.
    pub fn train(
        &mut self,
        db: &TrajectoryDatabase,
        embeddings: &BTreeMap<TrajId, Array>,
        labels: Option<&BTreeMap<TrajId, Vec<f64>>>,
        epochs: usize,
        lr: f64,
        lambda_labels: f64,
        seed: u64,
    ) -> Result<Vec<GnnEpochStats>> {
        for traj in db.trajectories() {
            let h = embeddings
                .get(&traj.id)
                .ok_or_else(|| Error::Contract(format!("no embeddings for {}", traj.id)))?;
            if h.rows() != traj.len() {
                return Err(Error::Contract(format!(
                    "embeddings for {} have {} rows, trajectory has {} points",
                    traj.id,
                    h.rows(),
                    traj.len()
                )));
            }
            if let Some(all) = labels {
                let y = all
                    .get(&traj.id)
                    .ok_or_else(|| Error::Contract(format!("no labels for {}", traj.id)))?;
                if y.len() != traj.len() {
                    return Err(Error::Contract(format!(
                        "labels for {} have length {}, trajectory has {} points",
                        traj.id,
                        y.len(),
                        traj.len()
                    )));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(lr);
        let window = self.encoder.config().window;
        let mut graphs: BTreeMap<usize, TrajGraph> = BTreeMap::new();
        let mut stats = Vec::with_capacity(epochs);

        for _ in 0..epochs {
            // Database-level normalization bounds for the label-matching
            // term, recomputed from the current parameters once per epoch
            // and entering the graph as constants.
            let bounds = labels.map(|_| self.raw_bounds(db, embeddings, &mut graphs));

            let mut order: Vec<usize> = (0..db.len()).collect();
            order.shuffle(&mut rng);
            let mut sum_con = 0.0;
            let mut sum_ml = 0.0;
            let mut count = 0usize;
            for &ti in &order {
                let traj = &db.trajectories()[ti];
                let n = traj.len();
                if n < 2 {
                    continue;
                }
                let h = &embeddings[&traj.id];
                let graph = graphs
                    .entry(n)
                    .or_insert_with(|| build_graph(n, window));
                let tape = Tape::new();
                let g = self.refine(&tape, h, graph);
                let (uni, glob) = self.contrastive_terms(&tape, &g);
                let l_con = uni.mean_all().add(&glob.mean_all().scale(LAMBDA_GLOB));
                let mut loss = l_con.clone();

                if let (Some(all), Some((lo, hi))) = (labels, bounds) {
                    let y = &all[&traj.id];
                    let raw = uni.mul(&glob).add_scalar(IMPORTANCE_EPS);
                    // Min-max into [eps, 1 - eps] under this epoch's bounds;
                    // the clamp keeps scores that drift past the stale
                    // bounds inside the open unit interval for the logs.
                    let p = affine_to_unit(&raw, lo, hi)
                        .clamp(IMPORTANCE_EPS, 1.0 - IMPORTANCE_EPS);
                    let l_ml = bce_sum(&tape, &p, y);
                    sum_ml += l_ml.scalar_value();
                    loss = loss.add(&l_ml.scale(lambda_labels));
                }

                sum_con += l_con.scalar_value();
                count += 1;
                let grads = tapegrad::backward(&loss);
                adam.step(&self.gat_store, &grads);
            }
            if count == 0 {
                return Err(Error::EmptyInput(
                    "no trajectory has the two points training needs".into(),
                ));
            }
            let contrastive = sum_con / count as f64;
            let label_match = labels.map(|_| sum_ml / count as f64);
            stats.push(GnnEpochStats {
                contrastive,
                label_match,
                total: contrastive + lambda_labels * label_match.unwrap_or(0.0),
            });
        }
        Ok(stats)
    }

    /// Min and max raw importance over the database under the current
    /// parameters, using the same frozen embeddings as training.
    fn raw_bounds(
        &self,
        db: &TrajectoryDatabase,
        embeddings: &BTreeMap<TrajId, Array>,
        graphs: &mut BTreeMap<usize, TrajGraph>,
    ) -> (f64, f64) {
        let window = self.encoder.config().window;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for traj in db.trajectories() {
            let n = traj.len();
            if n < 2 {
                continue;
            }
            let graph = graphs.entry(n).or_insert_with(|| build_graph(n, window));
            let tape = Tape::inference();
            let g = self.refine(&tape, &embeddings[&traj.id], graph);
            for s in raw_scores_from_refined(&g.value(), self.config.neighbors) {
                lo = lo.min(s);
                hi = hi.max(s);
            }
        }
        if !lo.is_finite() || !hi.is_finite() || hi <= lo {
            (0.0, 1.0)
        } else {
            (lo, hi)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = GnnTsMeta {
            encoder: self.encoder.meta(),
            gat: self.config.clone(),
        };
        crate::ckpt::save_model(
            path,
            "gnn-ts",
            &meta,
            &[("enc", self.encoder.store()), ("gat", &self.gat_store)],
        )
    }

    pub fn load(path: &Path) -> Result<GnnTs> {
        let mut loaded = crate::ckpt::load_model(path)?;
        loaded.expect_kind("gnn-ts")?;
        let meta: GnnTsMeta = loaded.meta_as()?;
        let encoder = PointEncoder::from_parts(meta.encoder, 0)?;
        loaded.apply_section("enc", encoder.store())?;
        let model = GnnTs::new(encoder, meta.gat, 0)?;
        loaded.apply_section("gat", &model.gat_store)?;
        Ok(model)
    }
}

/// Computes per-trajectory encoder embeddings for every trajectory once,
/// keyed by id; the usual prelude to [`GnnTs::train`].
pub fn database_embeddings(
    encoder: &PointEncoder,
    db: &TrajectoryDatabase,
) -> BTreeMap<TrajId, Array> {
    db.trajectories()
        .iter()
        .map(|t| (t.id.clone(), encoder.point_embeddings(t)))
        .collect()
}

/// For each point, the indices of the `k` most cosine-similar other points
/// (ties broken toward lower indices). `k` shrinks to `n - 1` on short
/// trajectories.
fn neighbor_selection(g: &Array, k: usize) -> Vec<Vec<usize>> {
    let n = g.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dot: f64 = g.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j] + 1e-12), j)
            })
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.push(sims.iter().take(k.min(n - 1)).map(|&(_, j)| j).collect());
    }
    out
}

/// Projects each row of `g` onto the unit sphere.
fn normalize_rows_on_tape(g: &Var) -> Var {
    let inv_norm = g.mul(g).row_sums().add_scalar(1e-12).sqrt().recip();
    g.mul_col_vec(&inv_norm)
}

fn normalize_rows(g: &Array) -> Array {
    let mut out = g.clone();
    let cols = g.cols();
    for i in 0..g.rows() {
        let norm = (g.row(i).iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        for j in 0..cols {
            out.set2(i, j, g.at2(i, j) / norm);
        }
    }
    out
}

/// Exact f64 raw importance from refined embeddings (`[n, d]`, `n >= 2`),
/// mirroring the training path: rows are projected onto the unit sphere
/// and squared distances are capped inside the globality exponential.
fn raw_scores_from_refined(g: &Array, k: usize) -> Vec<f64> {
    let g = &normalize_rows(g);
    let n = g.rows();
    let selection = neighbor_selection(g, k);
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = g
                .row(i)
                .iter()
                .zip(g.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i][j] = s;
            d2[j][i] = s;
        }
    }
    (0..n)
        .map(|i| {
            let uni = selection[i]
                .iter()
                .map(|&j| d2[i][j].sqrt())
                .sum::<f64>()
                / selection[i].len() as f64;
            // log-mean-exp over -2 min(d^2, cap), max-shifted for exactness.
            let xs: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| -2.0 * d2[i][j].min(GLOB_D2_CAP))
                .collect();
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let glob = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                - (xs.len() as f64).ln();
            uni * glob + IMPORTANCE_EPS
        })
        .collect()
}

/// Affine map of `raw` from `[lo, hi]` onto `[eps, 1 - eps]`. With exact
/// bounds the output needs no clamping; a zero span collapses to 0.5.
fn affine_to_unit(raw: &Var, lo: f64, hi: f64) -> Var {
    let eps = IMPORTANCE_EPS;
    let span = hi - lo;
    if span <= 0.0 {
        return raw.scale(0.0).add_scalar(0.5);
    }
    raw.add_scalar(-lo)
        .scale((1.0 - 2.0 * eps) / span)
        .add_scalar(eps)
}

/// Binary cross entropy between probabilities `p` and targets `y`, summed
/// over points.
fn bce_sum(tape: &Tape, p: &Var, y: &[f64]) -> Var {
    let y_arr = tape.constant(Array::vector(y));
    let y_inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y_inv = tape.constant(Array::vector(&y_inv));
    let pos = p.ln().mul(&y_arr);
    let neg = p.neg().add_scalar(1.0).ln().mul(&y_inv);
    pos.add(&neg).sum_all().neg()
}
