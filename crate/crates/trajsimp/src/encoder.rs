//! Spatio-temporal point encoder with masked-cell pretraining.
//!
//! Each point is embedded as the sum of a location component (a trainable
//! embedding per grid cell) and a time component (a trainable
//! frequency/phase bank: one linear channel plus sinusoids over normalized
//! time). Trajectories are cut into fixed-width windows; each window runs
//! through a stack of transformer encoder layers, so a point's embedding
//! mixes information from its whole window. Pretraining masks a fraction of
//! location components and recovers the hidden cell ids from context.

use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::traj::{Point, Trajectory, TrajectoryDatabase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use tapegrad::nn::{cross_entropy_mean, EncoderLayer, Linear, MASK_NEG};
use tapegrad::optim::Adam;
use tapegrad::{Array, Param, ParamStore, Tape, Var};

/// Largest allowed location vocabulary; denser grids make the embedding
/// table unreasonably large and almost always indicate a too-small cell.
const MAX_VOCAB: usize = 1 << 20;

/// Fraction of points whose location component is hidden during
/// pretraining.
pub const MASK_FRACTION: f64 = 0.2;

/// Uniform spatial grid over a database's bounding box. Cells are addressed
/// row-major; points outside the fitted box clamp to the nearest edge cell,
/// so the mapping is total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    min_x: f64,
    min_y: f64,
    step_x: f64,
    step_y: f64,
    nx: usize,
    ny: usize,
}

impl CellGrid {
    /// Builds a grid with cells of edge `cell_m` metres (converted to
    /// degrees through `proj`).
    pub fn fit(db: &TrajectoryDatabase, cell_m: f64, proj: &Projection) -> Result<CellGrid> {
        if !(cell_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_m}"
            )));
        }
        let bb = db
            .bounding_box()
            .ok_or_else(|| Error::EmptyInput("database has no points".into()))?;
        let step_x = cell_m * proj.deg_per_meter_x();
        let step_y = cell_m * proj.deg_per_meter_y();
        let nx = (((bb.max_x - bb.min_x) / step_x).ceil() as usize).max(1);
        let ny = (((bb.max_y - bb.min_y) / step_y).ceil() as usize).max(1);
        if nx.saturating_mul(ny) > MAX_VOCAB {
            return Err(Error::InvalidArgument(format!(
                "grid would need {nx}x{ny} cells; increase the cell size"
            )));
        }
        Ok(CellGrid {
            min_x: bb.min_x,
            min_y: bb.min_y,
            step_x,
            step_y,
            nx,
            ny,
        })
    }

    pub fn vocab(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_of(&self, p: &Point) -> usize {
        let ix = (((p.x - self.min_x) / self.step_x).floor() as i64)
            .clamp(0, self.nx as i64 - 1) as usize;
        let iy = (((p.y - self.min_y) / self.step_y).floor() as i64)
            .clamp(0, self.ny as i64 - 1) as usize;
        iy * self.nx + ix
    }
}

/// Affine map from raw timestamps to roughly unit scale, fitted on the
/// database's time extent. Values outside the fitted span extrapolate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeScale {
    min_t: i64,
    span: i64,
}

impl TimeScale {
    pub fn fit(db: &TrajectoryDatabase) -> Result<TimeScale> {
        let bb = db
            .bounding_box()
            .ok_or_else(|| Error::EmptyInput("database has no points".into()))?;
        Ok(TimeScale {
            min_t: bb.min_t,
            span: (bb.max_t - bb.min_t).max(1),
        })
    }

    pub fn normalize(&self, t: i64) -> f64 {
        (t - self.min_t) as f64 / self.span as f64
    }
}

/// A contiguous window of trajectory positions `[start, start + len)`.
/// Windows shorter than the model width are padded up to it at encode time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Cuts `n` positions into `ceil(n / w)` windows of width `w`; only the
/// last may be shorter.
pub fn segment_spans(n: usize, w: usize) -> Vec<Segment> {
    assert!(w > 0, "window width must be positive");
    (0..n)
        .step_by(w)
        .map(|start| Segment {
            start,
            len: w.min(n - start),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Model width; must be divisible by `heads`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Window width used to cut trajectories.
    pub window: usize,
    /// Spatial grid cell edge in metres.
    pub cell_m: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            window: 20,
            cell_m: 100.0,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.window == 0 {
            return Err(Error::Config(
                "encoder needs at least one layer and a positive window".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a [`PointEncoder`] without the database.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub config: EncoderConfig,
    pub grid: CellGrid,
    pub time: TimeScale,
}

/// Report from masked-cell pretraining.
#[derive(Clone, Debug, Serialize)]
pub struct MlmReport {
    /// Mean per-trajectory loss of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

/// The trainable point encoder.
pub struct PointEncoder {
    config: EncoderConfig,
    grid: CellGrid,
    time: TimeScale,
    store: ParamStore,
    /// `[vocab + 1, dim]`; the extra final row is the mask token.
    cell_table: Param,
    /// `[1, dim]` frequencies and `[dim]` phases of the time channels.
    time_freq: Param,
    time_phase: Param,
    layers: Vec<EncoderLayer>,
    /// Recovery head for pretraining, `dim -> vocab`. Zero-initialised so
    /// an untrained model predicts the uniform distribution.
    mlm_head: Linear,
}

impl PointEncoder {
    pub fn new(
        db: &TrajectoryDatabase,
        config: EncoderConfig,
        proj: &Projection,
        seed: u64,
    ) -> Result<PointEncoder> {
        let grid = CellGrid::fit(db, config.cell_m, proj)?;
        let time = TimeScale::fit(db)?;
        Self::from_parts(EncoderMeta { config, grid, time }, seed)
    }

    /// Builds the encoder from saved metadata; parameters are freshly
    /// initialised from `seed` until a checkpoint overwrites them.
    pub fn from_parts(meta: EncoderMeta, seed: u64) -> Result<PointEncoder> {
        meta.config.validate()?;
        let EncoderMeta { config, grid, time } = meta;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab = grid.vocab();
        let cell_table = store.create(
            "enc.cells",
            Array::randn(&[vocab + 1, config.dim], 0.1, &mut rng),
        );
        let time_freq = store.create(
            "enc.time_freq",
            Array::randn(&[1, config.dim], 1.0, &mut rng),
        );
        let time_phase = store.create("enc.time_phase", Array::zeros(&[config.dim]));
        let layers = (0..config.layers)
            .map(|l| {
                EncoderLayer::new(
                    &mut store,
                    &format!("enc.l{l}"),
                    config.dim,
                    config.heads,
                    &mut rng,
                )
            })
            .collect();
        let mlm_head = Linear::new_zeroed(&mut store, "enc.mlm", config.dim, vocab);
        Ok(PointEncoder {
            config,
            grid,
            time,
            store,
            cell_table,
            time_freq,
            time_phase,
            layers,
            mlm_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn grid(&self) -> &CellGrid {
        &self.grid
    }

    pub fn meta(&self) -> EncoderMeta {
        EncoderMeta {
            config: self.config.clone(),
            grid: self.grid.clone(),
            time: self.time.clone(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Embeds one window: location row plus time channels, padded rows
    /// zeroed. Returns the `[w, dim]` input and, when the window is padded,
    /// the additive attention mask hiding the pad rows.
    fn embed_segment(
        &self,
        tape: &Tape,
        traj: &Trajectory,
        seg: Segment,
        masked: &[usize],
    ) -> (Var, Option<Array>) {
        let w = self.config.window;
        let dim = self.config.dim;
        let vocab = self.grid.vocab();

        let mut ids = Vec::with_capacity(w);
        let mut tau = Vec::with_capacity(w);
        for r in 0..w {
            if r < seg.len {
                let g = seg.start + r;
                let p = &traj.points[g];
                ids.push(if masked.binary_search(&g).is_ok() {
                    vocab
                } else {
                    self.grid.cell_of(p)
                });
                tau.push(self.time.normalize(p.t));
            } else {
                ids.push(0);
                tau.push(0.0);
            }
        }

        let z_loc = tape.param(&self.cell_table).gather_rows(&ids);
        // Time channels: channel 0 stays linear in normalized time, the
        // rest pass through sin, so both trends and periodicities are
        // representable.
        let angles = tape
            .constant(Array::new(&[w, 1], tau))
            .matmul(&tape.param(&self.time_freq))
            .add_row_vec(&tape.param(&self.time_phase));
        let mut linear_pick = vec![0.0; dim];
        linear_pick[0] = 1.0;
        let sin_pick: Vec<f64> = linear_pick.iter().map(|&v| 1.0 - v).collect();
        let z_time = angles
            .mul_row_vec(&tape.constant(Array::vector(&linear_pick)))
            .add(
                &angles
                    .sin()
                    .mul_row_vec(&tape.constant(Array::vector(&sin_pick))),
            );

        let mut z = z_loc.add(&z_time);
        if seg.len < w {
            let mut keep = vec![1.0; w];
            let mut mask = vec![0.0; w];
            for r in seg.len..w {
                keep[r] = 0.0;
                mask[r] = MASK_NEG;
            }
            z = z.mul_col_vec(&tape.constant(Array::vector(&keep)));
            (z, Some(Array::vector(&mask)))
        } else {
            (z, None)
        }
    }

    /// Runs one window through the encoder stack; output is `[w, dim]`.
    fn encode_segment(
        &self,
        tape: &Tape,
        traj: &Trajectory,
        seg: Segment,
        masked: &[usize],
    ) -> Var {
        let (mut x, key_mask) = self.embed_segment(tape, traj, seg, masked);
        for layer in &self.layers {
            x = layer.forward(tape, &x, key_mask.as_ref());
        }
        x
    }

    /// Embeds every point of `traj` on `tape`, keeping gradients; rows
    /// follow point order, `[n, dim]`.
    pub fn point_rows(&self, tape: &Tape, traj: &Trajectory) -> Var {
        let w = self.config.window;
        let parts: Vec<Var> = segment_spans(traj.len(), w)
            .into_iter()
            .map(|seg| {
                let out = self.encode_segment(tape, traj, seg, &[]);
                if seg.len < w {
                    out.slice_rows(0, seg.len)
                } else {
                    out
                }
            })
            .collect();
        let refs: Vec<&Var> = parts.iter().collect();
        Var::concat_rows(&refs)
    }

    /// Embeds every point of `traj`; rows follow point order.
    pub fn point_embeddings(&self, traj: &Trajectory) -> Array {
        let tape = Tape::inference();
        (*self.point_rows(&tape, traj).value()).clone()
    }

    /// Cross-entropy of recovering the hidden cell ids at `masked`
    /// positions (global point indices, ascending). `None` when no masked
    /// position falls into any window.
    fn recovery_loss(&self, tape: &Tape, traj: &Trajectory, masked: &[usize]) -> Option<Var> {
        let mut picked = Vec::new();
        let mut targets = Vec::new();
        for seg in segment_spans(traj.len(), self.config.window) {
            let local: Vec<usize> = masked
                .iter()
                .filter(|&&g| g >= seg.start && g < seg.start + seg.len)
                .map(|&g| g - seg.start)
                .collect();
            if local.is_empty() {
                continue;
            }
            let out = self.encode_segment(tape, traj, seg, masked);
            for &l in &local {
                targets.push(self.grid.cell_of(&traj.points[seg.start + l]));
            }
            picked.push(out.gather_rows(&local));
        }
        if picked.is_empty() {
            return None;
        }
        let refs: Vec<&Var> = picked.iter().collect();
        let features = Var::concat_rows(&refs);
        let logits = self.mlm_head.forward(tape, &features);
        Some(cross_entropy_mean(&logits, &targets))
    }

    /// Trains the encoder by masked-cell recovery. Deterministic for a
    /// fixed seed. Returns per-epoch mean losses.
    pub fn pretrain(
        &mut self,
        db: &TrajectoryDatabase,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<MlmReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(lr);
        let mut epoch_losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..db.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut count = 0usize;
            for &ti in &order {
                let traj = &db.trajectories()[ti];
                if traj.is_empty() {
                    continue;
                }
                let masked = mask_positions(traj.len(), &mut rng);
                let tape = Tape::new();
                let Some(loss) = self.recovery_loss(&tape, traj, &masked) else {
                    continue;
                };
                total += loss.scalar_value();
                count += 1;
                let grads = tapegrad::backward(&loss);
                adam.step(&self.store, &grads);
            }
            if count == 0 {
                return Err(Error::EmptyInput("no trainable trajectories".into()));
            }
            epoch_losses.push(total / count as f64);
        }
        Ok(MlmReport { epoch_losses })
    }

    /// Fraction of masked positions whose cell the recovery head ranks
    /// first. Masks are drawn from `seed` like in [`pretrain`].
    pub fn masked_accuracy(&self, db: &TrajectoryDatabase, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        let mut total = 0usize;
        for traj in db.trajectories() {
            if traj.is_empty() {
                continue;
            }
            let masked = mask_positions(traj.len(), &mut rng);
            let tape = Tape::inference();
            for seg in segment_spans(traj.len(), self.config.window) {
                let local: Vec<usize> = masked
                    .iter()
                    .filter(|&&g| g >= seg.start && g < seg.start + seg.len)
                    .map(|&g| g - seg.start)
                    .collect();
                if local.is_empty() {
                    continue;
                }
                let out = self.encode_segment(&tape, traj, seg, &masked);
                let logits = self.mlm_head.forward(&tape, &out.gather_rows(&local));
                let lv = logits.value();
                for (row, &l) in local.iter().enumerate() {
                    let truth = self.grid.cell_of(&traj.points[seg.start + l]);
                    let best = lv
                        .row(row)
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(j, _)| j)
                        .unwrap();
                    hits += usize::from(best == truth);
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyInput("no maskable positions".into()));
        }
        Ok(hits as f64 / total as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::ckpt::save_model(path, "point-encoder", &self.meta(), &[("enc", &self.store)])
    }

    pub fn load(path: &Path) -> Result<PointEncoder> {
        let mut loaded = crate::ckpt::load_model(path)?;
        loaded.expect_kind("point-encoder")?;
        let meta: EncoderMeta = loaded.meta_as()?;
        let enc = Self::from_parts(meta, 0)?;
        loaded.apply_section("enc", &enc.store)?;
        Ok(enc)
    }
}

/// How many positions of an `n`-point trajectory get masked.
pub fn mask_count(n: usize) -> usize {
    assert!(n > 0);
    ((MASK_FRACTION * n as f64).round() as usize).clamp(1, n)
}

/// Draws the masked positions for one trajectory, ascending.
fn mask_positions(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picks = rand::seq::index::sample(rng, n, mask_count(n)).into_vec();
    picks.sort_unstable();
    picks
}
