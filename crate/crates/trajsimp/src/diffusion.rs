//! Conditional denoising-diffusion label amplifier over point-embedding
//! space.
//!
//! The model owns its own spatio-temporal point encoder and a transformer
//! denoiser. Training pairs each trajectory `T` with a high-compression
//! simplification `T*` (a subsequence of `T`): the embeddings of `T*` are
//! progressively noised while the embeddings of `T` ride along unchanged as
//! conditioning, and the denoiser learns to predict the injected noise. A
//! diversity term on the implied clean embeddings pushes the generated set
//! apart so it does not collapse onto one location.
//!
//! At inference the chain runs in reverse from pure Gaussian rows,
//! conditioned on the full trajectory; each generated row is then matched
//! to an original point by cosine similarity, producing a binary keep/drop
//! label per point with exactly `alpha` keeps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::nn::{mse_mean, EncoderLayer, Linear};
use tapegrad::optim::Adam;
use tapegrad::{Array, Param, ParamStore, Tape, Var};

use crate::encoder::{EncoderConfig, EncoderMeta, PointEncoder};
use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::traj::{TrajId, Trajectory, TrajectoryDatabase};

/// Weight of the diversity term, used when a config does not override it.
pub const LAMBDA_DIVERSITY: f64 = 0.5;

/// Squared distances are capped at this value inside the diversity
/// exponential so `ln(mean(exp(-2 d^2)))` cannot underflow to `ln 0`.
const DIV_D2_CAP: f64 = 300.0;

/// Strictly increasing noise levels `beta_0 < beta_1 < ... < beta_steps`,
/// all in `(0, 1)`. Index 0 is the initial jitter applied when lifting
/// clean embeddings into the chain; indices `1..=steps` drive the Markov
/// noising steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule whose endpoints scale inversely with the step count
    /// (reference endpoints 1e-4 and 0.02 at 500 steps), so the total
    /// noise injected is about the same for any step count and the
    /// terminal marginal stays near standard normal. At 500 steps this is
    /// exactly the reference schedule. Step counts of 10 or fewer push the
    /// top beta to 1 and are rejected.
    pub fn linear(steps: usize) -> Result<NoiseSchedule> {
        let scale = 500.0 / steps as f64;
        Self::linear_with(steps, 1e-4 * scale, 0.02 * scale)
    }

    /// Linear schedule with explicit endpoints.
    pub fn linear_with(steps: usize, lo: f64, hi: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "noise endpoints must satisfy 0 < {lo} < {hi} < 1"
            )));
        }
        let betas: Vec<f64> = (0..=steps)
            .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas (`steps + 1` values).
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.len() < 2 {
            return Err(Error::Config(
                "noise schedule needs the initial jitter plus at least one step".into(),
            ));
        }
        let ok = betas.iter().all(|b| 0.0 < *b && *b < 1.0)
            && betas.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!(
                "noise levels must be strictly increasing within (0, 1), got {:?} ..",
                &betas[..betas.len().min(4)]
            )));
        }
        Ok(NoiseSchedule { betas })
    }

    /// Number of Markov steps (the jitter level is not counted).
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    /// Noise level at `gamma` (`0..=steps`).
    pub fn beta(&self, gamma: usize) -> f64 {
        self.betas[gamma]
    }

    /// Product of `1 - beta_s` for `s` in `1..=gamma`; equals 1 at
    /// `gamma = 0`. This is the signal fraction remaining after `gamma`
    /// Markov steps.
    pub fn alpha_bar(&self, gamma: usize) -> f64 {
        self.betas[1..=gamma].iter().map(|b| 1.0 - b).product()
    }

    /// Variance of the reverse-process posterior at step `gamma >= 1`:
    /// `beta_gamma * (1 - alpha_bar_{gamma-1}) / (1 - alpha_bar_gamma)`.
    /// Exactly zero at `gamma = 1`, which makes the final reverse step
    /// deterministic.
    pub fn posterior_var(&self, gamma: usize) -> f64 {
        assert!(gamma >= 1 && gamma <= self.steps(), "step out of range");
        self.beta(gamma) * (1.0 - self.alpha_bar(gamma - 1)) / (1.0 - self.alpha_bar(gamma))
    }
}

/// Denoiser hyperparameters. The embedding width comes from the encoder
/// config; `steps` sizes the linear noise schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffConfig {
    pub layers: usize,
    pub heads: usize,
    pub steps: usize,
    pub lambda_div: f64,
}

impl Default for DiffConfig {
    fn default() -> Self {
        DiffConfig {
            layers: 2,
            heads: 2,
            steps: 50,
            lambda_div: LAMBDA_DIVERSITY,
        }
    }
}

impl DiffConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::Config(
                "denoiser needs at least one layer and one head".into(),
            ));
        }
        if self.lambda_div < 0.0 {
            return Err(Error::Config("diversity weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-point binary keep labels for one trajectory with exactly `alpha`
/// ones.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplifiedLabels {
    pub y: Vec<f64>,
    pub alpha: usize,
}

/// Per-epoch training statistics.
#[derive(Clone, Debug)]
pub struct DiffEpochStats {
    /// Mean noise-prediction error over trajectories.
    pub mse: f64,
    /// Mean diversity term over trajectories that had at least two
    /// simplified points; `None` when no trajectory did.
    pub diversity: Option<f64>,
    /// Mean total loss over trajectories.
    pub total: f64,
}

/// Everything needed to rebuild a [`DiffusionModel`] without the database.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffMeta {
    pub encoder: EncoderMeta,
    pub diff: DiffConfig,
    pub schedule: NoiseSchedule,
}

/// The conditional diffusion model: its own point encoder, a transformer
/// denoiser and a noise schedule.
pub struct DiffusionModel {
    encoder: PointEncoder,
    config: DiffConfig,
    schedule: NoiseSchedule,
    dn_store: ParamStore,
    /// Learned row markers telling the denoiser which rows are clean
    /// conditioning and which are the noised block, `[1, dim]` each.
    mark_cond: Param,
    mark_noise: Param,
    layers: Vec<EncoderLayer>,
    /// Noise-prediction head, `dim -> dim`, zero-initialised so the
    /// untrained model predicts zero noise.
    head: Linear,
}

impl DiffusionModel {
    pub fn new(
        db: &TrajectoryDatabase,
        enc_config: EncoderConfig,
        config: DiffConfig,
        proj: &Projection,
        seed: u64,
    ) -> Result<DiffusionModel> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.steps)?;
        let encoder = PointEncoder::new(db, enc_config, proj, seed)?;
        Self::assemble(encoder, config, schedule, seed)
    }

    /// Rebuilds the model from saved metadata; parameters are freshly
    /// initialised from `seed` until a checkpoint overwrites them.
    pub fn from_parts(meta: DiffMeta, seed: u64) -> Result<DiffusionModel> {
        meta.diff.validate()?;
        let encoder = PointEncoder::from_parts(meta.encoder, seed)?;
        Self::assemble(encoder, meta.diff, meta.schedule, seed)
    }

    fn assemble(
        encoder: PointEncoder,
        config: DiffConfig,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Result<DiffusionModel> {
        let dim = encoder.config().dim;
        if dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "denoiser head count {} must divide the embedding width {dim}",
                config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let mut dn_store = ParamStore::new();
        let mark_cond = dn_store.create("dn.mark_cond", Array::randn(&[1, dim], 0.1, &mut rng));
        let mark_noise = dn_store.create("dn.mark_noise", Array::randn(&[1, dim], 0.1, &mut rng));
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut dn_store, &format!("dn.l{l}"), dim, config.heads, &mut rng))
            .collect();
        let head = Linear::new_zeroed(&mut dn_store, "dn.head", dim, dim);
        Ok(DiffusionModel {
            encoder,
            config,
            schedule,
            dn_store,
            mark_cond,
            mark_noise,
            layers,
            head,
        })
    }

    pub fn encoder(&self) -> &PointEncoder {
        &self.encoder
    }

    pub fn config(&self) -> &DiffConfig {
        &self.config
    }

    /// Overrides the diversity weight; orchestration uses this to carry a
    /// schedule-level setting into training.
    pub fn set_lambda_div(&mut self, v: f64) -> Result<()> {
        if v < 0.0 {
            return Err(Error::Config("diversity weight must be non-negative".into()));
        }
        self.config.lambda_div = v;
        Ok(())
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser_store(&self) -> &ParamStore {
        &self.dn_store
    }

    pub fn meta(&self) -> DiffMeta {
        DiffMeta {
            encoder: self.encoder.meta(),
            diff: self.config.clone(),
            schedule: self.schedule.clone(),
        }
    }

    /// Encodes `traj` and its simplification and stacks the rows as
    /// `[conditioning; simplified]`, `[n + z, dim]`. Errors unless the
    /// simplification is a subsequence of the original.
    pub fn concat_encode(&self, tape: &Tape, traj: &Trajectory, simplified: &Trajectory) -> Result<Var> {
        ensure_subsequence(traj, simplified)?;
        let h_t = self.encoder.point_rows(tape, traj);
        let h_s = self.encoder.point_rows(tape, simplified);
        Ok(Var::concat_rows(&[&h_t, &h_s]))
    }

    /// One forward-noising step at level `gamma` applied to the rows from
    /// `noised_from` on; earlier rows are the conditioning block and pass
    /// through bit-identical. Level 0 is the jitter that lifts clean
    /// embeddings into the chain (`x + sqrt(beta_0) e`); levels
    /// `1..=steps` are Markov steps `sqrt(1 - beta) x + sqrt(beta) e`.
    pub fn forward_noise(
        &self,
        h: &Array,
        noised_from: usize,
        gamma: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array> {
        if gamma > self.schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "noising step {gamma} outside 0..={}",
                self.schedule.steps()
            )));
        }
        if noised_from > h.rows() {
            return Err(Error::InvalidArgument(format!(
                "noised block starts at row {noised_from} but there are only {} rows",
                h.rows()
            )));
        }
        let beta = self.schedule.beta(gamma);
        let (keep, spread) = if gamma == 0 {
            (1.0, beta.sqrt())
        } else {
            ((1.0 - beta).sqrt(), beta.sqrt())
        };
        let mut out = h.clone();
        let cols = h.cols();
        for r in noised_from..h.rows() {
            for c in 0..cols {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let v = keep * out.at2(r, c) + spread * e;
                out.set2(r, c, v);
            }
        }
        Ok(out)
    }

    /// Runs the denoiser on `[conditioning; noised]` rows and returns the
    /// predicted noise for the noised block, `[z, dim]`.
    fn denoise(&self, tape: &Tape, h_full: &Var, cond_rows: usize, gamma: usize) -> Var {
        let rows = h_full.value().rows();
        let dim = self.encoder.config().dim;
        let z = rows - cond_rows;

        let mut cond_mask = Array::zeros(&[rows, 1]);
        let mut noise_mask = Array::zeros(&[rows, 1]);
        for r in 0..rows {
            if r < cond_rows {
                cond_mask.set2(r, 0, 1.0);
            } else {
                noise_mask.set2(r, 0, 1.0);
            }
        }
        let marked = h_full
            .add(&tape.constant(cond_mask).matmul(&tape.param(&self.mark_cond)))
            .add(&tape.constant(noise_mask).matmul(&tape.param(&self.mark_noise)));

        let mut x = marked.add_row_vec(&tape.constant(step_embedding(gamma, dim)));
        for layer in &self.layers {
            x = layer.forward(tape, &x, None);
        }
        self.head.forward(tape, &x).slice_rows(cond_rows, z)
    }

    /// Training loss for one pair under explicit noise draws: noise
    /// prediction error at step `gamma` plus the weighted diversity term
    /// on the implied clean embeddings (skipped when the simplification
    /// has fewer than two points). Returns the loss with the two raw term
    /// values.
    fn training_loss_with(
        &self,
        tape: &Tape,
        traj: &Trajectory,
        simplified: &Trajectory,
        gamma: usize,
        jitter: &Array,
        noise: &Array,
    ) -> Result<(Var, f64, Option<f64>)> {
        ensure_subsequence(traj, simplified)?;
        if gamma == 0 || gamma > self.schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "training step {gamma} outside 1..={}",
                self.schedule.steps()
            )));
        }
        let n = traj.len();
        let z = simplified.len();
        let beta0 = self.schedule.beta(0);
        let ab = self.schedule.alpha_bar(gamma);

        let h_t = self.encoder.point_rows(tape, traj);
        let h_s = self.encoder.point_rows(tape, simplified);
        debug_assert_eq!(jitter.shape(), h_s.value().shape());
        debug_assert_eq!(noise.shape(), h_s.value().shape());

        let x0 = h_s.add(&tape.constant(jitter.map(|e| e * beta0.sqrt())));
        let x_gamma = x0
            .scale(ab.sqrt())
            .add(&tape.constant(noise.map(|e| e * (1.0 - ab).sqrt())));

        let full = Var::concat_rows(&[&h_t, &x_gamma]);
        let eps_hat = self.denoise(tape, &full, n, gamma);
        let l_mse = mse_mean(&eps_hat, &tape.constant(noise.clone()));

        let mut total = l_mse.clone();
        let mut div_value = None;
        if z >= 2 && self.config.lambda_div > 0.0 {
            let x0_hat = x_gamma
                .sub(&eps_hat.scale((1.0 - ab).sqrt()))
                .scale(1.0 / ab.sqrt());
            let l_div = diversity_loss(tape, &x0_hat)?;
            div_value = Some(l_div.scalar_value());
            total = total.add(&l_div.scale(self.config.lambda_div));
        }
        Ok((total, l_mse.scalar_value(), div_value))
    }

    /// Trains encoder and denoiser jointly on `(trajectory, soft label)`
    /// pairs; every database trajectory must have a soft label that is a
    /// subsequence of it. Deterministic for a fixed seed.
    pub fn train(
        &mut self,
        db: &TrajectoryDatabase,
        soft: &BTreeMap<TrajId, Trajectory>,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<DiffEpochStats>> {
        for traj in db.trajectories() {
            let s = soft
                .get(&traj.id)
                .ok_or_else(|| Error::Contract(format!("no soft label for {}", traj.id)))?;
            ensure_subsequence(traj, s)?;
            if s.is_empty() {
                return Err(Error::Contract(format!("empty soft label for {}", traj.id)));
            }
        }
        if db.len() == 0 {
            return Err(Error::EmptyInput("no trajectories to train on".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam_enc = Adam::new(lr);
        let mut adam_dn = Adam::new(lr);
        let steps = self.schedule.steps();
        let dim = self.encoder.config().dim;
        let mut stats = Vec::with_capacity(epochs);

        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..db.len()).collect();
            order.shuffle(&mut rng);
            let mut sum_mse = 0.0;
            let mut sum_total = 0.0;
            let mut sum_div = 0.0;
            let mut div_count = 0usize;
            for &ti in &order {
                let traj = &db.trajectories()[ti];
                let s = &soft[&traj.id];
                let gamma = rng.gen_range(1..=steps);
                let jitter = Array::randn(&[s.len(), dim], 1.0, &mut rng);
                let noise = Array::randn(&[s.len(), dim], 1.0, &mut rng);
                let tape = Tape::new();
                let (loss, mse, div) =
                    self.training_loss_with(&tape, traj, s, gamma, &jitter, &noise)?;
                sum_mse += mse;
                sum_total += loss.scalar_value();
                if let Some(d) = div {
                    sum_div += d;
                    div_count += 1;
                }
                let grads = tapegrad::backward(&loss);
                adam_enc.step(self.encoder.store(), &grads);
                adam_dn.step(&self.dn_store, &grads);
            }
            let count = db.len() as f64;
            stats.push(DiffEpochStats {
                mse: sum_mse / count,
                diversity: (div_count > 0).then(|| sum_div / div_count as f64),
                total: sum_total / count,
            });
        }
        Ok(stats)
    }

    /// One reverse step `gamma -> gamma - 1` for the noised block `x`,
    /// conditioned on the clean rows `h_cond`. The mean comes from the
    /// predicted noise; the variance is the schedule's posterior variance,
    /// so the `gamma = 1` step is deterministic. Passing no generator
    /// forces the variance to zero at every step.
    pub fn reverse_step(
        &self,
        h_cond: &Array,
        x: &Array,
        gamma: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array> {
        if gamma == 0 || gamma > self.schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "reverse step {gamma} outside 1..={}",
                self.schedule.steps()
            )));
        }
        let beta = self.schedule.beta(gamma);
        let ab = self.schedule.alpha_bar(gamma);
        let n = h_cond.rows();

        let tape = Tape::inference();
        let full = Var::concat_rows(&[
            &tape.constant(h_cond.clone()),
            &tape.constant(x.clone()),
        ]);
        let eps_hat = self.denoise(&tape, &full, n, gamma);
        let eps_hat = eps_hat.value();

        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        let sigma = if gamma > 1 {
            self.schedule.posterior_var(gamma).sqrt()
        } else {
            0.0
        };
        let mut out = x.clone();
        match rng {
            Some(rng) if sigma > 0.0 => {
                for r in 0..out.rows() {
                    for c in 0..out.cols() {
                        let mu = inv * (out.at2(r, c) - coef * eps_hat.at2(r, c));
                        let e: f64 = rng.sample(rand_distr::StandardNormal);
                        out.set2(r, c, mu + sigma * e);
                    }
                }
            }
            _ => {
                for r in 0..out.rows() {
                    for c in 0..out.cols() {
                        let mu = inv * (out.at2(r, c) - coef * eps_hat.at2(r, c));
                        out.set2(r, c, mu);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Generates `alpha` embeddings by running the reverse chain from pure
    /// noise conditioned on `traj`, then marks the `alpha` distinct points
    /// whose encoder embeddings match them best by cosine similarity.
    /// Deterministic for a fixed seed. `alpha` must be at most
    /// `traj.len() - 2`.
    pub fn infer_amplified(
        &self,
        traj: &Trajectory,
        alpha: usize,
        seed: u64,
    ) -> Result<AmplifiedLabels> {
        let n = traj.len();
        if alpha == 0 {
            return Err(Error::InvalidArgument(
                "amplified label count must be positive".into(),
            ));
        }
        if alpha + 1 >= n {
            return Err(Error::InvalidArgument(format!(
                "amplified label count {alpha} must be below trajectory length {n} - 1"
            )));
        }
        let dim = self.encoder.config().dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h_t = self.encoder.point_embeddings(traj);
        let mut x = Array::randn(&[alpha, dim], 1.0, &mut rng);
        for gamma in (1..=self.schedule.steps()).rev() {
            x = self.reverse_step(&h_t, &x, gamma, Some(&mut rng))?;
        }

        // Global greedy matching: best score first, generator index then
        // point index break ties, every generated row claims a distinct
        // point.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(alpha * n);
        for g in 0..alpha {
            for p in 0..n {
                pairs.push((cosine(x.row(g), h_t.row(p)), g, p));
            }
        }
        pairs.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut gen_done = vec![false; alpha];
        let mut point_done = vec![false; n];
        let mut y = vec![0.0; n];
        let mut placed = 0usize;
        for (_, g, p) in pairs {
            if placed == alpha {
                break;
            }
            if gen_done[g] || point_done[p] {
                continue;
            }
            gen_done[g] = true;
            point_done[p] = true;
            y[p] = 1.0;
            placed += 1;
        }
        debug_assert_eq!(placed, alpha);
        Ok(AmplifiedLabels { y, alpha })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::ckpt::save_model(
            path,
            "diff-ts",
            &self.meta(),
            &[("enc", self.encoder.store()), ("dn", &self.dn_store)],
        )
    }

    pub fn load(path: &Path) -> Result<DiffusionModel> {
        let mut loaded = crate::ckpt::load_model(path)?;
        loaded.expect_kind("diff-ts")?;
        let meta: DiffMeta = loaded.meta_as()?;
        let model = DiffusionModel::from_parts(meta, 0)?;
        loaded.apply_section("enc", model.encoder.store())?;
        loaded.apply_section("dn", &model.dn_store)?;
        Ok(model)
    }
}

/// Mean over points of `ln` of the mean of `exp(-2 d^2)` to every other
/// point. Zero when all embeddings coincide, increasingly negative as they
/// spread; adding it to a minimized loss therefore pushes embeddings
/// apart. Needs at least two rows.
pub fn diversity_loss(tape: &Tape, h: &Var) -> Result<Var> {
    let z = h.value().rows();
    if z < 2 {
        return Err(Error::Degenerate(
            "diversity needs at least two generated embeddings".into(),
        ));
    }
    let mut offdiag = Array::full(&[z, z], 1.0);
    for i in 0..z {
        offdiag.set2(i, i, 0.0);
    }
    let sq = h.mul(h).row_sums();
    let d2 = h
        .matmul(&h.transpose())
        .scale(-2.0)
        .add_col_vec(&sq)
        .add_row_vec(&sq);
    Ok(d2
        .clamp(-1.0, DIV_D2_CAP)
        .scale(-2.0)
        .exp()
        .mul(&tape.constant(offdiag))
        .row_sums()
        .scale(1.0 / (z - 1) as f64)
        .ln()
        .mean_all())
}

/// Errors unless `simplified`'s points appear in `traj` in order.
fn ensure_subsequence(traj: &Trajectory, simplified: &Trajectory) -> Result<()> {
    let mut it = traj.points.iter();
    for p in &simplified.points {
        if !it.any(|q| q == p) {
            return Err(Error::Contract(format!(
                "simplification of {} is not a subsequence of it",
                traj.id
            )));
        }
    }
    Ok(())
}

/// Fixed sinusoidal embedding of the step index, `[dim]`.
fn step_embedding(gamma: usize, dim: usize) -> Array {
    let mut data = vec![0.0; dim];
    for (k, slot) in data.iter_mut().enumerate() {
        let freq = 10000f64.powf(-((k / 2 * 2) as f64) / dim as f64);
        let angle = gamma as f64 * freq;
        *slot = if k % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    Array::vector(&data)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::Point;
    use rand::Rng;

    fn tiny_db(num: usize, len: usize, seed: u64) -> TrajectoryDatabase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..num)
            .map(|k| {
                let mut x = 0.0;
                let mut y = k as f64 * 10.0;
                let points = (0..len)
                    .map(|i| {
                        x += rng.gen_range(0.5..1.5);
                        y += rng.gen_range(-0.5..0.5);
                        Point::new(x, y, (k * len + i) as i64 * 15)
                    })
                    .collect();
                Trajectory::new(format!("t{k}"), points)
            })
            .collect();
        TrajectoryDatabase::new(trajs).unwrap()
    }

    fn tiny_model(db: &TrajectoryDatabase, seed: u64) -> DiffusionModel {
        let enc = EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            window: 6,
            cell_m: 100.0,
        };
        let diff = DiffConfig {
            layers: 1,
            heads: 2,
            steps: 50,
            lambda_div: LAMBDA_DIVERSITY,
        };
        DiffusionModel::new(db, enc, diff, &Projection::identity(), seed).unwrap()
    }

    fn every_other(traj: &Trajectory) -> Trajectory {
        let points: Vec<Point> = traj.points.iter().step_by(2).copied().collect();
        Trajectory::new(traj.id.clone(), points)
    }

    #[test]
    fn linear_schedule_shape_and_invariants() {
        let s = NoiseSchedule::linear(500).unwrap();
        assert_eq!(s.steps(), 500);
        assert!((s.beta(0) - 1e-4).abs() < 1e-15);
        assert!((s.beta(500) - 0.02).abs() < 1e-15);
        for g in 0..500 {
            assert!(s.beta(g) < s.beta(g + 1));
        }
        assert!((s.alpha_bar(0) - 1.0).abs() < 1e-15);
        // Desk-scale schedule keeps the same total noise mass: the signal
        // fraction after the full chain is tiny for both step counts.
        let desk = NoiseSchedule::linear(50).unwrap();
        assert!((desk.beta(0) - 1e-3).abs() < 1e-15);
        assert!((desk.beta(50) - 0.2).abs() < 1e-15);
        assert!(s.alpha_bar(500) < 0.01, "{}", s.alpha_bar(500));
        assert!(desk.alpha_bar(50) < 0.01, "{}", desk.alpha_bar(50));
        // Posterior variance: zero at the first step, positive after.
        assert_eq!(desk.posterior_var(1), 0.0);
        assert!(desk.posterior_var(2) > 0.0);
        // Step counts whose scaled top beta reaches 1 are rejected.
        assert!(NoiseSchedule::linear(10).is_err());
        assert!(NoiseSchedule::linear_with(5, 0.2, 0.9).is_ok());
    }

    #[test]
    fn forward_noise_keeps_conditioning_rows_bit_identical() {
        let db = tiny_db(1, 8, 3);
        let model = tiny_model(&db, 3);
        let traj = &db.trajectories()[0];
        let s = every_other(traj);
        let tape = Tape::inference();
        let h = model.concat_encode(&tape, traj, &s).unwrap();
        let h = (*h.value()).clone();
        let cond: Vec<f64> = h.data()[..8 * 8].to_vec();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = model.forward_noise(&h, 8, 0, &mut rng).unwrap();
        for gamma in 1..=model.schedule().steps() {
            x = model.forward_noise(&x, 8, gamma, &mut rng).unwrap();
        }
        assert_eq!(&x.data()[..8 * 8], cond.as_slice());
        assert_ne!(&x.data()[8 * 8..], &h.data()[8 * 8..]);
        assert!(model.forward_noise(&h, 8, 51, &mut rng).is_err());
    }

    #[test]
    fn tiny_beta_step_barely_moves_values() {
        let db = tiny_db(1, 8, 4);
        let enc = EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            window: 6,
            cell_m: 100.0,
        };
        let diff = DiffConfig {
            layers: 1,
            heads: 2,
            steps: 50,
            lambda_div: 0.5,
        };
        let mut model = DiffusionModel::new(&db, enc, diff, &Projection::identity(), 4).unwrap();
        model.schedule = NoiseSchedule::from_betas(vec![1e-18, 2e-18, 3e-18]).unwrap();
        let h = Array::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out = model.forward_noise(&h, 0, 1, &mut rng).unwrap();
        for (a, b) in h.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn terminal_marginal_is_standard_normal() {
        let db = tiny_db(1, 8, 6);
        let model = tiny_model(&db, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = 4;
        let dim = 8;
        let vals: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h0 = Array::new(&[rows, dim], vals);

        let samples = 10_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            let mut x = model.forward_noise(&h0, 0, 0, &mut rng).unwrap();
            for gamma in 1..=model.schedule().steps() {
                x = model.forward_noise(&x, 0, gamma, &mut rng).unwrap();
            }
            for v in x.data() {
                sum += v;
                sum_sq += v * v;
            }
        }
        let count = (samples * rows * dim) as f64;
        let mean = sum / count;
        let var = sum_sq / count - mean * mean;
        assert!(mean.abs() <= 0.1, "terminal mean {mean}");
        assert!((0.8..=1.2).contains(&var), "terminal variance {var}");
    }

    #[test]
    fn diversity_loss_hand_values_and_oracle() {
        let tape = Tape::new();
        // All rows identical: exp(0) averaged is 1, ln 1 = 0.
        let same = tape.constant(Array::new(&[3, 2], vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7]));
        assert!(diversity_loss(&tape, &same).unwrap().scalar_value().abs() < 1e-12);
        // Two rows at distance 1: per point ln(exp(-2)) = -2.
        let pair = tape.constant(Array::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]));
        let got = diversity_loss(&tape, &pair).unwrap().scalar_value();
        assert!((got - (-2.0)).abs() < 1e-12, "{got}");
        // Random set against a direct recomputation.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = Array::randn(&[5, 3], 1.0, &mut rng);
        let got = diversity_loss(&tape, &tape.constant(h.clone()))
            .unwrap()
            .scalar_value();
        let mut want = 0.0;
        for i in 0..5 {
            let mut acc = 0.0;
            for j in 0..5 {
                if i == j {
                    continue;
                }
                let d2: f64 = h
                    .row(i)
                    .iter()
                    .zip(h.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                acc += (-2.0 * d2.min(DIV_D2_CAP)).exp();
            }
            want += (acc / 4.0).ln();
        }
        want /= 5.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // Fewer than two rows is rejected.
        let one = tape.constant(Array::new(&[1, 2], vec![0.0, 0.0]));
        assert!(diversity_loss(&tape, &one).is_err());
    }

    #[test]
    fn training_loss_has_exact_gradients() {
        let db = tiny_db(1, 5, 15);
        let model = tiny_model(&db, 15);
        let traj = &db.trajectories()[0];
        let s = every_other(traj); // 3 points: diversity active
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let jitter = Array::randn(&[3, 8], 1.0, &mut rng);
        let noise = Array::randn(&[3, 8], 1.0, &mut rng);
        let loss_fn = || {
            let tape = Tape::new();
            let (loss, _, _) = model
                .training_loss_with(&tape, traj, &s, 3, &jitter, &noise)
                .unwrap();
            loss
        };
        tapegrad::gradcheck::check_params(model.encoder.store(), &loss_fn, 1e-5, 1e-4).assert_ok();
        tapegrad::gradcheck::check_params(&model.dn_store, &loss_fn, 1e-5, 1e-4).assert_ok();
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let db = tiny_db(3, 12, 31);
        let soft: BTreeMap<TrajId, Trajectory> = db
            .trajectories()
            .iter()
            .map(|t| (t.id.clone(), every_other(t)))
            .collect();
        let run = || {
            let mut model = tiny_model(&db, 31);
            let stats = model.train(&db, &soft, 10, 1e-2, 7).unwrap();
            (stats, model.infer_amplified(&db.trajectories()[0], 3, 99).unwrap())
        };
        let (a, labels_a) = run();
        let (b, labels_b) = run();
        assert_eq!(labels_a, labels_b);
        assert_eq!(
            a.iter().map(|s| s.total).collect::<Vec<_>>(),
            b.iter().map(|s| s.total).collect::<Vec<_>>()
        );
        assert!(
            a.last().unwrap().total < a.first().unwrap().total,
            "loss should drop over the first epochs: {:?}",
            a.iter().map(|s| s.total).collect::<Vec<_>>()
        );
        assert!(a.iter().all(|s| s.diversity.is_some()));

        // Zero diversity weight trains on the pure noise-prediction loss.
        let mut pure = tiny_model(&db, 31);
        pure.config.lambda_div = 0.0;
        let stats = pure.train(&db, &soft, 2, 1e-2, 7).unwrap();
        assert!(stats.iter().all(|s| s.diversity.is_none()));
        assert!(stats.iter().all(|s| (s.total - s.mse).abs() < 1e-15));
    }

    #[test]
    fn reverse_step_without_generator_is_deterministic() {
        let db = tiny_db(1, 8, 41);
        let model = tiny_model(&db, 41);
        let traj = &db.trajectories()[0];
        let h_t = model.encoder().point_embeddings(traj);
        let x = Array::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(42));
        let a = model.reverse_step(&h_t, &x, 50, None).unwrap();
        let b = model.reverse_step(&h_t, &x, 50, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), x.shape());
        // The final step is deterministic even with a generator, because
        // the posterior variance vanishes there.
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let c = model.reverse_step(&h_t, &x, 1, Some(&mut r1)).unwrap();
        let d = model.reverse_step(&h_t, &x, 1, Some(&mut r2)).unwrap();
        assert_eq!(c.data(), d.data());
        assert!(model.reverse_step(&h_t, &x, 0, None).is_err());
        assert!(model.reverse_step(&h_t, &x, 51, None).is_err());
    }

    #[test]
    fn amplified_labels_contract() {
        let db = tiny_db(1, 12, 51);
        let model = tiny_model(&db, 51);
        let traj = &db.trajectories()[0];
        let labels = model.infer_amplified(traj, 4, 13).unwrap();
        assert_eq!(labels.y.len(), 12);
        assert_eq!(labels.alpha, 4);
        assert_eq!(labels.y.iter().filter(|&&v| v == 1.0).count(), 4);
        assert!(labels.y.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(labels, model.infer_amplified(traj, 4, 13).unwrap());
        assert_ne!(labels, model.infer_amplified(traj, 4, 14).unwrap());
        // Boundaries: alpha of len-2 fits, len-1 and len do not.
        assert!(model.infer_amplified(traj, 10, 13).is_ok());
        assert!(model.infer_amplified(traj, 11, 13).is_err());
        assert!(model.infer_amplified(traj, 12, 13).is_err());
        assert!(model.infer_amplified(traj, 0, 13).is_err());
    }

    #[test]
    fn subsequence_check_rejects_foreign_points() {
        let db = tiny_db(1, 8, 61);
        let model = tiny_model(&db, 61);
        let traj = &db.trajectories()[0];
        let mut bad = every_other(traj);
        bad.points[1] = Point::new(999.0, 999.0, bad.points[1].t);
        let tape = Tape::inference();
        assert!(model.concat_encode(&tape, traj, &bad).is_err());
        let good = every_other(traj);
        let h = model.concat_encode(&tape, traj, &good).unwrap();
        assert_eq!(h.value().rows(), 8 + 4);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let db = tiny_db(2, 10, 71);
        let soft: BTreeMap<TrajId, Trajectory> = db
            .trajectories()
            .iter()
            .map(|t| (t.id.clone(), every_other(t)))
            .collect();
        let mut model = tiny_model(&db, 71);
        model.train(&db, &soft, 2, 1e-2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diff.ckpt");
        model.save(&path).unwrap();
        let loaded = DiffusionModel::load(&path).unwrap();
        let traj = &db.trajectories()[0];
        assert_eq!(
            model.infer_amplified(traj, 3, 5).unwrap(),
            loaded.infer_amplified(traj, 3, 5).unwrap()
        );
        assert_eq!(
            model.encoder().point_embeddings(traj).data(),
            loaded.encoder().point_embeddings(traj).data()
        );
    }
}
