//! Two-stage mutual-learning orchestration between the importance model
//! and the diffusion label amplifier.
//!
//! Stage 1 trains the importance model on its self-supervised contrastive
//! objective alone, then draws a high-retention simplified corpus from the
//! learned scores ("soft labels"). Stage 2 alternates: the diffusion model
//! trains on the soft labels, amplifies them into sparse keep/drop labels,
//! the importance model trains against those labels alongside its
//! contrastive objective, and the soft labels are regenerated from the
//! updated scores. Each leg runs the same number of warm-up epochs before
//! the models exchange signals again.
//!
//! Everything is deterministic under the schedule's seed: each phase of
//! each round derives its own sub-seed from it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffEpochStats, DiffusionModel};
use crate::error::{Error, Result};
use crate::importance::{database_embeddings, GnnEpochStats, GnnTs};
use crate::sampling::weighted_indices_without_replacement;
use crate::traj::{compute_budget, TrajId, Trajectory, TrajectoryDatabase};

/// Alternating-training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlSchedule {
    /// Warm-up epochs each model trains between signal exchanges; stage 1
    /// runs this many contrastive-only epochs as well. Must be at least 1.
    pub warmup_epochs: usize,
    /// Number of stage-2 exchange rounds; 0 stops after stage 1.
    pub rounds: usize,
    /// Retention fraction of the soft-label corpus, in `[0.5, 1)`.
    pub cr_high: f64,
    /// Amplified keep-label count per trajectory; capped at two below each
    /// trajectory's length.
    pub alpha: usize,
    /// Diversity weight for diffusion training.
    pub lambda_div: f64,
    /// Label-matching weight for importance training.
    pub lambda_labels: f64,
    /// Learning rate shared by both models.
    pub lr: f64,
    /// Master seed; every phase derives its own sub-seed from it.
    pub seed: u64,
}

impl Default for MlSchedule {
    fn default() -> Self {
        MlSchedule {
            warmup_epochs: 20,
            rounds: 2,
            cr_high: 0.5,
            alpha: 20,
            lambda_div: crate::diffusion::LAMBDA_DIVERSITY,
            lambda_labels: crate::importance::LAMBDA_LABELS,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl MlSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs == 0 {
            return Err(Error::Config("warm-up epoch count must be at least 1".into()));
        }
        if !(0.5..1.0).contains(&self.cr_high) {
            return Err(Error::Config(format!(
                "soft-label retention {} must be in [0.5, 1)",
                self.cr_high
            )));
        }
        if self.alpha == 0 {
            return Err(Error::Config("amplified label count must be positive".into()));
        }
        if self.lambda_div < 0.0 || self.lambda_labels < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log. Only the fields relevant to the record's
/// stage are set; the log serializes as line-delimited JSON.
#[derive(Clone, Debug, Serialize)]
pub struct LogRecord {
    pub stage: String,
    pub round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl LogRecord {
    fn bare(stage: &str, round: usize) -> LogRecord {
        LogRecord {
            stage: stage.to_string(),
            round,
            epoch: None,
            contrastive: None,
            label_match: None,
            mse: None,
            diversity: None,
            total: None,
            note: None,
        }
    }

    fn importance(stage: &str, round: usize, epoch: usize, s: &GnnEpochStats) -> LogRecord {
        LogRecord {
            epoch: Some(epoch),
            contrastive: Some(s.contrastive),
            label_match: s.label_match,
            total: Some(s.total),
            ..Self::bare(stage, round)
        }
    }

    fn diffusion(round: usize, epoch: usize, s: &DiffEpochStats) -> LogRecord {
        LogRecord {
            epoch: Some(epoch),
            mse: Some(s.mse),
            diversity: s.diversity,
            total: Some(s.total),
            ..Self::bare("diffusion", round)
        }
    }

    fn exchange(round: usize, note: &str) -> LogRecord {
        LogRecord {
            note: Some(note.to_string()),
            ..Self::bare("exchange", round)
        }
    }
}

/// Append-only training log.
#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Both trained models plus the log of how they got there.
pub struct MlOutcome {
    pub gnn: GnnTs,
    pub diff: DiffusionModel,
    pub log: TrainingLog,
}

const PHASE_STAGE1: u64 = 1;
const PHASE_SOFT: u64 = 2;
const PHASE_DIFF: u64 = 3;
const PHASE_AMPLIFY: u64 = 4;
const PHASE_GNN: u64 = 5;

/// Independent sub-seed for one phase of one round (splitmix-style
/// mixing), so reordering or skipping phases never shifts another phase's
/// randomness.
fn phase_seed(seed: u64, round: usize, phase: u64) -> u64 {
    let mut z = seed
        ^ (round as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ phase.wrapping_mul(0xd1b54a32d192ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Draws a high-retention simplified corpus from the model's current
/// importance scores: per trajectory, `round(cr_high * |T|)` points sampled
/// by normalized importance without replacement, order preserved.
pub fn soft_labels(
    gnn: &GnnTs,
    db: &TrajectoryDatabase,
    cr_high: f64,
    seed: u64,
) -> Result<BTreeMap<TrajId, Trajectory>> {
    if !(0.5..1.0).contains(&cr_high) {
        return Err(Error::InvalidArgument(format!(
            "soft-label retention {cr_high} must be in [0.5, 1)"
        )));
    }
    let scores = gnn.importance(db);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for traj in db.trajectories() {
        let m = compute_budget(traj.len(), cr_high)?;
        let weights: Vec<f64> = scores
            .get(&traj.id)
            .expect("importance covers every trajectory")
            .iter()
            .map(|s| s.normalized)
            .collect();
        let kept = weighted_indices_without_replacement(&weights, m, &mut rng)?;
        let points = kept.iter().map(|&i| traj.points[i]).collect();
        out.insert(traj.id.clone(), Trajectory::new(traj.id.clone(), points));
    }
    Ok(out)
}

/// Amplified keep/drop labels for every trajectory. The per-trajectory
/// keep count is `alpha` capped at `|T| - 2`; trajectories too short for
/// any amplified label (fewer than three points) get all-zero labels.
pub fn amplified_labels(
    diff: &DiffusionModel,
    db: &TrajectoryDatabase,
    alpha: usize,
    seed: u64,
) -> Result<BTreeMap<TrajId, Vec<f64>>> {
    if alpha == 0 {
        return Err(Error::InvalidArgument(
            "amplified label count must be positive".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for traj in db.trajectories() {
        let capped = alpha.min(traj.len().saturating_sub(2));
        let y = if capped == 0 {
            vec![0.0; traj.len()]
        } else {
            diff.infer_amplified(traj, capped, seed)?.y
        };
        out.insert(traj.id.clone(), y);
    }
    Ok(out)
}

/// Stage-1 contrastive training on its own: exactly what
/// [`run_mutual_learning`] does before the first label exchange, down to
/// the derived seed, so a pretrained model continues identically.
pub fn pretrain_importance(
    db: &TrajectoryDatabase,
    gnn: &mut GnnTs,
    schedule: &MlSchedule,
) -> Result<TrainingLog> {
    schedule.validate()?;
    if db.is_empty() {
        return Err(Error::EmptyInput("no trajectories to train on".into()));
    }
    let embeddings = database_embeddings(&gnn.encoder, db);
    let stats = gnn.train(
        db,
        &embeddings,
        None,
        schedule.warmup_epochs,
        schedule.lr,
        schedule.lambda_labels,
        phase_seed(schedule.seed, 0, PHASE_STAGE1),
    )?;
    let mut log = TrainingLog::default();
    for (e, s) in stats.iter().enumerate() {
        log.push(LogRecord::importance("stage1", 0, e, s));
    }
    Ok(log)
}

/// Runs the full two-stage loop and returns both trained models with the
/// training log. `rounds = 0` yields the stage-1 importance model and the
/// diffusion model untouched.
pub fn run_mutual_learning(
    db: &TrajectoryDatabase,
    mut gnn: GnnTs,
    mut diff: DiffusionModel,
    schedule: &MlSchedule,
) -> Result<MlOutcome> {
    schedule.validate()?;
    if db.is_empty() {
        return Err(Error::EmptyInput("no trajectories to train on".into()));
    }
    diff.set_lambda_div(schedule.lambda_div)?;
    let mut log = TrainingLog::default();
    let i = schedule.warmup_epochs;
    let seed = schedule.seed;

    // Stage 1: contrastive-only importance training. The importance
    // model's encoder is frozen, so its point embeddings are computed once
    // and reused for every stage-2 leg as well.
    let embeddings = database_embeddings(&gnn.encoder, db);
    let stats = gnn.train(
        db,
        &embeddings,
        None,
        i,
        schedule.lr,
        schedule.lambda_labels,
        phase_seed(seed, 0, PHASE_STAGE1),
    )?;
    for (e, s) in stats.iter().enumerate() {
        log.push(LogRecord::importance("stage1", 0, e, s));
    }

    let mut soft = soft_labels(&gnn, db, schedule.cr_high, phase_seed(seed, 0, PHASE_SOFT))?;
    log.push(LogRecord::exchange(0, "soft labels generated"));

    for round in 1..=schedule.rounds {
        let stats = diff.train(db, &soft, i, schedule.lr, phase_seed(seed, round, PHASE_DIFF))?;
        for (e, s) in stats.iter().enumerate() {
            log.push(LogRecord::diffusion(round, e, s));
        }

        let labels = amplified_labels(&diff, db, schedule.alpha, phase_seed(seed, round, PHASE_AMPLIFY))?;
        log.push(LogRecord::exchange(round, "amplified labels inferred"));

        let stats = gnn.train(
            db,
            &embeddings,
            Some(&labels),
            i,
            schedule.lr,
            schedule.lambda_labels,
            phase_seed(seed, round, PHASE_GNN),
        )?;
        for (e, s) in stats.iter().enumerate() {
            log.push(LogRecord::importance("importance", round, e, s));
        }

        soft = soft_labels(&gnn, db, schedule.cr_high, phase_seed(seed, round, PHASE_SOFT))?;
        log.push(LogRecord::exchange(round, "soft labels regenerated"));
    }

    Ok(MlOutcome { gnn, diff, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffConfig;
    use crate::encoder::{EncoderConfig, PointEncoder};
    use crate::geo::Projection;
    use crate::importance::GatConfig;
    use crate::traj::Point;
    use rand::Rng;

    fn small_db(num: usize, len: usize, seed: u64) -> TrajectoryDatabase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..num)
            .map(|k| {
                let mut x = 0.0;
                let mut y = k as f64 * 8.0;
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

    fn enc_config() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            window: 6,
            cell_m: 100.0,
        }
    }

    fn small_gnn(db: &TrajectoryDatabase, seed: u64) -> GnnTs {
        let encoder = PointEncoder::new(db, enc_config(), &Projection::identity(), seed).unwrap();
        let gat = GatConfig {
            layers: 1,
            heads: 2,
            head_dim: 8,
            neighbors: 4,
        };
        GnnTs::new(encoder, gat, seed).unwrap()
    }

    fn small_diff(db: &TrajectoryDatabase, seed: u64) -> DiffusionModel {
        let diff = DiffConfig {
            layers: 1,
            heads: 2,
            steps: 50,
            lambda_div: 0.5,
        };
        DiffusionModel::new(db, enc_config(), diff, &Projection::identity(), seed).unwrap()
    }

    fn small_schedule() -> MlSchedule {
        MlSchedule {
            warmup_epochs: 2,
            rounds: 2,
            cr_high: 0.5,
            alpha: 4,
            lambda_div: 0.5,
            lambda_labels: 0.5,
            lr: 1e-2,
            seed: 11,
        }
    }

    fn norm_scores(gnn: &GnnTs, db: &TrajectoryDatabase) -> Vec<f64> {
        gnn.importance(db)
            .iter()
            .flat_map(|(_, s)| s.iter().map(|v| v.normalized).collect::<Vec<_>>())
            .collect()
    }

    fn assert_subsequence(traj: &Trajectory, sub: &Trajectory) {
        let mut it = traj.points.iter();
        for p in &sub.points {
            assert!(it.any(|q| q == p), "point not found in order");
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(MlSchedule::default().validate().is_ok());
        let mut s = MlSchedule::default();
        s.warmup_epochs = 0;
        assert!(s.validate().is_err());
        let mut s = MlSchedule::default();
        s.cr_high = 0.4;
        assert!(s.validate().is_err());
        s.cr_high = 1.0;
        assert!(s.validate().is_err());
        let mut s = MlSchedule::default();
        s.lr = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn soft_labels_hold_budget_order_and_determinism() {
        let db = small_db(2, 11, 5);
        let gnn = small_gnn(&db, 5);
        let soft = soft_labels(&gnn, &db, 0.5, 9).unwrap();
        for traj in db.trajectories() {
            let s = &soft[&traj.id];
            // round-half-up of 0.5 * 11.
            assert_eq!(s.len(), 6);
            assert_subsequence(traj, s);
        }
        assert_eq!(
            soft[&db.trajectories()[0].id].points,
            soft_labels(&gnn, &db, 0.5, 9).unwrap()[&db.trajectories()[0].id].points
        );

        // Near-1 retention keeps almost everything.
        let db100 = small_db(1, 100, 6);
        let gnn100 = small_gnn(&db100, 6);
        let soft = soft_labels(&gnn100, &db100, 0.99, 1).unwrap();
        assert_eq!(soft[&db100.trajectories()[0].id].len(), 99);

        assert!(soft_labels(&gnn, &db, 0.49, 1).is_err());
        assert!(soft_labels(&gnn, &db, 1.0, 1).is_err());
    }

    #[test]
    fn amplified_labels_cap_at_trajectory_length() {
        let trajs = vec![
            Trajectory::new("a", (0..30).map(|i| Point::new(i as f64, 0.1 * i as f64, i as i64)).collect()),
            Trajectory::new("b", (0..3).map(|i| Point::new(i as f64, 5.0, 100 + i as i64)).collect()),
            Trajectory::new("c", (0..2).map(|i| Point::new(i as f64, 9.0, 200 + i as i64)).collect()),
        ];
        let db = TrajectoryDatabase::new(trajs).unwrap();
        let diff = small_diff(&db, 8);
        let labels = amplified_labels(&diff, &db, 10, 3).unwrap();
        let ones = |id: &str| {
            labels[&TrajId::new(id)]
                .iter()
                .filter(|&&v| v == 1.0)
                .count()
        };
        assert_eq!(ones("a"), 10);
        assert_eq!(ones("b"), 1); // capped at 3 - 2
        assert_eq!(ones("c"), 0); // too short for any label
        assert_eq!(labels[&TrajId::new("c")], vec![0.0, 0.0]);
        assert!(amplified_labels(&diff, &db, 0, 3).is_err());
    }

    #[test]
    fn zero_rounds_equals_stage_one_only() {
        let db = small_db(2, 10, 21);
        let schedule = MlSchedule {
            rounds: 0,
            ..small_schedule()
        };
        let outcome =
            run_mutual_learning(&db, small_gnn(&db, 21), small_diff(&db, 22), &schedule).unwrap();

        // The importance model matches a by-hand stage-1 run with the same
        // derived seed.
        let mut manual = small_gnn(&db, 21);
        let embeddings = database_embeddings(&manual.encoder, &db);
        manual
            .train(
                &db,
                &embeddings,
                None,
                schedule.warmup_epochs,
                schedule.lr,
                schedule.lambda_labels,
                phase_seed(schedule.seed, 0, PHASE_STAGE1),
            )
            .unwrap();
        assert_eq!(norm_scores(&outcome.gnn, &db), norm_scores(&manual, &db));

        // The diffusion model is untouched: same labels as a fresh one.
        let fresh = small_diff(&db, 22);
        let traj = &db.trajectories()[0];
        assert_eq!(
            outcome.diff.infer_amplified(traj, 3, 7).unwrap(),
            fresh.infer_amplified(traj, 3, 7).unwrap()
        );

        // Log: stage-1 epochs plus the single soft-label exchange.
        let stages: Vec<&str> = outcome.log.records().iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(stages, vec!["stage1", "stage1", "exchange"]);
    }

    #[test]
    fn two_rounds_produce_structured_deterministic_log() {
        let db = small_db(3, 12, 31);
        let schedule = small_schedule();
        let run = || {
            let outcome =
                run_mutual_learning(&db, small_gnn(&db, 31), small_diff(&db, 32), &schedule)
                    .unwrap();
            let scores = norm_scores(&outcome.gnn, &db);
            (outcome, scores)
        };
        let (a, scores_a) = run();
        let (b, scores_b) = run();
        assert_eq!(scores_a, scores_b);
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());

        // Expected phase structure: 2 stage-1 epochs, 1 exchange, then per
        // round 2 diffusion epochs, 1 exchange, 2 importance epochs, 1
        // exchange.
        let stages: Vec<&str> = a.log.records().iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(
            stages,
            vec![
                "stage1", "stage1", "exchange", //
                "diffusion", "diffusion", "exchange", "importance", "importance", "exchange",
                "diffusion", "diffusion", "exchange", "importance", "importance", "exchange",
            ]
        );
        // Importance records in stage 2 carry the label-matching term.
        for r in a.log.records() {
            match r.stage.as_str() {
                "stage1" => assert!(r.label_match.is_none() && r.contrastive.is_some()),
                "importance" => assert!(r.label_match.is_some()),
                "diffusion" => assert!(r.mse.is_some() && r.total.is_some()),
                _ => {}
            }
        }
        // Every line is standalone JSON.
        for line in a.log.to_jsonl().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("stage").is_some() && v.get("round").is_some());
        }

        // Both checkpoints round-trip bit-identically after training.
        let dir = tempfile::tempdir().unwrap();
        let gnn_path = dir.path().join("gnn.ckpt");
        let diff_path = dir.path().join("diff.ckpt");
        a.gnn.save(&gnn_path).unwrap();
        a.diff.save(&diff_path).unwrap();
        let gnn2 = GnnTs::load(&gnn_path).unwrap();
        let diff2 = DiffusionModel::load(&diff_path).unwrap();
        assert_eq!(scores_a, norm_scores(&gnn2, &db));
        let traj = &db.trajectories()[0];
        assert_eq!(
            a.diff.infer_amplified(traj, 4, 9).unwrap(),
            diff2.infer_amplified(traj, 4, 9).unwrap()
        );
    }

    #[test]
    fn zero_label_weight_reproduces_contrastive_dynamics() {
        let db = small_db(2, 10, 41);
        let labels: BTreeMap<TrajId, Vec<f64>> = db
            .trajectories()
            .iter()
            .map(|t| {
                let mut y = vec![0.0; t.len()];
                y[2] = 1.0;
                y[7] = 1.0;
                (t.id.clone(), y)
            })
            .collect();

        let mut with_labels = small_gnn(&db, 41);
        let embeddings = database_embeddings(&with_labels.encoder, &db);
        with_labels
            .train(&db, &embeddings, Some(&labels), 3, 1e-2, 0.0, 5)
            .unwrap();

        let mut without = small_gnn(&db, 41);
        without.train(&db, &embeddings, None, 3, 1e-2, 0.0, 5).unwrap();

        assert_eq!(norm_scores(&with_labels, &db), norm_scores(&without, &db));
    }

    #[test]
    fn training_log_saves_line_delimited_file() {
        let mut log = TrainingLog::default();
        log.push(LogRecord::exchange(1, "soft labels regenerated"));
        log.push(LogRecord::importance(
            "importance",
            1,
            0,
            &GnnEpochStats {
                contrastive: 1.5,
                label_match: Some(0.25),
                total: 1.625,
            },
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.log");
        log.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, log.to_jsonl());
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"label_match\":0.25"));
    }
}
