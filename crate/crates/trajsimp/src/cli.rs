//! Command-line front end over the pipeline. Every subcommand reads the
//! optional TOML config first and then applies its own flags on top, so a
//! flag always wins over the file.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::baselines::{BaselineMethod, BaselineSpec};
use crate::dist::ErrorKind;
use crate::error::{Error, ErrorCategory, Result};
use crate::importance::GnnTs;
use crate::mutual::{pretrain_importance, run_mutual_learning};
use crate::pipeline::config::{DataFormat, PipelineConfig, SelectionMode};
use crate::pipeline::io::{self, IngestReport};
use crate::pipeline::{
    baseline_simplify, build_models, evaluate, evaluation_workloads, marked_grid, projection_for,
    simplify,
};
use crate::traj::{validate_database, SimplifiedDatabase, TrajectoryDatabase};

/// Query-driven trajectory simplification.
#[derive(Debug, Parser)]
#[command(name = "trajsimp", version, about)]
pub struct Cli {
    /// TOML config file; omitted sections use built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a corpus, validate it and print its statistics.
    Ingest {
        /// Corpus path (file, or directory for plt).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Source format: csv or plt.
        #[arg(long)]
        format: Option<String>,
        /// Also write the parsed corpus back out as normalized csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pretraining of the importance model (stage one only).
    Pretrain {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// Training epochs for the warm-up stage.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full mutual learning of the importance and amplifier models.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// Label-exchange rounds after the warm-up stage.
        #[arg(long)]
        rounds: Option<usize>,
        /// Epochs per training leg.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simplify the corpus with a trained importance model.
    Simplify {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// Importance model checkpoint (default: <output dir>/gnn.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Compression rate in (0, 1].
        #[arg(long)]
        cr: Option<f64>,
        /// Query-importance blend in [0, 1]; 0 disables adjustment.
        #[arg(long)]
        delta: Option<f64>,
        /// Point selection: weighted or top-m.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output csv (default: <output dir>/simplified.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a classical simplification baseline at the same budget.
    Baseline {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// top-down-each, top-down-whole, bottom-up-each or uniform.
        #[arg(long)]
        method: String,
        /// Error metric the method minimizes: sed or ped.
        #[arg(long, default_value = "sed")]
        error: String,
        #[arg(long)]
        cr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output csv (default: <output dir>/baseline-<method>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a simplified corpus against its original.
    Evaluate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// The simplified corpus (csv).
        #[arg(long)]
        simplified: PathBuf,
        /// Report JSON path (default: <output dir>/report.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Convert a corpus to csv or geojson.
    Export {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Source format: csv or plt.
        #[arg(long)]
        format: Option<String>,
        /// Target format: csv or geojson.
        #[arg(long)]
        to: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit code for an error category: usage problems exit 2, data
/// problems 3, filesystem problems 4 and internal faults 5.
pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::Internal => 5,
    }
}

fn parse_mode(s: &str) -> Result<SelectionMode> {
    match s {
        "weighted" => Ok(SelectionMode::Weighted),
        "top-m" => Ok(SelectionMode::TopM),
        other => Err(Error::InvalidArgument(format!(
            "unknown selection mode {other:?}; expected weighted or top-m"
        ))),
    }
}

fn parse_method(s: &str) -> Result<BaselineMethod> {
    match s {
        "top-down-each" => Ok(BaselineMethod::TopDownEach),
        "top-down-whole" => Ok(BaselineMethod::TopDownWhole),
        "bottom-up-each" => Ok(BaselineMethod::BottomUpEach),
        "uniform" => Ok(BaselineMethod::Uniform),
        other => Err(Error::InvalidArgument(format!(
            "unknown baseline method {other:?}; expected top-down-each, \
             top-down-whole, bottom-up-each or uniform"
        ))),
    }
}

fn parse_error_kind(s: &str) -> Result<ErrorKind> {
    match s {
        "sed" => Ok(ErrorKind::Sed),
        "ped" => Ok(ErrorKind::Ped),
        other => Err(Error::InvalidArgument(format!(
            "unknown error metric {other:?}; expected sed or ped"
        ))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn apply_data_overrides(
    cfg: &mut PipelineConfig,
    input: &Option<PathBuf>,
    format: &Option<String>,
) -> Result<()> {
    if let Some(p) = input {
        cfg.data.input = p.clone();
    }
    if let Some(f) = format {
        cfg.data.format = f.parse()?;
    }
    Ok(())
}

fn load_corpus(cfg: &PipelineConfig) -> Result<IngestReport> {
    io::ingest(&cfg.data.input, cfg.data.format)
}

fn ensure_output_dir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io(&cfg.output.dir, e))
}

fn write_corpus_csv(db: &TrajectoryDatabase, path: &Path) -> Result<()> {
    io::export_csv(db, path)?;
    println!(
        "wrote {} trajectories ({} points) -> {}",
        db.len(),
        db.total_points(),
        path.display()
    );
    Ok(())
}

fn print_simplified(simp: &SimplifiedDatabase, original_points: usize) {
    println!(
        "kept {} of {} points (cr {:.4})",
        simp.total_points(),
        original_points,
        simp.total_points() as f64 / original_points as f64
    );
}

/// Runs one parsed command to completion.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, format, out } => {
            let mut cfg = load_config(&cli.config)?;
            apply_data_overrides(&mut cfg, &input, &format)?;
            let report = load_corpus(&cfg)?;
            println!(
                "read {} file(s): {} rows ({} skipped)",
                report.files_read, report.rows_read, report.rows_skipped
            );
            println!(
                "{} trajectories, {} points",
                report.db.len(),
                report.db.total_points()
            );
            let validation = validate_database(&report.db);
            if validation.is_clean() {
                println!("validation: clean");
            } else {
                println!("validation: {} violation(s)", validation.violations.len());
                for v in validation.violations.iter().take(5) {
                    println!("  {v:?}");
                }
            }
            if let Some(out) = out {
                write_corpus_csv(&report.db, &out)?;
            }
            Ok(())
        }
        Command::Pretrain {
            input,
            format,
            epochs,
            seed,
        } => {
            let mut cfg = load_config(&cli.config)?;
            apply_data_overrides(&mut cfg, &input, &format)?;
            if let Some(e) = epochs {
                cfg.training.warmup_epochs = e;
            }
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            cfg.validate()?;
            let db = load_corpus(&cfg)?.db;
            let (mut gnn, _) = build_models(&db, &cfg)?;
            let log = pretrain_importance(&db, &mut gnn, &cfg.training)?;
            ensure_output_dir(&cfg)?;
            let model_path = cfg.output.dir.join("gnn.ckpt");
            let log_path = cfg.output.dir.join("train.log");
            gnn.save(&model_path)?;
            log.save(&log_path)?;
            println!(
                "pretrained importance model for {} epochs on {} trajectories",
                cfg.training.warmup_epochs,
                db.len()
            );
            println!("model -> {}", model_path.display());
            println!("log   -> {}", log_path.display());
            Ok(())
        }
        Command::Train {
            input,
            format,
            rounds,
            epochs,
            seed,
        } => {
            let mut cfg = load_config(&cli.config)?;
            apply_data_overrides(&mut cfg, &input, &format)?;
            if let Some(r) = rounds {
                cfg.training.rounds = r;
            }
            if let Some(e) = epochs {
                cfg.training.warmup_epochs = e;
            }
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            cfg.validate()?;
            let db = load_corpus(&cfg)?.db;
            let (gnn, diff) = build_models(&db, &cfg)?;
            let outcome = run_mutual_learning(&db, gnn, diff, &cfg.training)?;
            ensure_output_dir(&cfg)?;
            let gnn_path = cfg.output.dir.join("gnn.ckpt");
            let diff_path = cfg.output.dir.join("diff.ckpt");
            let log_path = cfg.output.dir.join("train.log");
            outcome.gnn.save(&gnn_path)?;
            outcome.diff.save(&diff_path)?;
            outcome.log.save(&log_path)?;
            println!(
                "trained {} round(s) of mutual learning ({} epochs per leg) on {} trajectories",
                cfg.training.rounds,
                cfg.training.warmup_epochs,
                db.len()
            );
            println!("importance model -> {}", gnn_path.display());
            println!("amplifier model  -> {}", diff_path.display());
            println!("log              -> {}", log_path.display());
            Ok(())
        }
        Command::Simplify {
            input,
            format,
            model,
            cr,
            delta,
            mode,
            seed,
            out,
        } => {
            let mut cfg = load_config(&cli.config)?;
            apply_data_overrides(&mut cfg, &input, &format)?;
            if let Some(v) = cr {
                cfg.simplify.cr = v;
            }
            if let Some(v) = delta {
                cfg.simplify.delta = v;
            }
            if let Some(m) = &mode {
                cfg.simplify.mode = parse_mode(m)?;
            }
            if let Some(s) = seed {
                cfg.simplify.seed = s;
            }
            cfg.validate()?;
            let db = load_corpus(&cfg)?.db;
            let model_path = model.unwrap_or_else(|| cfg.output.dir.join("gnn.ckpt"));
            let gnn = GnnTs::load(&model_path)?;
            let grid = if cfg.simplify.delta > 0.0 {
                Some(marked_grid(&db, &cfg)?)
            } else {
                None
            };
            let simp = simplify(
                &db,
                &gnn,
                grid.as_ref(),
                cfg.simplify.cr,
                cfg.simplify.delta,
                cfg.simplify.mode,
                cfg.simplify.seed,
            )?;
            print_simplified(&simp, db.total_points());
            ensure_output_dir(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.join("simplified.csv"));
            write_corpus_csv(simp.database(), &out)
        }
        Command::Baseline {
            input,
            format,
            method,
            error,
            cr,
            seed,
            out,
        } => {
            let mut cfg = load_config(&cli.config)?;
            apply_data_overrides(&mut cfg, &input, &format)?;
            if let Some(v) = cr {
                cfg.simplify.cr = v;
            }
            if let Some(s) = seed {
                cfg.simplify.seed = s;
            }
            cfg.validate()?;
            let spec = BaselineSpec {
                method: parse_method(&method)?,
                kind: parse_error_kind(&error)?,
                compression_rate: cfg.simplify.cr,
                seed: cfg.simplify.seed,
            };
            let db = load_corpus(&cfg)?.db;
            let proj = projection_for(&db, cfg.data.projection);
            let simp = baseline_simplify(&db, &spec, &proj)?;
            print_simplified(&simp, db.total_points());
            ensure_output_dir(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.join(format!("baseline-{method}.csv")));
            write_corpus_csv(simp.database(), &out)
        }
        Command::Evaluate {
            input,
            format,
            simplified,
            report,
        } => {
            let mut cfg = load_config(&cli.config)?;
            apply_data_overrides(&mut cfg, &input, &format)?;
            let original = load_corpus(&cfg)?.db;
            let simp_db = io::ingest(&simplified, DataFormat::Csv)?.db;
            let cr = simp_db.total_points() as f64 / original.total_points() as f64;
            let simp = SimplifiedDatabase::from_databases(&original, &simp_db, cr)?;
            let proj = projection_for(&original, cfg.data.projection);
            let workloads = evaluation_workloads(&original, &cfg.evaluation)?;
            let result = evaluate(
                &original,
                &simp,
                &workloads,
                &cfg.evaluation.settings(),
                &proj,
            )?;
            print!("{}", result.table());
            ensure_output_dir(&cfg)?;
            let path = report.unwrap_or_else(|| cfg.output.dir.join("report.json"));
            io::atomic_write(&path, result.to_json().as_bytes())?;
            println!("\nreport -> {}", path.display());
            Ok(())
        }
        Command::Export {
            input,
            format,
            to,
            out,
        } => {
            let mut cfg = load_config(&cli.config)?;
            apply_data_overrides(&mut cfg, &input, &format)?;
            let db = load_corpus(&cfg)?.db;
            match to.as_str() {
                "csv" => io::export_csv(&db, &out)?,
                "geojson" => io::export_geojson(&db, &out)?,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown export format {other:?}; expected csv or geojson"
                    )))
                }
            }
            println!(
                "exported {} trajectories ({} points) as {} -> {}",
                db.len(),
                db.total_points(),
                to,
                out.display()
            );
            Ok(())
        }
    }
}
