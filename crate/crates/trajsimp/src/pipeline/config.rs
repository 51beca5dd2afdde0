//! One TOML file configures the whole pipeline; every field has a
//! default, so a partial (or missing) file is fine and command-line flags
//! can override the result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::importance::GatConfig;
use crate::mutual::MlSchedule;
use crate::workload::EvalSettings;

/// Input file format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `traj_id,lon,lat,t` rows.
    Csv,
    /// GeoLife per-trajectory files.
    Plt,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<DataFormat> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "plt" => Ok(DataFormat::Plt),
            other => Err(Error::InvalidArgument(format!(
                "unknown data format {other:?}; expected csv or plt"
            ))),
        }
    }
}

/// How coordinates are mapped to metres.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// Treat x/y as degrees, metre-scaled at the database's mean latitude.
    Equirectangular,
    /// Treat x/y as metres directly (planar/synthetic data).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Input path: a csv file, a plt file, or a directory of plt files.
    pub input: PathBuf,
    pub format: DataFormat,
    pub projection: ProjectionKind,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            input: PathBuf::from("data.csv"),
            format: DataFormat::Csv,
            projection: ProjectionKind::Equirectangular,
        }
    }
}

/// How the global point budget is selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Importance-weighted sampling without replacement (default).
    Weighted,
    /// Deterministic top-budget selection.
    TopM,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimplifySection {
    /// Fraction of points kept, in (0, 1].
    pub cr: f64,
    /// Blend between model importance and query importance, in [0, 1].
    pub delta: f64,
    pub mode: SelectionMode,
    pub seed: u64,
}

impl Default for SimplifySection {
    fn default() -> Self {
        SimplifySection {
            cr: 0.01,
            delta: 0.5,
            mode: SelectionMode::Weighted,
            seed: 7,
        }
    }
}

/// Granularity of the query-adjustment grid over the database extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cells_t: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            cells_x: 10,
            cells_y: 10,
            cells_t: 8,
        }
    }
}

/// The synthesized range-query workload driving the adjustment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustmentSection {
    pub query_count: usize,
    pub spatial_window_m: f64,
    pub temporal_window_s: i64,
    pub seed: u64,
}

impl Default for AdjustmentSection {
    fn default() -> Self {
        AdjustmentSection {
            query_count: 100,
            spatial_window_m: 2_000.0,
            temporal_window_s: 3_600,
            seed: 13,
        }
    }
}

/// Evaluation thresholds (mirroring [`EvalSettings`]) plus a per-type
/// query count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub edr_threshold_m: f64,
    pub tick_s: i64,
    pub link_threshold: usize,
    pub spatial_cell_m: f64,
    pub temporal_cell_s: i64,
    pub queries_per_type: usize,
    pub seed: u64,
}

impl EvaluationSection {
    /// The thresholds bundled for the evaluation routines.
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            edr_threshold_m: self.edr_threshold_m,
            tick_s: self.tick_s,
            link_threshold: self.link_threshold,
            spatial_cell_m: self.spatial_cell_m,
            temporal_cell_s: self.temporal_cell_s,
        }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let s = EvalSettings::default();
        EvaluationSection {
            edr_threshold_m: s.edr_threshold_m,
            tick_s: s.tick_s,
            link_threshold: s.link_threshold,
            spatial_cell_m: s.spatial_cell_m,
            temporal_cell_s: s.temporal_cell_s,
            queries_per_type: 100,
            seed: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Directory for checkpoints, logs, reports and exports.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
        }
    }
}

/// The full pipeline configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub simplify: SimplifySection,
    pub grid: GridSection,
    pub adjustment: AdjustmentSection,
    pub encoder: EncoderConfig,
    pub gat: GatConfig,
    pub diffusion: DiffConfig,
    pub training: MlSchedule,
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

impl PipelineConfig {
    /// Parses a TOML file; missing fields fall back to defaults.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.simplify.cr > 0.0 && self.simplify.cr <= 1.0) {
            return Err(Error::Config(format!(
                "compression rate {} must be in (0, 1]",
                self.simplify.cr
            )));
        }
        if !(0.0..=1.0).contains(&self.simplify.delta) {
            return Err(Error::Config(format!(
                "adjustment ratio {} must be in [0, 1]",
                self.simplify.delta
            )));
        }
        if self.grid.cells_x == 0 || self.grid.cells_y == 0 || self.grid.cells_t == 0 {
            return Err(Error::Config("grid needs at least one cell per axis".into()));
        }
        if self.adjustment.query_count == 0 {
            return Err(Error::Config("adjustment workload needs at least one query".into()));
        }
        if !(self.adjustment.spatial_window_m > 0.0) || self.adjustment.temporal_window_s <= 0 {
            return Err(Error::Config("adjustment windows must have positive extent".into()));
        }
        if self.evaluation.queries_per_type == 0 {
            return Err(Error::Config("evaluation needs at least one query per type".into()));
        }
        self.training.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.simplify.delta, 0.5);
        assert_eq!(cfg.adjustment.query_count, 100);
        assert_eq!(
            (cfg.grid.cells_x, cfg.grid.cells_y, cfg.grid.cells_t),
            (10, 10, 8)
        );
        let text = cfg.to_toml();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let text = r#"
            [simplify]
            cr = 0.02
            delta = 1.0

            [data]
            input = "somewhere.csv"
            projection = "identity"
        "#;
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.simplify.cr, 0.02);
        assert_eq!(cfg.simplify.delta, 1.0);
        assert_eq!(cfg.data.projection, ProjectionKind::Identity);
        assert_eq!(cfg.data.format, DataFormat::Csv);
        assert_eq!(cfg.encoder.dim, 16);
        assert_eq!(cfg.training.warmup_epochs, 20);
    }

    #[test]
    fn bad_values_and_unknown_keys_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.simplify.cr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.simplify.delta = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.grid.cells_t = 0;
        assert!(cfg.validate().is_err());

        let bad: std::result::Result<PipelineConfig, _> = toml::from_str("[simplify]\ncrr = 1.0");
        assert!(bad.is_err());
    }

    #[test]
    fn load_reports_missing_file_with_path() {
        let err = PipelineConfig::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(err.to_string().contains("cfg.toml"));
    }
}
