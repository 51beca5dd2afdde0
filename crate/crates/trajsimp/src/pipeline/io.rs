//! Trajectory file input and output.
//!
//! The canonical interchange format is csv with header `traj_id,lon,lat,t`
//! (UTF-8, `.` decimal, LF newlines, `t` in epoch seconds). Floats are
//! written with the shortest representation that parses back to the same
//! bits, so export followed by ingest reproduces a database exactly.
//! GeoLife `plt` files are supported read-only; GeoJSON is supported
//! write-only for external viewers. All writes go to a temporary file in
//! the target directory first and are renamed into place.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::config::DataFormat;
use crate::traj::{Point, Trajectory, TrajectoryDatabase};

/// Ingest result: the database plus what was left behind. Rows are
/// skipped when they fail to parse, carry non-finite coordinates, or step
/// backwards (or sideways) in time within their trajectory. One-point
/// trajectories are kept; validation flags them separately.
#[derive(Debug)]
pub struct IngestReport {
    pub db: TrajectoryDatabase,
    pub files_read: usize,
    pub rows_read: usize,
    pub rows_skipped: usize,
}

pub fn ingest(path: &Path, format: DataFormat) -> Result<IngestReport> {
    match format {
        DataFormat::Csv => ingest_csv(path),
        DataFormat::Plt => ingest_plt(path),
    }
}

/// Reads the canonical csv format produced by [`export_csv`].
pub fn ingest_csv(path: &Path) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.display().to_string(),
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let want = ["traj_id", "lon", "lat", "t"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!("expected header traj_id,lon,lat,t, found {headers:?}"),
        });
    }

    let mut groups = Grouper::default();
    let mut rows_read = 0usize;
    let mut rows_skipped = 0usize;
    for record in reader.records() {
        rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                rows_skipped += 1;
                continue;
            }
        };
        let parsed = (|| {
            if record.len() != 4 {
                return None;
            }
            let id = record.get(0)?;
            if id.is_empty() {
                return None;
            }
            let lon: f64 = record.get(1)?.parse().ok()?;
            let lat: f64 = record.get(2)?.parse().ok()?;
            let t: i64 = record.get(3)?.parse().ok()?;
            if !lon.is_finite() || !lat.is_finite() {
                return None;
            }
            Some((id.to_string(), Point::new(lon, lat, t)))
        })();
        match parsed {
            Some((id, p)) => {
                if !groups.push(id, p) {
                    rows_skipped += 1;
                }
            }
            None => rows_skipped += 1,
        }
    }
    Ok(IngestReport {
        db: groups.finish(path)?,
        files_read: 1,
        rows_read,
        rows_skipped,
    })
}

/// Reads a GeoLife `plt` file, or every `*.plt` under a directory (sorted
/// by path, so ingest order is stable). Each file becomes one trajectory
/// whose id is its path relative to the ingest root, without the
/// extension.
pub fn ingest_plt(path: &Path) -> Result<IngestReport> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let files: Vec<std::path::PathBuf> = if meta.is_dir() {
        let mut found = Vec::new();
        for entry in walkdir::WalkDir::new(path) {
            let entry = entry.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            if entry.file_type().is_file()
                && entry.path().extension().is_some_and(|x| x == "plt")
            {
                found.push(entry.path().to_path_buf());
            }
        }
        found.sort();
        found
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no plt files under {}",
            path.display()
        )));
    }

    let root: &Path = if meta.is_dir() {
        path
    } else {
        path.parent().unwrap_or(Path::new(""))
    };
    let mut trajs = Vec::new();
    let mut rows_read = 0usize;
    let mut rows_skipped = 0usize;
    for file in &files {
        let rel = file.strip_prefix(root).unwrap_or(file);
        let id = rel
            .with_extension("")
            .to_string_lossy()
            .replace(std::path::MAIN_SEPARATOR, "/");
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let mut points: Vec<Point> = Vec::new();
        for line in text.lines().skip(6) {
            if line.trim().is_empty() {
                continue;
            }
            rows_read += 1;
            match parse_plt_line(line) {
                Some(p) if points.last().is_none_or(|prev| p.t > prev.t) => points.push(p),
                _ => rows_skipped += 1,
            }
        }
        if !points.is_empty() {
            trajs.push(Trajectory::new(id, points));
        }
    }
    if trajs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no valid trajectories in {}",
            path.display()
        )));
    }
    Ok(IngestReport {
        db: TrajectoryDatabase::new(trajs)?,
        files_read: files.len(),
        rows_read,
        rows_skipped,
    })
}

/// `lat,lon,0,alt,days,YYYY-MM-DD,HH:MM:SS` with the date/time in UTC.
fn parse_plt_line(line: &str) -> Option<Point> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 7 {
        return None;
    }
    let lat: f64 = fields[0].trim().parse().ok()?;
    let lon: f64 = fields[1].trim().parse().ok()?;
    if !lat.is_finite() || !lon.is_finite() {
        return None;
    }
    let stamp = format!("{} {}", fields[5].trim(), fields[6].trim());
    let t = chrono::NaiveDateTime::parse_from_str(&stamp, "%Y-%m-%d %H:%M:%S")
        .ok()?
        .and_utc()
        .timestamp();
    Some(Point::new(lon, lat, t))
}

/// Groups csv rows into trajectories by first appearance, enforcing
/// strictly increasing timestamps within each.
#[derive(Default)]
struct Grouper {
    order: Vec<String>,
    points: BTreeMap<String, Vec<Point>>,
}

impl Grouper {
    /// False when the row violates time monotonicity and was dropped.
    fn push(&mut self, id: String, p: Point) -> bool {
        let entry = self.points.entry(id.clone()).or_insert_with(|| {
            self.order.push(id);
            Vec::new()
        });
        if entry.last().is_some_and(|prev| p.t <= prev.t) {
            return false;
        }
        entry.push(p);
        true
    }

    fn finish(mut self, path: &Path) -> Result<TrajectoryDatabase> {
        let trajs: Vec<Trajectory> = self
            .order
            .iter()
            .map(|id| {
                let points = self.points.remove(id).expect("grouped id");
                Trajectory::new(id.as_str(), points)
            })
            .collect();
        if trajs.is_empty() {
            return Err(Error::EmptyInput(format!(
                "no valid trajectories in {}",
                path.display()
            )));
        }
        TrajectoryDatabase::new(trajs)
    }
}

/// Writes `content` to `path` via a temporary file in the same directory
/// plus an atomic rename, creating parent directories as needed.
pub fn atomic_write(path: &Path, content: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, content).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Lossless csv export; ingesting the file reproduces the database.
pub fn export_csv(db: &TrajectoryDatabase, path: &Path) -> Result<()> {
    let mut out = String::from("traj_id,lon,lat,t\n");
    for traj in db.trajectories() {
        for p in &traj.points {
            let field = escape_csv(traj.id.as_str());
            out.push_str(&format!("{field},{},{},{}\n", p.x, p.y, p.t));
        }
    }
    atomic_write(path, out.as_bytes())
}

fn escape_csv(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// GeoJSON FeatureCollection with one LineString feature per trajectory
/// (single-point trajectories become Point features, empty ones are
/// skipped); timestamps ride along as a `times` property.
pub fn export_geojson(db: &TrajectoryDatabase, path: &Path) -> Result<()> {
    let features: Vec<serde_json::Value> = db
        .trajectories()
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| {
            let coords: Vec<[f64; 2]> = t.points.iter().map(|p| [p.x, p.y]).collect();
            let times: Vec<i64> = t.points.iter().map(|p| p.t).collect();
            let geometry = if coords.len() >= 2 {
                serde_json::json!({"type": "LineString", "coordinates": coords})
            } else {
                serde_json::json!({"type": "Point", "coordinates": coords[0]})
            };
            serde_json::json!({
                "type": "Feature",
                "properties": {"traj_id": t.id.as_str(), "times": times},
                "geometry": geometry,
            })
        })
        .collect();
    let doc = serde_json::json!({"type": "FeatureCollection", "features": features});
    let text = serde_json::to_string_pretty(&doc).expect("geojson always serializes");
    atomic_write(path, text.as_bytes())
}
