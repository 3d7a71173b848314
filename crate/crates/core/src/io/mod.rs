//! On-disk formats: JSONL demo datasets, binary checkpoints and CSV exports.

mod checkpoint;
mod dataset;

pub use checkpoint::{ArtifactKind, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_VERSION, MAGIC};
pub use dataset::{demos_to_jsonl, read_demos, write_demos};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::TrajectoryRow;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// CSV with columns `episode, control_step, scale, t, dim_0..`, sorted.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> Result<Vec<u8>> {
    let dims = rows.first().map_or(0, |r| r.values.len());
    let mut sorted: Vec<&TrajectoryRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.episode, r.control_step, r.scale, r.t));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["episode".to_string(), "control_step".into(), "scale".into(), "t".into()];
    header.extend((0..dims).map(|d| format!("dim_{d}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in sorted {
        if r.values.len() != dims {
            return Err(Error::shape("trajectory_csv", format!("row with {} values, expected {dims}", r.values.len())));
        }
        let mut rec = vec![r.episode.to_string(), r.control_step.to_string(), r.scale.to_string(), r.t.to_string()];
        rec.extend(r.values.iter().map(f32::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    write_atomic(path, &trajectory_csv(rows)?)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
