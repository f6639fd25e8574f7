//! Dataset builders and their on-disk formats.

pub mod format;
pub mod ns;
pub mod tetris;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use format::{
    load_trajectory, read_manifest, save_trajectory, sha256_hex, write_manifest, DatasetKind, DatasetManifest,
    FileEntry, Trajectory, TrajectoryMeta, MANIFEST_FILE, MANIFEST_VERSION, TRAJECTORY_MAGIC,
};
pub use ns::{
    build_ns_dataset, generate_trajectory, inlet_flags, interpolate, load_ns_dataset, ForceMode, NsDatasetConfig,
    Scenario,
};
pub use tetris::{gen_tetris, tetris_shapes, TetrisSample, TetrisSpec, TETRIS_CLASSES, TETRIS_NAMES};

use crate::{Error, Result};

pub const TETRIS_FILE: &str = "samples.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TetrisParams {
    spec: TetrisSpec,
    count: usize,
}

/// Writes the samples as JSON plus a manifest.
pub fn save_tetris(dir: &Path, spec: TetrisSpec, seed: u64, samples: &[TetrisSample]) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_vec_pretty(samples)?;
    text.push(b'\n');
    std::fs::write(dir.join(TETRIS_FILE), &text)?;
    let m = DatasetManifest {
        format_version: format::MANIFEST_VERSION,
        kind: DatasetKind::Tetris,
        seed,
        params: serde_json::to_value(TetrisParams { spec, count: samples.len() })?,
        files: vec![FileEntry::for_bytes(TETRIS_FILE, &text, None)],
    };
    write_manifest(dir, &m)?;
    Ok(m)
}

pub fn load_tetris(dir: &Path) -> Result<(DatasetManifest, Vec<TetrisSample>)> {
    let m = read_manifest(dir)?;
    if m.kind != DatasetKind::Tetris {
        return Err(Error::Mismatch(format!("{} does not hold a tetris dataset", dir.display())));
    }
    let path = dir.join(TETRIS_FILE);
    let samples: Vec<TetrisSample> =
        serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if let Some(s) = samples.iter().find(|s| s.label >= TETRIS_CLASSES) {
        return Err(Error::corrupt(&path, format!("label {} out of range", s.label)));
    }
    Ok((m, samples))
}

/// Manifest entry count: samples for tetris, trajectories otherwise.
pub fn manifest_count(m: &DatasetManifest) -> usize {
    match m.kind {
        DatasetKind::Tetris => m.params.get("count").and_then(|c| c.as_u64()).unwrap_or(0) as usize,
        _ => m.files.len(),
    }
}
