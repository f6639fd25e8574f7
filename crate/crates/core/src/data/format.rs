//! Binary trajectory files and the JSON manifest that lists them.
//!
//! Trajectory layout, little-endian: magic `SE2DS\0\x01`, u32 N, u32 T,
//! u32 E, f32 force[2], f32 positions[N x 2], f32 normals[N x 2],
//! u32 edges[E x 2] (undirected pairs), then per step f32 u[N] and
//! f32 v[N x 2].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geom::Graph2D;
use crate::sim::{Inlet, Obstacle};
use crate::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 7] = b"SE2DS\x00\x01";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Node-sampled simulation, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<[f32; 2]>,
    /// undirected pairs `i < j`
    pub edges: Vec<(u32, u32)>,
    pub normals: Vec<[f32; 2]>,
    pub force: [f32; 2],
    /// `u[t][node]`
    pub u: Vec<Vec<f32>>,
    /// `v[t][node]`
    pub v: Vec<Vec<[f32; 2]>>,
}

impl Trajectory {
    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn n_steps(&self) -> usize {
        self.u.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.normals.len() != n {
            return bad(format!("{} normals for {n} nodes", self.normals.len()));
        }
        if self.u.len() != self.v.len() {
            return bad("u and v have different lengths".into());
        }
        if self.u.iter().any(|u| u.len() != n) || self.v.iter().any(|v| v.len() != n) {
            return bad("field length differs from node count".into());
        }
        if let Some(e) = self.edges.iter().find(|e| e.0 >= e.1 || e.1 as usize >= n) {
            return bad(format!("edge {e:?} is not an ordered pair of nodes"));
        }
        Ok(())
    }

    pub fn positions_f64(&self) -> Vec<[f64; 2]> {
        self.positions.iter().map(|p| [p[0] as f64, p[1] as f64]).collect()
    }

    /// Bidirectional graph with boundary normals.
    pub fn graph(&self) -> Result<Graph2D> {
        let pairs: Vec<(usize, usize)> = self.edges.iter().map(|&(i, j)| (i as usize, j as usize)).collect();
        let normals = self.normals.iter().map(|n| [n[0] as f64, n[1] as f64]).collect();
        Graph2D::from_undirected(self.positions_f64(), &pairs, Some(normals))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (n, t, e) = (self.n_nodes(), self.n_steps(), self.edges.len());
        let mut b = Vec::with_capacity(7 + 12 + 4 * (2 + 4 * n + 2 * e + 3 * n * t));
        b.extend_from_slice(TRAJECTORY_MAGIC);
        for x in [n, t, e] {
            put_u32(&mut b, x)?;
        }
        let f32s =
            |b: &mut Vec<u8>, xs: &mut dyn Iterator<Item = f32>| xs.for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
        f32s(&mut b, &mut self.force.iter().copied());
        f32s(&mut b, &mut self.positions.iter().flatten().copied());
        f32s(&mut b, &mut self.normals.iter().flatten().copied());
        for &(i, j) in &self.edges {
            b.extend_from_slice(&i.to_le_bytes());
            b.extend_from_slice(&j.to_le_bytes());
        }
        for (u, v) in self.u.iter().zip(&self.v) {
            f32s(&mut b, &mut u.iter().copied());
            f32s(&mut b, &mut v.iter().flatten().copied());
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Trajectory> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(7)? != TRAJECTORY_MAGIC {
            return Err(Error::corrupt(path, "bad magic"));
        }
        let (n, t, e) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let need = n
            .checked_mul(4)
            .and_then(|a| a.checked_add(e.checked_mul(2)?))
            .and_then(|a| a.checked_add(n.checked_mul(3)?.checked_mul(t)?))
            .and_then(|a| a.checked_add(2))
            .and_then(|a| a.checked_mul(4));
        if need != Some(bytes.len().saturating_sub(19)) {
            return Err(Error::corrupt(path, "length does not match the header"));
        }
        let force = [r.f32()?, r.f32()?];
        let pairs =
            |r: &mut Cursor, k: usize| -> Result<Vec<[f32; 2]>> { (0..k).map(|_| Ok([r.f32()?, r.f32()?])).collect() };
        let positions = pairs(&mut r, n)?;
        let normals = pairs(&mut r, n)?;
        let edges = (0..e).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
        let mut u = Vec::with_capacity(t);
        let mut v = Vec::with_capacity(t);
        for _ in 0..t {
            u.push((0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
            v.push(pairs(&mut r, n)?);
        }
        let traj = Trajectory { positions, edges, normals, force, u, v };
        traj.validate().map_err(|e| Error::corrupt(path, e.to_string()))?;
        Ok(traj)
    }
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    std::fs::write(path, traj.to_bytes()?)?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::from_bytes(&std::fs::read(path)?, path)
}

fn put_u32(b: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::InvalidArgument(format!("{x} does not fit in 32 bits")))?;
    b.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(self.path, "unexpected end of file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Tetris,
    NsOpen,
    NsObstacle,
}

/// Per-trajectory generation details kept next to the checksum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub force: [f64; 2],
    pub obstacle: Option<Obstacle>,
    pub inlet: Option<Inlet>,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<TrajectoryMeta>,
}

impl FileEntry {
    pub fn for_bytes(name: impl Into<String>, bytes: &[u8], meta: Option<TrajectoryMeta>) -> FileEntry {
        FileEntry { name: name.into(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64, meta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    /// the builder configuration, verbatim
    pub params: serde_json::Value,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Reads the manifest and checks that every listed file exists and
/// matches its checksum.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })?;
    let m: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::corrupt(&path, format!("manifest: {e}")))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::corrupt(&path, format!("unsupported manifest version {}", m.format_version)));
    }
    for f in &m.files {
        let p = dir.join(&f.name);
        let bytes = std::fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingFile(format!("manifest lists {} which does not exist", p.display()))
            }
            _ => Error::Io(e),
        })?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::corrupt(&p, "checksum mismatch"));
        }
    }
    Ok(m)
}
