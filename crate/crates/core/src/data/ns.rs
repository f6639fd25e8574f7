//! Irregular-graph smoke trajectories: simulate on the dense grid, sample
//! fluid cell centres, triangulate and interpolate the fields onto nodes.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{
    load_trajectory, read_manifest, write_manifest, DatasetKind, DatasetManifest, FileEntry, Trajectory,
    TrajectoryMeta, MANIFEST_VERSION,
};
use crate::geom::delaunay;
use crate::sim::{simulate_trajectory, FluidState, Inlet, SimConfig};
use crate::{Error, Result};

/// Triangulation attempts per trajectory before giving up.
pub const MAX_ATTEMPTS: usize = 5;

/// Frames needed for three history steps and one target.
pub const MIN_FRAMES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Open,
    Obstacle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForceMode {
    /// `(0, 0.5)` for every trajectory
    Fixed,
    /// both components from `U(-range, range)`
    Varying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsDatasetConfig {
    pub scenario: Scenario,
    pub grid: usize,
    /// solver steps per trajectory
    pub n_steps: usize,
    pub n_traj: usize,
    pub n_nodes: usize,
    pub seed: u64,
    pub force_mode: ForceMode,
    #[serde(default = "default_force_range")]
    pub force_range: f64,
    /// pressure solver tolerance; the solver default when absent
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cg_tol: Option<f64>,
}

fn default_force_range() -> f64 {
    0.7
}

impl NsDatasetConfig {
    pub fn new(scenario: Scenario, grid: usize, n_traj: usize, n_nodes: usize, seed: u64) -> NsDatasetConfig {
        let n_steps = match scenario {
            Scenario::Open => 24,
            Scenario::Obstacle => 48,
        };
        NsDatasetConfig {
            scenario,
            grid,
            n_steps,
            n_traj,
            n_nodes,
            seed,
            force_mode: ForceMode::Fixed,
            force_range: default_force_range(),
            cg_tol: None,
        }
    }

    pub fn kind(&self) -> DatasetKind {
        match self.scenario {
            Scenario::Open => DatasetKind::NsOpen,
            Scenario::Obstacle => DatasetKind::NsObstacle,
        }
    }

    /// Simulation settings for trajectory `k`, before the force override.
    fn sim_config(&self, sim_seed: u64) -> SimConfig {
        let mut sim = match self.scenario {
            Scenario::Open => SimConfig::open(self.grid, self.n_steps, sim_seed),
            Scenario::Obstacle => SimConfig::obstacle(self.grid, self.n_steps, sim_seed),
        };
        if let Some(tol) = self.cg_tol {
            sim.cg_tol = tol;
        }
        sim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_traj == 0 {
            return bad("n_traj must be positive".into());
        }
        if !(self.force_range >= 0.0 && self.force_range.is_finite()) {
            return bad(format!("force_range {} must be finite and non-negative", self.force_range));
        }
        let sim = self.sim_config(0);
        sim.validate()?;
        if sim.n_frames() < MIN_FRAMES {
            return bad(format!("{} solver steps give {} frames, need {MIN_FRAMES}", self.n_steps, sim.n_frames()));
        }
        if self.n_nodes < 3 || self.n_nodes > self.grid * self.grid {
            return bad(format!("n_nodes {} must lie in 3..={}", self.n_nodes, self.grid * self.grid));
        }
        Ok(())
    }
}

/// Bilinear interpolation of a cell-centred field at `p`, clamped to the
/// outermost cell centres.
pub fn interpolate(field: &[f64], nx: usize, ny: usize, dx: f64, p: [f64; 2]) -> f64 {
    let coord = |x: f64, n: usize| {
        let g = (x / dx - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (g.floor() as usize).min(n.saturating_sub(2));
        (i, g - i as f64)
    };
    let (i, fx) = coord(p[0], nx);
    let (j, fy) = coord(p[1], ny);
    let at = |a: usize, b: usize| field[a.min(nx - 1) * ny + b.min(ny - 1)];
    (1.0 - fx) * ((1.0 - fy) * at(i, j) + fy * at(i, j + 1)) + fx * ((1.0 - fy) * at(i + 1, j) + fy * at(i + 1, j + 1))
}

/// Unit normals pointing from a fluid node into the walls or the obstacle
/// it touches through a face, summed and renormalized at corners; zero in
/// the interior.
pub fn boundary_normals(cfg: &SimConfig, state: &FluidState, cells: &[(usize, usize)]) -> Vec<[f64; 2]> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let wall = |i: usize, j: usize| i == 0 || j == 0 || i == nx - 1 || j == ny - 1;
    cells
        .iter()
        .map(|&(i, j)| {
            let mut n = [0.0f64; 2];
            let mut near_obstacle = false;
            for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (a, b) = ((i as i64 + di) as usize, (j as i64 + dj) as usize);
                if wall(a, b) {
                    n[0] += di as f64;
                    n[1] += dj as f64;
                } else if state.solid[state.idx(a, b)] {
                    near_obstacle = true;
                }
            }
            if let (true, Some(o)) = (near_obstacle, cfg.obstacle) {
                let p = cfg.cell_center(i, j);
                let d = [o.center[0] - p[0], o.center[1] - p[1]];
                let len = d[0].hypot(d[1]);
                if len > 0.0 {
                    n[0] += d[0] / len;
                    n[1] += d[1] / len;
                }
            }
            let len = n[0].hypot(n[1]);
            if len > 1e-12 {
                [n[0] / len, n[1] / len]
            } else {
                [0.0; 2]
            }
        })
        .collect()
}

/// 1 for nodes inside the smoke inlet, 0 elsewhere.
pub fn inlet_flags(positions: &[[f64; 2]], inlet: Option<&Inlet>) -> Vec<f64> {
    positions
        .iter()
        .map(|p| match inlet {
            Some(s) if (p[0] - s.center[0]).hypot(p[1] - s.center[1]) < s.radius => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Simulates and samples trajectory `k` of the dataset.
pub fn generate_trajectory(cfg: &NsDatasetConfig, k: usize) -> Result<(Trajectory, TrajectoryMeta)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64 + 1);
    let sim_seed: u64 = rng.gen();
    let mut sim = cfg.sim_config(sim_seed);
    if cfg.force_mode == ForceMode::Varying && cfg.force_range > 0.0 {
        let r = cfg.force_range;
        sim.force = [rng.gen_range(-r..=r), rng.gen_range(-r..=r)];
    }
    let frames = simulate_trajectory(&sim, None)?;
    let state = FluidState::new(&sim)?;
    let fluid: Vec<(usize, usize)> = (0..sim.nx)
        .flat_map(|i| (0..sim.ny).map(move |j| (i, j)))
        .filter(|&(i, j)| !state.solid[state.idx(i, j)])
        .collect();
    if cfg.n_nodes > fluid.len() {
        return Err(Error::InvalidConfig(format!(
            "{} nodes requested but only {} fluid cells",
            cfg.n_nodes,
            fluid.len()
        )));
    }

    let mut attempt = 0;
    let (cells, edges) = loop {
        attempt += 1;
        let mut pick: Vec<usize> = sample(&mut rng, fluid.len(), cfg.n_nodes).into_vec();
        pick.sort_unstable();
        let cells: Vec<(usize, usize)> = pick.iter().map(|&c| fluid[c]).collect();
        let pts: Vec<[f64; 2]> = cells.iter().map(|&(i, j)| sim.cell_center(i, j)).collect();
        match delaunay(&pts) {
            Ok(e) => break (cells, e),
            Err(e) if attempt >= MAX_ATTEMPTS => return Err(e),
            Err(e) => log::warn!("trajectory {k}: {e}; resampling nodes"),
        }
    };

    let positions: Vec<[f64; 2]> = cells.iter().map(|&(i, j)| sim.cell_center(i, j)).collect();
    let normals = boundary_normals(&sim, &state, &cells);
    let (nx, ny, dx) = (sim.nx, sim.ny, sim.dx);
    let mut u = Vec::with_capacity(frames.len());
    let mut v = Vec::with_capacity(frames.len());
    for f in &frames {
        let vx: Vec<f64> = f.v.iter().map(|w| w[0]).collect();
        let vy: Vec<f64> = f.v.iter().map(|w| w[1]).collect();
        u.push(positions.iter().map(|&p| interpolate(&f.u, nx, ny, dx, p) as f32).collect());
        v.push(
            positions
                .iter()
                .map(|&p| [interpolate(&vx, nx, ny, dx, p) as f32, interpolate(&vy, nx, ny, dx, p) as f32])
                .collect(),
        );
    }
    let to32 = |p: &[f64; 2]| [p[0] as f32, p[1] as f32];
    let traj = Trajectory {
        positions: positions.iter().map(to32).collect(),
        edges: edges.iter().map(|&(i, j)| (i as u32, j as u32)).collect(),
        normals: normals.iter().map(to32).collect(),
        force: to32(&sim.force),
        u,
        v,
    };
    let meta = TrajectoryMeta {
        seed: sim_seed,
        force: sim.force,
        obstacle: sim.obstacle,
        inlet: sim.inlet,
        n_nodes: cfg.n_nodes,
        n_steps: frames.len(),
        attempts: attempt,
    };
    Ok((traj, meta))
}

pub fn trajectory_file_name(k: usize) -> String {
    format!("traj_{k:05}.bin")
}

/// Generates every trajectory on a pool of `jobs` threads and writes the
/// files plus a manifest into `dir`. On failure nothing new is left behind.
pub fn build_ns_dataset(cfg: &NsDatasetConfig, dir: &Path, jobs: usize) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let written: Vec<Result<FileEntry>> = pool.install(|| {
        (0..cfg.n_traj)
            .into_par_iter()
            .map(|k| {
                let (traj, meta) = generate_trajectory(cfg, k)?;
                let bytes = traj.to_bytes()?;
                let name = trajectory_file_name(k);
                std::fs::write(dir.join(&name), &bytes)?;
                Ok(FileEntry::for_bytes(name, &bytes, Some(meta)))
            })
            .collect()
    });
    if let Some(pos) = written.iter().position(|r| r.is_err()) {
        for k in 0..cfg.n_traj {
            let _ = std::fs::remove_file(dir.join(trajectory_file_name(k)));
        }
        return Err(written.into_iter().nth(pos).and_then(|r| r.err()).expect("error present"));
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        kind: cfg.kind(),
        seed: cfg.seed,
        params: serde_json::to_value(cfg)?,
        files: written.into_iter().collect::<Result<_>>()?,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Verifies the manifest and loads every trajectory it lists.
pub fn load_ns_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Trajectory>)> {
    let m = read_manifest(dir)?;
    if m.kind == DatasetKind::Tetris {
        return Err(Error::Mismatch(format!("{} holds a tetris dataset", dir.display())));
    }
    let trajs = m.files.iter().map(|f| load_trajectory(&dir.join(&f.name))).collect::<Result<Vec<_>>>()?;
    Ok((m, trajs))
}
