//! Non-differentiable 2D geometry: rotations, relative edge geometry, the
//! radial basis used for edge distances, graph construction and sampling.
//!
//! Angle convention: both the local edge angle and the global node angle are
//! the *negated* `atan2` of the corresponding unit vector, so that rotating
//! the vector by that angle maps it onto the positive x-axis. Angles live in
//! (-pi, pi].

mod delaunay;
mod sampling;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use delaunay::{delaunay, delaunay_triangles};
pub use sampling::{furthest_point_sampling, furthest_point_sampling_from};

/// Squared-norm threshold below which an edge is considered degenerate.
const DEGENERATE_DIST: f64 = 1e-12;
/// Nodes closer than this to the center of mass get a zero global angle.
const ORIGIN_RADIUS: f64 = 1e-9;
/// Lower clamp on distances fed into the radial basis.
const MIN_BASIS_DIST: f64 = 1e-6;

/// A planar rotation stored as its cosine and sine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot2 {
    pub cos: f64,
    pub sin: f64,
}

impl Rot2 {
    pub const IDENTITY: Rot2 = Rot2 { cos: 1.0, sin: 0.0 };

    pub fn new(theta: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::InvalidArgument(format!("rotation angle must be finite, got {theta}")));
        }
        let (sin, cos) = theta.sin_cos();
        Ok(Rot2 { cos, sin })
    }

    #[inline]
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    #[inline]
    pub fn apply_inverse(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] + self.sin * v[1], -self.sin * v[0] + self.cos * v[1]]
    }

    pub fn inverse(&self) -> Rot2 {
        Rot2 { cos: self.cos, sin: -self.sin }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Rot2) -> Rot2 {
        Rot2 { cos: self.cos * other.cos - self.sin * other.sin, sin: self.sin * other.cos + self.cos * other.sin }
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }
}

/// Rotation by `theta` radians (counter-clockwise).
pub fn rotation_matrix(theta: f64) -> Result<Rot2> {
    Rot2::new(theta)
}

/// Negated `atan2` of `v`, folded into (-pi, pi].
#[inline]
pub fn aligning_angle(v: [f64; 2]) -> f64 {
    let a = -v[1].atan2(v[0]);
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeGeometry {
    pub rel_vec: [f64; 2],
    pub dist: f64,
    pub unit_vec: [f64; 2],
    pub theta: f64,
}

/// Relative geometry of each directed edge `(i, j)`: `rel_vec = r_j - r_i`.
pub fn edge_geometry(positions: &[[f64; 2]], edges: &[(usize, usize)]) -> Result<Vec<EdgeGeometry>> {
    let n = positions.len();
    edges
        .iter()
        .map(|&(i, j)| {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) references a node outside 0..{n}")));
            }
            let rel_vec = [positions[j][0] - positions[i][0], positions[j][1] - positions[i][1]];
            let dist = rel_vec[0].hypot(rel_vec[1]);
            if dist.is_nan() || dist < DEGENERATE_DIST {
                return Err(Error::DegenerateEdge(i, j));
            }
            let unit_vec = [rel_vec[0] / dist, rel_vec[1] / dist];
            Ok(EdgeGeometry { rel_vec, dist, unit_vec, theta: aligning_angle(unit_vec) })
        })
        .collect()
}

/// Global orientation angle of every (centered) node position.
pub fn global_angles(centered_positions: &[[f64; 2]]) -> Vec<f64> {
    centered_positions.iter().map(|p| if p[0].hypot(p[1]) < ORIGIN_RADIUS { 0.0 } else { aligning_angle(*p) }).collect()
}

pub fn center_of_mass(positions: &[[f64; 2]]) -> [f64; 2] {
    let n = positions.len().max(1) as f64;
    let (sx, sy) = positions.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

pub fn center_of_mass_zero(positions: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let c = center_of_mass(positions);
    positions.iter().map(|p| [p[0] - c[0], p[1] - c[1]]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialBasisConfig {
    pub n_base: usize,
    pub cutoff: f64,
}

impl RadialBasisConfig {
    pub fn new(n_base: usize, cutoff: f64) -> Result<Self> {
        let cfg = RadialBasisConfig { n_base, cutoff };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_base == 0 {
            return Err(Error::InvalidConfig("n_base must be at least 1".into()));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::InvalidConfig(format!("radial cutoff must be positive, got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// Zeroth-order spherical Bessel basis `sqrt(2/c) sin(n pi r / c) / r`,
/// `n = 1..=n_base`. Distances beyond the cutoff are evaluated as-is.
pub fn bessel_basis(dist: f64, cfg: &RadialBasisConfig) -> Vec<f64> {
    let r = dist.max(MIN_BASIS_DIST);
    let norm = (2.0 / cfg.cutoff).sqrt();
    (1..=cfg.n_base).map(|n| norm * (n as f64 * PI * r / cfg.cutoff).sin() / r).collect()
}

/// `q`-th percentile (0..=100) of the undirected edge lengths.
pub fn edge_length_percentile(positions: &[[f64; 2]], edges: &[(usize, usize)], q: f64) -> Option<f64> {
    let mut lens: Vec<f64> = edges
        .iter()
        .filter(|(i, j)| i < j)
        .map(|&(i, j)| (positions[j][0] - positions[i][0]).hypot(positions[j][1] - positions[i][1]))
        .collect();
    if lens.is_empty() {
        return None;
    }
    lens.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q / 100.0) * (lens.len() - 1) as f64).round() as usize;
    Some(lens[rank.min(lens.len() - 1)])
}

/// An irregular computational domain: node positions, directed edges and
/// per-node boundary normals (zero for interior nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph2D {
    pub positions: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
    pub boundary_normals: Vec<[f64; 2]>,
    centered: Vec<[f64; 2]>,
    global_angles: Vec<f64>,
}

impl Graph2D {
    /// Builds a graph from directed edges. Every edge must appear in both
    /// directions.
    pub fn new(
        positions: Vec<[f64; 2]>,
        edges: Vec<(usize, usize)>,
        boundary_normals: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        if positions.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidArgument("node positions must be finite".into()));
        }
        let normals = boundary_normals.unwrap_or_else(|| vec![[0.0; 2]; n]);
        if normals.len() != n {
            return Err(Error::InvalidArgument(format!("{} boundary normals for {n} nodes", normals.len())));
        }
        let mut set = std::collections::HashSet::with_capacity(edges.len());
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) references a node outside 0..{n}")));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self loop on node {i}")));
            }
            set.insert((i, j));
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| !set.contains(&(j, i))) {
            return Err(Error::InvalidArgument(format!("edge ({i}, {j}) has no reverse edge")));
        }
        let centered = center_of_mass_zero(&positions);
        let global_angles = global_angles(&centered);
        Ok(Graph2D { positions, edges, boundary_normals: normals, centered, global_angles })
    }

    /// Builds a graph from undirected pairs, inserting both directions.
    pub fn from_undirected(
        positions: Vec<[f64; 2]>,
        pairs: &[(usize, usize)],
        boundary_normals: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let edges = pairs.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
        Self::new(positions, edges, boundary_normals)
    }

    /// Complete directed graph over the given positions.
    pub fn fully_connected(positions: Vec<[f64; 2]>) -> Result<Self> {
        let n = positions.len();
        let edges = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        Self::new(positions, edges, None)
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn centered_positions(&self) -> &[[f64; 2]] {
        &self.centered
    }

    pub fn global_angles(&self) -> &[f64] {
        &self.global_angles
    }

    pub fn edge_geometry(&self) -> Result<Vec<EdgeGeometry>> {
        edge_geometry(&self.positions, &self.edges)
    }

    /// The same graph after rotating by `rot` about the origin and then
    /// translating by `shift`. Boundary normals rotate with the domain.
    pub fn transformed(&self, rot: &Rot2, shift: [f64; 2]) -> Result<Self> {
        let positions = self
            .positions
            .iter()
            .map(|&p| {
                let q = rot.apply(p);
                [q[0] + shift[0], q[1] + shift[1]]
            })
            .collect();
        let normals = self.boundary_normals.iter().map(|&n| rot.apply(n)).collect();
        Graph2D::new(positions, self.edges.clone(), Some(normals))
    }
}
