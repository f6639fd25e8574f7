//! Incompressible smoke on a collocated grid: MacCormack advection,
//! buoyancy, optional viscosity, an inlet source and an exact discrete
//! pressure projection solved with conjugate gradients.
//!
//! Cell `(i, j)` sits at `((i + 0.5) dx, (j + 0.5) dx)` and is stored at
//! `i * ny + j`. The outermost ring of cells is solid wall.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inlet {
    pub center: [f64; 2],
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dt: f64,
    #[serde(default)]
    pub viscosity: f64,
    pub density: f64,
    /// buoyancy acceleration per unit smoke
    pub force: [f64; 2],
    #[serde(default)]
    pub obstacle: Option<Obstacle>,
    #[serde(default)]
    pub inlet: Option<Inlet>,
    /// solver steps per trajectory
    pub n_steps: usize,
    /// keep every `stride`-th state
    #[serde(default = "one")]
    pub stride: usize,
    pub seed: u64,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
}

fn one() -> usize {
    1
}

fn default_cg_tol() -> f64 {
    1e-6
}

impl SimConfig {
    /// Random smoke in an open box of side 32 with upward buoyancy.
    pub fn open(grid: usize, n_steps: usize, seed: u64) -> SimConfig {
        SimConfig {
            nx: grid,
            ny: grid,
            dx: 32.0 / grid as f64,
            dt: 1.5,
            viscosity: 0.0,
            density: 1.0,
            force: [0.0, 0.5],
            obstacle: None,
            inlet: None,
            n_steps,
            stride: 1,
            seed,
            cg_tol: default_cg_tol(),
        }
    }

    /// Box of side 100 with a ball obstacle and a smoke inlet below it,
    /// horizontal positions drawn from `seed`.
    pub fn obstacle(grid: usize, n_steps: usize, seed: u64) -> SimConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b57_ac1e);
        let x_obs = rng.gen_range(20..=80) as f64;
        let x_in = rng.gen_range(10..=90) as f64;
        SimConfig {
            nx: grid,
            ny: grid,
            dx: 100.0 / grid as f64,
            dt: 0.5,
            viscosity: 0.0,
            density: 1.0,
            force: [0.0, 0.5],
            obstacle: Some(Obstacle { center: [x_obs, 50.0], radius: 15.0 }),
            inlet: Some(Inlet { center: [x_in, 9.5], radius: 7.0, intensity: 0.5 }),
            n_steps,
            stride: 2,
            seed,
            cg_tol: default_cg_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.nx < 8 || self.ny < 8 {
            return bad(format!("grid {}x{} is smaller than 8x8", self.nx, self.ny));
        }
        if !(self.dx > 0.0 && self.dt > 0.0 && self.density > 0.0) {
            return bad("dx, dt and density must be positive".into());
        }
        if self.viscosity.is_nan() || self.viscosity < 0.0 {
            return bad("viscosity must be non-negative".into());
        }
        if self.stride == 0 || self.n_steps == 0 {
            return bad("n_steps and stride must be positive".into());
        }
        if self.cg_tol.is_nan() || self.cg_tol <= 0.0 || self.force.iter().any(|f| !f.is_finite()) {
            return bad("cg_tol must be positive and the force finite".into());
        }
        let half = 0.5 * self.dx * self.nx.min(self.ny) as f64;
        let radii = self.obstacle.map(|o| o.radius).into_iter().chain(self.inlet.map(|i| i.radius));
        for r in radii {
            if !(r > 0.0 && r < half) {
                return bad(format!("radius {r} must lie in (0, {half})"));
            }
        }
        Ok(())
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dx]
    }

    /// Number of states returned by [`simulate_trajectory`].
    pub fn n_frames(&self) -> usize {
        self.n_steps.div_ceil(self.stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    pub nx: usize,
    pub ny: usize,
    pub u: Vec<f64>,
    pub v: Vec<[f64; 2]>,
    pub p: Vec<f64>,
    pub solid: Vec<bool>,
    pub inlet: Vec<bool>,
}

impl FluidState {
    /// Fluid at rest with no smoke; masks follow `cfg`.
    pub fn new(cfg: &SimConfig) -> Result<FluidState> {
        cfg.validate()?;
        let (nx, ny) = (cfg.nx, cfg.ny);
        let n = nx * ny;
        let mut solid = vec![false; n];
        let mut inlet = vec![false; n];
        for i in 0..nx {
            for j in 0..ny {
                let c = cfg.cell_center(i, j);
                let inside = |center: [f64; 2], r: f64| (c[0] - center[0]).hypot(c[1] - center[1]) < r;
                solid[i * ny + j] = i == 0
                    || j == 0
                    || i == nx - 1
                    || j == ny - 1
                    || cfg.obstacle.is_some_and(|o| inside(o.center, o.radius));
                inlet[i * ny + j] = !solid[i * ny + j] && cfg.inlet.is_some_and(|s| inside(s.center, s.radius));
            }
        }
        Ok(FluidState { nx, ny, u: vec![0.0; n], v: vec![[0.0; 2]; n], p: vec![0.0; n], solid, inlet })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn max_speed(&self) -> f64 {
        self.v.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max)
    }

    pub fn smoke_mass(&self) -> f64 {
        self.u.iter().sum()
    }

    /// Largest `|div v|` over fluid cells.
    pub fn max_fluid_divergence(&self, dx: f64) -> f64 {
        let d = divergence(&self.v, self.nx, self.ny, dx);
        d.iter().zip(&self.solid).filter(|(_, &s)| !s).map(|(d, _)| d.abs()).fold(0.0, f64::max)
    }

    fn check(&self, cfg: &SimConfig) -> Result<()> {
        let n = cfg.nx * cfg.ny;
        if self.nx != cfg.nx
            || self.ny != cfg.ny
            || [self.u.len(), self.v.len(), self.p.len(), self.solid.len()] != [n; 4]
        {
            return Err(Error::ShapeMismatch {
                op: "fluid state",
                lhs: vec![self.nx, self.ny, self.u.len()],
                rhs: vec![cfg.nx, cfg.ny, n],
            });
        }
        Ok(())
    }
}

/// Central differences inside, one-sided on the outer ring.
pub fn divergence(v: &[[f64; 2]], nx: usize, ny: usize, dx: f64) -> Vec<f64> {
    let at = |i: usize, j: usize| v[i * ny + j];
    let mut out = vec![0.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let dvx = if i == 0 {
                (at(1, j)[0] - at(0, j)[0]) / dx
            } else if i == nx - 1 {
                (at(i, j)[0] - at(i - 1, j)[0]) / dx
            } else {
                (at(i + 1, j)[0] - at(i - 1, j)[0]) / (2.0 * dx)
            };
            let dvy = if j == 0 {
                (at(i, 1)[1] - at(i, 0)[1]) / dx
            } else if j == ny - 1 {
                (at(i, j)[1] - at(i, j - 1)[1]) / dx
            } else {
                (at(i, j + 1)[1] - at(i, j - 1)[1]) / (2.0 * dx)
            };
            out[i * ny + j] = dvx + dvy;
        }
    }
    out
}

/// Bilinear sample at fractional index `(x, y)`, clamped to the grid.
/// Also returns the range of the four surrounding values.
fn sample(f: &[f64], nx: usize, ny: usize, x: f64, y: f64) -> (f64, f64, f64) {
    let x = x.clamp(0.0, (nx - 1) as f64);
    let y = y.clamp(0.0, (ny - 1) as f64);
    let i0 = (x.floor() as usize).min(nx - 2);
    let j0 = (y.floor() as usize).min(ny - 2);
    let (tx, ty) = (x - i0 as f64, y - j0 as f64);
    let a = f[i0 * ny + j0];
    let b = f[(i0 + 1) * ny + j0];
    let c = f[i0 * ny + j0 + 1];
    let d = f[(i0 + 1) * ny + j0 + 1];
    let val = (1.0 - tx) * ((1.0 - ty) * a + ty * c) + tx * ((1.0 - ty) * b + ty * d);
    // range over the cells that carry weight, so that exact grid hits do
    // not depend on which side the floor picked
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (w, val) in [((1.0 - tx) * (1.0 - ty), a), (tx * (1.0 - ty), b), ((1.0 - tx) * ty, c), (tx * ty, d)] {
        if w > 0.0 {
            lo = lo.min(val);
            hi = hi.max(val);
        }
    }
    (val, lo, hi)
}

/// MacCormack step of `f` along `vel` with the min-max limiter.
fn advect(f: &[f64], vel: &[[f64; 2]], nx: usize, ny: usize, dt: f64, dx: f64) -> Vec<f64> {
    let s = dt / dx;
    let mut fwd = vec![0.0; f.len()];
    let mut range = vec![(0.0, 0.0); f.len()];
    for i in 0..nx {
        for j in 0..ny {
            let k = i * ny + j;
            let (val, lo, hi) = sample(f, nx, ny, i as f64 - s * vel[k][0], j as f64 - s * vel[k][1]);
            fwd[k] = val;
            range[k] = (lo, hi);
        }
    }
    let mut out = vec![0.0; f.len()];
    for i in 0..nx {
        for j in 0..ny {
            let k = i * ny + j;
            let (back, _, _) = sample(&fwd, nx, ny, i as f64 + s * vel[k][0], j as f64 + s * vel[k][1]);
            let corrected = fwd[k] + 0.5 * (f[k] - back);
            out[k] = corrected.clamp(range[k].0, range[k].1);
        }
    }
    out
}

/// Velocity components that may be nonzero: fluid cells, minus the
/// component pointing into an adjacent solid cell.
fn free_components(solid: &[bool], nx: usize, ny: usize) -> Vec<[bool; 2]> {
    let mut free = vec![[false; 2]; nx * ny];
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let k = i * ny + j;
            if !solid[k] {
                free[k] = [!solid[k - ny] && !solid[k + ny], !solid[k - 1] && !solid[k + 1]];
            }
        }
    }
    free
}

/// Divergence on fluid cells, reading only free components.
fn fluid_div(v: &[[f64; 2]], free: &[[bool; 2]], solid: &[bool], nx: usize, ny: usize, dx: f64, out: &mut [f64]) {
    let h = 0.5 / dx;
    let c = |k: usize, d: usize| if free[k][d] { v[k][d] } else { 0.0 };
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let k = i * ny + j;
            out[k] = if solid[k] { 0.0 } else { h * (c(k + ny, 0) - c(k - ny, 0) + c(k + 1, 1) - c(k - 1, 1)) };
        }
    }
}

/// Adjoint of [`fluid_div`], written to free components only.
fn fluid_div_t(q: &[f64], free: &[[bool; 2]], solid: &[bool], nx: usize, ny: usize, dx: f64, out: &mut [[f64; 2]]) {
    let h = 0.5 / dx;
    let qf = |k: usize| if solid[k] { 0.0 } else { q[k] };
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let k = i * ny + j;
            let f = free[k];
            out[k] = [
                if f[0] { h * (qf(k - ny) - qf(k + ny)) } else { 0.0 },
                if f[1] { h * (qf(k - 1) - qf(k + 1)) } else { 0.0 },
            ];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `D D^T q = D v` and returns `q`. The operator is only
/// semi-definite, but the right-hand side lies in its range.
fn solve_projection(
    v: &[[f64; 2]],
    free: &[[bool; 2]],
    solid: &[bool],
    (nx, ny, dx): (usize, usize, f64),
    tol: f64,
) -> Result<Vec<f64>> {
    let n = nx * ny;
    let mut b = vec![0.0; n];
    fluid_div(v, free, solid, nx, ny, dx, &mut b);
    let bnorm = dot(&b, &b).sqrt();
    let mut q = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(q);
    }
    let mut r = b.clone();
    let mut d = r.clone();
    let mut gd = vec![[0.0; 2]; n];
    let mut ad = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let max_iter = 10 * n;
    for _ in 0..max_iter {
        fluid_div_t(&d, free, solid, nx, ny, dx, &mut gd);
        fluid_div(&gd, free, solid, nx, ny, dx, &mut ad);
        let dad = dot(&d, &ad);
        if dad <= 0.0 {
            break;
        }
        let alpha = rr / dad;
        for k in 0..n {
            q[k] += alpha * d[k];
            r[k] -= alpha * ad[k];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * bnorm {
            return Ok(q);
        }
        let beta = rr_new / rr;
        for k in 0..n {
            d[k] = r[k] + beta * d[k];
        }
        rr = rr_new;
    }
    Err(Error::SolverFailure { iterations: max_iter, residual: rr.sqrt() / bnorm })
}

/// Zeroes velocity in solids and into walls, then makes it discretely
/// divergence-free on fluid cells. Returns the pressure.
fn project(v: &mut [[f64; 2]], solid: &[bool], cfg: &SimConfig) -> Result<Vec<f64>> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let free = free_components(solid, nx, ny);
    for (vk, f) in v.iter_mut().zip(&free) {
        for d in 0..2 {
            if !f[d] {
                vk[d] = 0.0;
            }
        }
    }
    let q = solve_projection(v, &free, solid, (nx, ny, cfg.dx), cfg.cg_tol)?;
    let mut g = vec![[0.0; 2]; nx * ny];
    fluid_div_t(&q, &free, solid, nx, ny, cfg.dx, &mut g);
    for (vk, gk) in v.iter_mut().zip(&g) {
        vk[0] -= gk[0];
        vk[1] -= gk[1];
    }
    // v = v* - D^T q = v* - (dt / rho) grad p with grad = -D^T
    let scale = -cfg.density / cfg.dt;
    Ok(q.iter().zip(solid).map(|(&q, &s)| if s { 0.0 } else { scale * q }).collect())
}

/// Advances one time step.
pub fn step(state: &FluidState, cfg: &SimConfig) -> Result<FluidState> {
    state.check(cfg)?;
    let (nx, ny, dx, dt) = (cfg.nx, cfg.ny, cfg.dx, cfg.dt);
    let vel = &state.v;
    let mut u = advect(&state.u, vel, nx, ny, dt, dx);
    let vx: Vec<f64> = vel.iter().map(|v| v[0]).collect();
    let vy: Vec<f64> = vel.iter().map(|v| v[1]).collect();
    let ax = advect(&vx, vel, nx, ny, dt, dx);
    let ay = advect(&vy, vel, nx, ny, dt, dx);
    let mut v: Vec<[f64; 2]> = ax.into_iter().zip(ay).map(|(a, b)| [a, b]).collect();
    for (k, vk) in v.iter_mut().enumerate() {
        vk[0] += dt * cfg.force[0] * u[k];
        vk[1] += dt * cfg.force[1] * u[k];
    }
    if cfg.viscosity > 0.0 {
        let nu = cfg.viscosity * dt / (dx * dx);
        let old = v.clone();
        for i in 1..nx - 1 {
            for j in 1..ny - 1 {
                let k = i * ny + j;
                if state.solid[k] {
                    continue;
                }
                for c in 0..2 {
                    let nb = |k: usize| if state.solid[k] { 0.0 } else { old[k][c] };
                    v[k][c] += nu * (nb(k + ny) + nb(k - ny) + nb(k + 1) + nb(k - 1) - 4.0 * old[k][c]);
                }
            }
        }
    }
    if let Some(inlet) = cfg.inlet {
        for (uk, &is) in u.iter_mut().zip(&state.inlet) {
            if is {
                *uk = inlet.intensity;
            }
        }
    }
    let p = project(&mut v, &state.solid, cfg)?;
    for x in u.iter_mut() {
        *x = x.max(0.0);
    }
    Ok(FluidState { nx, ny, u, v, p, solid: state.solid.clone(), inlet: state.inlet.clone() })
}

/// Initial smoke as a sum of 3 to 6 Gaussian blobs away from the walls.
pub fn random_smoke(cfg: &SimConfig, rng: &mut impl Rng) -> Vec<f64> {
    let lx = cfg.dx * cfg.nx as f64;
    let ly = cfg.dx * cfg.ny as f64;
    let blobs: Vec<([f64; 2], f64, f64)> = (0..rng.gen_range(3..=6))
        .map(|_| {
            let c = [rng.gen_range(0.25..0.75) * lx, rng.gen_range(0.25..0.75) * ly];
            (c, rng.gen_range(0.04..0.1) * lx.min(ly), rng.gen_range(0.5..1.0))
        })
        .collect();
    let mut u = vec![0.0; cfg.nx * cfg.ny];
    for i in 0..cfg.nx {
        for j in 0..cfg.ny {
            let p = cfg.cell_center(i, j);
            u[i * cfg.ny + j] = blobs
                .iter()
                .map(|(c, s, a)| a * (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (2.0 * s * s)).exp())
                .sum();
        }
    }
    u
}

/// One stored frame of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub u: Vec<f64>,
    pub v: Vec<[f64; 2]>,
}

/// Runs `n_steps` solver steps from `initial_u` (or seeded random smoke
/// when there is no inlet; an empty domain otherwise) and keeps the state
/// before every `stride`-th step, starting with the initial state.
pub fn simulate_trajectory(cfg: &SimConfig, initial_u: Option<Vec<f64>>) -> Result<Vec<Frame>> {
    let mut state = FluidState::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    state.u = match initial_u {
        Some(u) if u.len() == state.u.len() => u,
        Some(u) => {
            return Err(Error::ShapeMismatch { op: "initial smoke", lhs: vec![u.len()], rhs: vec![state.u.len()] })
        }
        None if cfg.inlet.is_none() => random_smoke(cfg, &mut rng),
        None => state.u,
    };
    for (uk, &s) in state.u.iter_mut().zip(&state.solid) {
        if s {
            *uk = 0.0;
        }
    }
    let mut frames = Vec::with_capacity(cfg.n_frames());
    for k in 0..cfg.n_steps {
        if k % cfg.stride == 0 {
            frames.push(Frame { u: state.u.clone(), v: state.v.clone() });
        }
        if k + 1 < cfg.n_steps {
            state = step(&state, cfg)?;
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_cfg(n: usize) -> SimConfig {
        SimConfig { force: [0.0, 0.0], ..SimConfig::open(n, 10, 0) }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let cfg = free_cfg(16);
        let mut s = FluidState::new(&cfg).unwrap();
        s.u = random_smoke(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        for (u, &sol) in s.u.iter_mut().zip(&s.solid) {
            if sol {
                *u = 0.0;
            }
        }
        let next = step(&s, &cfg).unwrap();
        for (a, b) in next.u.iter().zip(&s.u) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(next.max_speed(), 0.0);
    }

    #[test]
    fn buoyancy_from_rest() {
        // with uniform smoke the buoyancy field is uniform; check the
        // pre-projection update by solving with a huge tolerance
        let mut cfg = SimConfig::open(16, 2, 0);
        cfg.cg_tol = 1e300;
        let mut s = FluidState::new(&cfg).unwrap();
        s.u = vec![1.0; 256];
        let next = step(&s, &cfg).unwrap();
        let k = s.idx(8, 8);
        assert!((next.v[k][1] - cfg.dt * 0.5).abs() < 1e-12);
        assert_eq!(next.v[k][0], 0.0);
    }

    #[test]
    fn analytic_divergence() {
        let (nx, ny, dx) = (10, 12, 0.3);
        let grid = |f: &dyn Fn(f64, f64) -> [f64; 2]| -> Vec<[f64; 2]> {
            (0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).map(|(i, j)| f(i as f64 * dx, j as f64 * dx)).collect()
        };
        let d = divergence(&grid(&|_, _| [1.5, -2.0]), nx, ny, dx);
        assert!(d.iter().all(|v| v.abs() < 1e-12));
        let d = divergence(&grid(&|x, y| [x, -y]), nx, ny, dx);
        assert!(d.iter().all(|v| v.abs() < 1e-10));
        let d = divergence(&grid(&|x, y| [x, y]), nx, ny, dx);
        for i in 1..nx - 1 {
            for j in 1..ny - 1 {
                assert!((d[i * ny + j] - 2.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_pair() {
        let cfg = SimConfig::obstacle(24, 4, 3);
        let s = FluidState::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 24 * 24;
        let v: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let free = free_components(&s.solid, 24, 24);
        let v: Vec<[f64; 2]> =
            v.iter().zip(&free).map(|(v, f)| [if f[0] { v[0] } else { 0.0 }, if f[1] { v[1] } else { 0.0 }]).collect();
        let q: Vec<f64> = (0..n).map(|k| if s.solid[k] { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
        let mut dv = vec![0.0; n];
        fluid_div(&v, &free, &s.solid, 24, 24, cfg.dx, &mut dv);
        let mut dtq = vec![[0.0; 2]; n];
        fluid_div_t(&q, &free, &s.solid, 24, 24, cfg.dx, &mut dtq);
        let lhs = dot(&dv, &q);
        let rhs: f64 = v.iter().zip(&dtq).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn projection_removes_divergence() {
        for cfg in [SimConfig::open(24, 4, 5), SimConfig::obstacle(32, 4, 6)] {
            let mut s = FluidState::new(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for k in 0..s.v.len() {
                if !s.solid[k] {
                    s.v[k] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                }
            }
            let mut v = s.v.clone();
            project(&mut v, &s.solid, &cfg).unwrap();
            s.v = v;
            let vmax = s.max_speed();
            assert!(s.max_fluid_divergence(cfg.dx) < 1e-5 * vmax, "{}", s.max_fluid_divergence(cfg.dx));
            assert!(s.v.iter().zip(&s.solid).all(|(v, &so)| !so || *v == [0.0; 2]));
        }
    }

    #[test]
    fn steps_stay_divergence_free_and_nonnegative() {
        for cfg in [SimConfig::open(32, 12, 8), SimConfig::obstacle(40, 12, 9)] {
            let mut s = FluidState::new(&cfg).unwrap();
            if cfg.inlet.is_none() {
                s.u = random_smoke(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
            }
            for _ in 0..cfg.n_steps {
                s = step(&s, &cfg).unwrap();
                assert!(s.max_fluid_divergence(cfg.dx) <= 1e-5 * s.max_speed().max(1e-300));
                assert!(s.u.iter().all(|&u| u >= 0.0));
                assert!(s.v.iter().zip(&s.solid).all(|(v, &so)| !so || *v == [0.0; 2]));
            }
            assert!(s.max_speed() > 0.0);
        }
    }

    #[test]
    fn trajectory_is_deterministic_and_strided() {
        let cfg = SimConfig::obstacle(24, 7, 2);
        let a = simulate_trajectory(&cfg, None).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, simulate_trajectory(&cfg, None).unwrap());
        let one = SimConfig { n_steps: 1, ..SimConfig::open(16, 1, 3) };
        let f = simulate_trajectory(&one, None).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].v, vec![[0.0; 2]; 256]);
    }

    #[test]
    fn smoke_mass_is_nearly_conserved() {
        // advection is not conservative where smoke piles up against a wall,
        // so the budget is checked while the plume stays clear of the walls
        let cfg = SimConfig { dt: 0.5, force: [0.0, 0.1], ..SimConfig::open(48, 31, 11) };
        let frames = simulate_trajectory(&cfg, None).unwrap();
        let near_wall = |u: &[f64]| {
            let n = cfg.nx;
            (0..n).flat_map(|i| [(i, 1), (i, n - 2), (1, i), (n - 2, i)]).map(|(i, j)| u[i * n + j]).fold(0.0, f64::max)
        };
        let m0: f64 = frames[0].u.iter().sum();
        let last = &frames.last().unwrap().u;
        let m1: f64 = last.iter().sum();
        assert!(near_wall(last) <= 1.5 * near_wall(&frames[0].u), "plume piled up at a wall");
        assert!(frames.last().unwrap().v.iter().any(|v| v[1].abs() > 0.1));
        assert!(((m1 - m0) / m0).abs() < 0.02, "{m0} -> {m1}");
    }

    fn rot90<T: Copy>(f: &[T], n: usize) -> Vec<T> {
        // new[n - 1 - j][i] = old[i][j]
        let mut out = f.to_vec();
        for i in 0..n {
            for j in 0..n {
                out[(n - 1 - j) * n + i] = f[i * n + j];
            }
        }
        out
    }

    fn transpose<T: Copy>(f: &[T], n: usize) -> Vec<T> {
        let mut out = f.to_vec();
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = f[i * n + j];
            }
        }
        out
    }

    type VectorMap<'a> = dyn Fn(&[[f64; 2]]) -> Vec<[f64; 2]> + 'a;

    fn covariance_gap(n: usize, map: &dyn Fn(&[f64]) -> Vec<f64>, mapv: &VectorMap<'_>, f2: [f64; 2]) -> f64 {
        let mut cfg = SimConfig::open(n, 8, 13);
        cfg.force = [0.3, 0.5];
        cfg.cg_tol = 1e-12;
        let u0 = random_smoke(&cfg, &mut ChaCha8Rng::seed_from_u64(13));
        let a = simulate_trajectory(&cfg, Some(u0.clone())).unwrap();
        let cfg2 = SimConfig { force: f2, ..cfg.clone() };
        let b = simulate_trajectory(&cfg2, Some(map(&u0))).unwrap();
        let mut gap = 0.0f64;
        for (fa, fb) in a.iter().zip(&b) {
            let scale = fa.u.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
            gap = gap.max(map(&fa.u).iter().zip(&fb.u).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale);
            let vs = fa.v.iter().fold(1e-12f64, |m, v| m.max(v[0].abs()).max(v[1].abs()));
            let mv = mapv(&fa.v);
            gap = gap.max(
                mv.iter().zip(&fb.v).map(|(x, y)| (x[0] - y[0]).abs().max((x[1] - y[1]).abs())).fold(0.0, f64::max)
                    / vs,
            );
        }
        gap
    }

    #[test]
    fn grid_symmetry_covariance() {
        let n = 24;
        let g = covariance_gap(
            n,
            &|f| rot90(f, n),
            &|v| rot90(v, n).into_iter().map(|v| [-v[1], v[0]]).collect(),
            [-0.5, 0.3],
        );
        assert!(g < 1e-6, "rotation {g}");
        let g = covariance_gap(
            n,
            &|f| transpose(f, n),
            &|v| transpose(v, n).into_iter().map(|v| [v[1], v[0]]).collect(),
            [0.5, 0.3],
        );
        assert!(g < 1e-6, "transpose {g}");
    }

    #[test]
    fn config_validation() {
        assert!(FluidState::new(&SimConfig::open(4, 1, 0)).is_err());
        let mut c = SimConfig::open(16, 1, 0);
        c.dt = 0.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::obstacle(16, 1, 0);
        c.obstacle = Some(Obstacle { center: [50.0, 50.0], radius: 60.0 });
        assert!(c.validate().is_err());
    }

    #[test]
    fn solver_failure_is_reported() {
        let mut cfg = SimConfig::open(16, 2, 0);
        cfg.cg_tol = 1e-300;
        let mut s = FluidState::new(&cfg).unwrap();
        s.u = vec![1.0; 256];
        s.u[100] = 3.0;
        assert!(matches!(step(&s, &cfg), Err(Error::SolverFailure { .. })));
    }
}
