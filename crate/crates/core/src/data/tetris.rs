use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{center_of_mass_zero, Rot2};
use crate::{Error, Result};

pub const TETRIS_CLASSES: usize = 7;

pub const TETRIS_NAMES: [&str; TETRIS_CLASSES] = ["I", "O", "T", "S", "Z", "J", "L"];

/// The seven tetrominoes on the unit lattice, uncentred.
pub fn tetris_shapes() -> [[[f64; 2]; 4]; TETRIS_CLASSES] {
    [
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]],
        [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [1.0, 1.0]],
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [2.0, 1.0]],
        [[0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [2.0, 0.0]],
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]],
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 1.0]],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TetrisSample {
    pub positions: [[f64; 2]; 4],
    pub label: usize,
}

/// Training rows rotate each shape by `0, angle, 2 angle, ...`; the test
/// mode draws uniform random rotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TetrisSpec {
    Rotations { copies_per_shape: usize, rotation_angle: f64 },
    RandomTest { per_shape: usize },
}

impl TetrisSpec {
    /// `copies x (2 pi / copies)`, the training rows with 1, 2, 4 or 8 copies.
    pub fn row(copies_per_shape: usize) -> TetrisSpec {
        TetrisSpec::Rotations { copies_per_shape, rotation_angle: 2.0 * PI / copies_per_shape.max(1) as f64 }
    }

    pub fn test() -> TetrisSpec {
        TetrisSpec::RandomTest { per_shape: 100 }
    }
}

fn place(shape: &[[f64; 2]; 4], angle: f64) -> Result<[[f64; 2]; 4]> {
    let rot = Rot2::new(angle)?;
    let c = center_of_mass_zero(shape);
    Ok([rot.apply(c[0]), rot.apply(c[1]), rot.apply(c[2]), rot.apply(c[3])])
}

pub fn gen_tetris(spec: TetrisSpec, seed: u64) -> Result<Vec<TetrisSample>> {
    let shapes = tetris_shapes();
    let mut out = Vec::new();
    match spec {
        TetrisSpec::Rotations { copies_per_shape, rotation_angle } => {
            if copies_per_shape == 0 || !rotation_angle.is_finite() {
                return Err(Error::InvalidArgument("need at least one copy and a finite angle".into()));
            }
            for (label, s) in shapes.iter().enumerate() {
                for k in 0..copies_per_shape {
                    out.push(TetrisSample { positions: place(s, k as f64 * rotation_angle)?, label });
                }
            }
        }
        TetrisSpec::RandomTest { per_shape } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (label, s) in shapes.iter().enumerate() {
                for _ in 0..per_shape {
                    out.push(TetrisSample { positions: place(s, rng.gen_range(0.0..2.0 * PI))?, label });
                }
            }
        }
    }
    Ok(out)
}
