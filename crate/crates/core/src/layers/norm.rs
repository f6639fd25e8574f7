use std::sync::Arc;

use super::{FeaturePair, ParamBuilder};
use crate::engine::{Real, Tape, Var};
use crate::Result;

/// Added under every normalization square root.
pub const LN_EPS: f64 = 1e-5;

/// `(x - mean) / sqrt(var + eps)` over the columns of each row.
fn standardize<T: Real>(t: &mut Tape<T>, x: Var) -> Result<Var> {
    let mu = t.row_mean(x);
    let c = t.sub_col(x, mu)?;
    let sq = t.square(c);
    let var = t.row_mean(sq);
    let var = t.add_const(var, T::of(LN_EPS));
    let sd = t.sqrt(var);
    t.div_col(c, sd)
}

/// Standard layer norm with gain and bias, used inside attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: b.constant(&format!("{name}.gamma"), dim, 1.0)?,
            beta: b.constant(&format!("{name}.beta"), dim, 0.0)?,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let z = standardize(t, x)?;
        let g = t.param(self.gamma)?;
        let b = t.param(self.beta)?;
        let z = t.mul_row(z, g)?;
        t.add_row(z, b)
    }

    pub fn n_params(&self) -> usize {
        2 * self.dim
    }
}

/// Normalizes scalar and rotational channels independently. The rotational
/// part is only rescaled, never shifted, so it commutes with rotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeparableLayerNorm {
    pub gamma_s: usize,
    pub gamma_r: Option<usize>,
    pub cs: usize,
    pub r: usize,
}

impl SeparableLayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, cs: usize, r: usize) -> Result<Self> {
        let gamma_s = b.constant(&format!("{name}.gamma_s"), cs, 1.0)?;
        let gamma_r = if r > 0 { Some(b.constant(&format!("{name}.gamma_r"), r, 1.0)?) } else { None };
        Ok(SeparableLayerNorm { gamma_s, gamma_r, cs, r })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair) -> Result<FeaturePair> {
        let z = standardize(t, x.scalar)?;
        let gs = t.param(self.gamma_s)?;
        let scalar = t.mul_row(z, gs)?;
        let rot = match self.gamma_r {
            None => x.rot,
            Some(gr) => {
                // mean of squares over all 2R entries is the channel mean of
                // half the squared norms
                let sq = t.square(x.rot);
                let ms = t.row_mean(sq);
                let ms = t.add_const(ms, T::of(LN_EPS));
                let sigma = t.sqrt(ms);
                let y = t.div_col(x.rot, sigma)?;
                let g = t.param(gr)?;
                let pairs: Arc<[usize]> = (0..2 * self.r).map(|k| k / 2).collect();
                let g2 = t.gather_rows(g, &pairs)?;
                t.mul_row(y, g2)?
            }
        };
        Ok(FeaturePair { scalar, rot })
    }

    pub fn n_params(&self) -> usize {
        self.cs + self.r
    }
}
