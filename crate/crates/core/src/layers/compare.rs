//! Alternative equivariant ops used only for comparison: a point-sampled
//! Fourier nonlinearity and a linear map built from learned rotation
//! matrices.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{Activation, FeaturePair, Mlp, ParamBuilder};
use crate::engine::{Array, Real, Tape, Var};
use crate::{Error, Result};

/// Sampling angles: `2 pi k / n` for `n >= 3`. Two samples cannot be
/// equiangular and still span the plane, so `n = 2` uses `{0, pi / 2}`.
pub fn fourier_directions(n: usize) -> Result<Vec<f64>> {
    match n {
        0 | 1 => Err(Error::InvalidArgument(format!("fourier nonlinearity needs at least 2 samples, got {n}"))),
        2 => Ok(vec![0.0, PI / 2.0]),
        _ => Ok((0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()),
    }
}

/// `G^-1(f(G(x)))` per channel. `G` samples `c + v . u_k` on the unit
/// directions `u_k`, where `c` is the channel's scalar (if the scalar block
/// has one column per rotational channel) or zero (if it is empty). `G^-1`
/// is the least-squares projection back onto degree 0 and 1.
pub fn fourier_pointwise_nonlin<T: Real>(
    t: &mut Tape<T>,
    x: &FeaturePair,
    n_samples: usize,
    act: Activation,
) -> Result<FeaturePair> {
    let phis = fourier_directions(n_samples)?;
    let (nn, cs, r) = x.dims(t);
    let with_scalar = cs > 0;
    if with_scalar && cs != r {
        return Err(Error::ShapeMismatch { op: "fourier_pointwise_nonlin", lhs: vec![nn, cs], rhs: vec![nn, r] });
    }
    if with_scalar && n_samples < 3 {
        return Err(Error::InvalidArgument("a scalar channel needs at least 3 samples to be recoverable".into()));
    }
    let n = n_samples;
    let (wv, ws) = if n == 2 { (1.0, 0.0) } else { (2.0 / n as f64, 1.0 / n as f64) };
    let mut sample = Array::<T>::zeros(vec![2 * r, r * n]);
    let mut back = Array::<T>::zeros(vec![r * n, 2 * r]);
    for c in 0..r {
        for (k, phi) in phis.iter().enumerate() {
            let (s, co) = phi.sin_cos();
            let col = c * n + k;
            sample.data_mut()[2 * c * r * n + col] = T::of(co);
            sample.data_mut()[(2 * c + 1) * r * n + col] = T::of(s);
            back.data_mut()[col * 2 * r + 2 * c] = T::of(wv * co);
            back.data_mut()[col * 2 * r + 2 * c + 1] = T::of(wv * s);
        }
    }
    let g = t.constant(sample);
    let mut f = t.matmul(x.rot, g)?;
    if with_scalar {
        let mut spread = Array::<T>::zeros(vec![r, r * n]);
        let mut mean = Array::<T>::zeros(vec![r * n, r]);
        for c in 0..r {
            for k in 0..n {
                spread.data_mut()[c * r * n + c * n + k] = T::one();
                mean.data_mut()[(c * n + k) * r + c] = T::of(ws);
            }
        }
        let sp = t.constant(spread);
        let lifted = t.matmul(x.scalar, sp)?;
        f = t.add(f, lifted)?;
        let fa = act.apply(t, f);
        let m = t.constant(mean);
        let b = t.constant(back);
        Ok(FeaturePair { scalar: t.matmul(fa, m)?, rot: t.matmul(fa, b)? })
    } else {
        let fa = act.apply(t, f);
        let b = t.constant(back);
        Ok(FeaturePair { scalar: x.scalar, rot: t.matmul(fa, b)? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum RotmatWeights {
    /// `w1` and `w2`, each `[r_out * r_in]`
    Fixed(usize, usize),
    /// MLP of the node scalars emitting `[w1 | w2]` per node
    Conditioned(Mlp),
}

/// `v_out[o] = sum_i R(w1[o,i], w2[o,i]) v_in[i]` with
/// `R(a, b) = [[a, -b], [b, a]]`. Such matrices commute with rotations, so
/// no alignment is needed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotmatLinear {
    weights: RotmatWeights,
    pub r_in: usize,
    pub r_out: usize,
}

impl RotmatLinear {
    pub fn new(b: &mut ParamBuilder, name: &str, r_in: usize, r_out: usize) -> Result<Self> {
        let k = r_in * r_out;
        let w1 = b.uniform(&format!("{name}.w1"), k, r_in)?;
        let w2 = b.uniform(&format!("{name}.w2"), k, r_in)?;
        Ok(RotmatLinear { weights: RotmatWeights::Fixed(w1, w2), r_in, r_out })
    }

    /// Weights produced per node by an MLP `cs -> hidden -> 2 r_out r_in`.
    pub fn conditioned(
        b: &mut ParamBuilder,
        name: &str,
        cs: usize,
        hidden: usize,
        r_in: usize,
        r_out: usize,
    ) -> Result<Self> {
        let mlp = b.mlp(name, &[cs, hidden, 2 * r_in * r_out])?;
        Ok(RotmatLinear { weights: RotmatWeights::Conditioned(mlp), r_in, r_out })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair) -> Result<Var> {
        let (n, _, r) = x.dims(t);
        if r != self.r_in {
            return Err(Error::ShapeMismatch { op: "rotmat_linear", lhs: vec![n, 2 * r], rhs: vec![n, 2 * self.r_in] });
        }
        let k = self.r_in * self.r_out;
        let xi: Arc<[usize]> = (0..k).map(|p| 2 * (p % self.r_in)).collect();
        let yi: Arc<[usize]> = (0..k).map(|p| 2 * (p % self.r_in) + 1).collect();
        let xr = t.gather_cols(x.rot, &xi)?;
        let yr = t.gather_cols(x.rot, &yi)?;
        let (ax, by, bx, ay) = match &self.weights {
            RotmatWeights::Fixed(w1, w2) => {
                let (w1, w2) = (t.param(*w1)?, t.param(*w2)?);
                (t.mul_row(xr, w1)?, t.mul_row(yr, w2)?, t.mul_row(xr, w2)?, t.mul_row(yr, w1)?)
            }
            RotmatWeights::Conditioned(mlp) => {
                let w = mlp.forward(t, x.scalar)?;
                let w1 = t.slice_cols(w, 0, k)?;
                let w2 = t.slice_cols(w, k, 2 * k)?;
                (t.mul(xr, w1)?, t.mul(yr, w2)?, t.mul(xr, w2)?, t.mul(yr, w1)?)
            }
        };
        let ox = t.sub(ax, by)?;
        let oy = t.add(bx, ay)?;
        let mut block = Array::<T>::zeros(vec![k, self.r_out]);
        for p in 0..k {
            block.data_mut()[p * self.r_out + p / self.r_in] = T::one();
        }
        let s = t.constant(block);
        let sx = t.matmul(ox, s)?;
        let sy = t.matmul(oy, s)?;
        let cat = t.concat(&[sx, sy])?;
        let inter: Arc<[usize]> = (0..self.r_out).flat_map(|j| [j, self.r_out + j]).collect();
        t.gather_cols(cat, &inter)
    }

    pub fn n_params(&self) -> usize {
        match &self.weights {
            RotmatWeights::Fixed(..) => 2 * self.r_in * self.r_out,
            RotmatWeights::Conditioned(m) => m.n_params(),
        }
    }
}
