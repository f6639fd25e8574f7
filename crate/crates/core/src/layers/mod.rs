//! Equivariant building blocks over (scalar, rotational) feature pairs.
//!
//! Rotational features of `N` nodes with `R` vector channels are stored as an
//! `[N, 2R]` array of interleaved `(x, y)` pairs. Every layer that mixes
//! channels first rotates the pairs into a local reference frame, applies an
//! unconstrained map there and rotates the result back.

mod compare;
mod message;
mod norm;
mod so2;

use serde::{Deserialize, Serialize};

use crate::engine::{Array, Init, ParamStore, Real, Tape, Var};
use crate::{Error, Result};

pub use compare::{fourier_directions, fourier_pointwise_nonlin, RotmatLinear};
pub use message::{ConvKind, MessageContext, MessageLayer, NodeEmbedding, RelativeEdgeEmbedding};
pub use norm::{LayerNorm, SeparableLayerNorm, LN_EPS};
pub use so2::{se2_activation, FeedForward, OutputRot, OutputScalar, So2Mlp};

/// Slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Scalar and rotational node features recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePair {
    /// `[N, C_s]`
    pub scalar: Var,
    /// `[N, 2 N_r]`
    pub rot: Var,
}

impl FeaturePair {
    pub fn new<T: Real>(t: &Tape<T>, scalar: Var, rot: Var) -> Result<Self> {
        let (s, r) = (t.value(scalar), t.value(rot));
        if s.rows() != r.rows() || r.cols() % 2 != 0 {
            return Err(Error::ShapeMismatch { op: "feature_pair", lhs: s.shape().to_vec(), rhs: r.shape().to_vec() });
        }
        Ok(FeaturePair { scalar, rot })
    }

    /// `(N, C_s, N_r)`
    pub fn dims<T: Real>(&self, t: &Tape<T>) -> (usize, usize, usize) {
        let s = t.value(self.scalar);
        (s.rows(), s.cols(), t.value(self.rot).cols() / 2)
    }

    pub fn add<T: Real>(&self, t: &mut Tape<T>, other: &FeaturePair) -> Result<Self> {
        Ok(FeaturePair { scalar: t.add(self.scalar, other.scalar)?, rot: t.add(self.rot, other.rot)? })
    }

    /// Splits the columns of `x` into a scalar block of width `cs` and the
    /// remaining rotational block.
    pub fn split<T: Real>(t: &mut Tape<T>, x: Var, cs: usize) -> Result<Self> {
        let cols = t.value(x).cols();
        let scalar = t.slice_cols(x, 0, cs)?;
        let rot = t.slice_cols(x, cs, cols)?;
        FeaturePair::new(t, scalar, rot)
    }
}

/// Pointwise nonlinearity used by the comparison ops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Real>(self, t: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => t.leaky_relu(x, T::of(s)),
        }
    }
}

/// Creates named parameters in a double-precision store.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f64>,
    init: &'a mut Init,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, init: &'a mut Init) -> Self {
        ParamBuilder { store, init }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        if dout == 0 {
            return Err(Error::InvalidConfig(format!("{name}: zero output width")));
        }
        let w = self.store.add(format!("{name}.w"), self.init.uniform(vec![din, dout], din))?;
        let b = self.store.add(format!("{name}.b"), Array::zeros(vec![dout]))?;
        Ok(Linear { w, b, din, dout })
    }

    pub fn mlp(&mut self, name: &str, dims: &[usize]) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(format!("{name}: an MLP needs at least two widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| self.linear(&format!("{name}.{k}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    /// Vector of `n` entries drawn like a weight with `fan_in` inputs.
    pub fn uniform(&mut self, name: &str, n: usize, fan_in: usize) -> Result<usize> {
        self.store.add(name.to_string(), self.init.uniform(vec![n], fan_in.max(1)))
    }

    pub fn constant(&mut self, name: &str, n: usize, value: f64) -> Result<usize> {
        self.store.add(name.to_string(), Array::full(vec![n], value))
    }
}

/// Dense affine map `x W + b` with `W: [din, dout]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = t.param(self.w)?;
        let b = t.param(self.b)?;
        let z = t.matmul(x, w)?;
        t.add_row(z, b)
    }

    pub fn n_params(&self) -> usize {
        (self.din + 1) * self.dout
    }
}

/// Stack of linear layers with leaky ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            h = l.forward(t, h)?;
            if k < last {
                h = t.leaky_relu(h, T::of(LEAKY_SLOPE));
            }
        }
        Ok(h)
    }

    pub fn din(&self) -> usize {
        self.layers[0].din
    }

    pub fn dout(&self) -> usize {
        self.layers.last().unwrap().dout
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Linear::n_params).sum()
    }
}

/// Concatenates the non-empty parts along columns.
pub(crate) fn concat_nonempty<T: Real>(t: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let keep: Vec<Var> = parts.iter().copied().filter(|&p| t.value(p).cols() > 0).collect();
    match keep.len() {
        0 => t.concat(&parts[..1]),
        1 => Ok(keep[0]),
        _ => t.concat(&keep),
    }
}
