use std::sync::Arc;

use super::{concat_nonempty, Activation, FeaturePair, Mlp, ParamBuilder, SeparableLayerNorm};
use crate::engine::{Real, RotTable, Tape, Var};
use crate::{Error, Result};

/// Rotate into the local frame, apply an MLP, rotate back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct So2Mlp {
    pub mlp: Mlp,
    pub s_in: usize,
    pub r_in: usize,
    pub s_out: usize,
    pub r_out: usize,
}

impl So2Mlp {
    /// `hidden` lists the hidden widths; input and output widths are
    /// `s_in + 2 r_in` and `s_out + 2 r_out`.
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        (s_in, r_in): (usize, usize),
        hidden: &[usize],
        (s_out, r_out): (usize, usize),
    ) -> Result<Self> {
        let mut dims = vec![s_in + 2 * r_in];
        dims.extend_from_slice(hidden);
        dims.push(s_out + 2 * r_out);
        Ok(So2Mlp { mlp: b.mlp(name, &dims)?, s_in, r_in, s_out, r_out })
    }

    /// Wraps an existing MLP whose output width must split into scalars and
    /// pairs.
    pub fn from_mlp(mlp: Mlp, (s_in, r_in): (usize, usize), s_out: usize) -> Result<Self> {
        if mlp.din() != s_in + 2 * r_in {
            return Err(Error::InvalidConfig(format!(
                "MLP takes {} inputs, features have {}",
                mlp.din(),
                s_in + 2 * r_in
            )));
        }
        let rest = mlp
            .dout()
            .checked_sub(s_out)
            .ok_or_else(|| Error::InvalidConfig("scalar output wider than the MLP".into()))?;
        if rest % 2 != 0 {
            return Err(Error::InvalidConfig(format!("rotational output width {rest} is not a multiple of two")));
        }
        Ok(So2Mlp { mlp, s_in, r_in, s_out, r_out: rest / 2 })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair, frame: &Arc<RotTable<T>>) -> Result<FeaturePair> {
        let aligned = align(t, x.rot, frame)?;
        let input = concat_nonempty(t, &[x.scalar, aligned])?;
        let out = self.mlp.forward(t, input)?;
        let scalar = t.slice_cols(out, 0, self.s_out)?;
        let rot = t.slice_cols(out, self.s_out, self.s_out + 2 * self.r_out)?;
        let rot = unalign(t, rot, frame)?;
        Ok(FeaturePair { scalar, rot })
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }
}

/// Rotation into the frame; a no-op for empty rotational blocks.
pub(crate) fn align<T: Real>(t: &mut Tape<T>, rot: Var, frame: &Arc<RotTable<T>>) -> Result<Var> {
    if t.value(rot).cols() == 0 {
        Ok(rot)
    } else {
        t.rotate(rot, frame, false)
    }
}

pub(crate) fn unalign<T: Real>(t: &mut Tape<T>, rot: Var, frame: &Arc<RotTable<T>>) -> Result<Var> {
    if t.value(rot).cols() == 0 {
        Ok(rot)
    } else {
        t.rotate(rot, frame, true)
    }
}

/// Pointwise nonlinearity applied in the aligned frame.
pub fn se2_activation<T: Real>(
    t: &mut Tape<T>,
    x: &FeaturePair,
    frame: &Arc<RotTable<T>>,
    act: Activation,
) -> Result<FeaturePair> {
    if act == Activation::Identity {
        return Ok(*x);
    }
    let cs = t.value(x.scalar).cols();
    let aligned = align(t, x.rot, frame)?;
    let cat = concat_nonempty(t, &[x.scalar, aligned])?;
    let y = act.apply(t, cat);
    let mut out = FeaturePair::split(t, y, cs)?;
    out.rot = unalign(t, out.rot, frame)?;
    Ok(out)
}

/// `x + so2_mlp(norm(x))`; the norm is skipped when absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForward {
    pub norm: Option<SeparableLayerNorm>,
    pub mlp: So2Mlp,
}

impl FeedForward {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        (cs, r): (usize, usize),
        hidden: usize,
        with_norm: bool,
    ) -> Result<Self> {
        let norm = if with_norm { Some(SeparableLayerNorm::new(b, &format!("{name}.norm"), cs, r)?) } else { None };
        let mlp = So2Mlp::new(b, &format!("{name}.mlp"), (cs, r), &[hidden, hidden], (cs, r))?;
        Ok(FeedForward { norm, mlp })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair, frame: &Arc<RotTable<T>>) -> Result<FeaturePair> {
        if (self.mlp.s_in, self.mlp.r_in) != (self.mlp.s_out, self.mlp.r_out) {
            return Err(Error::InvalidConfig("feed-forward input and output widths differ".into()));
        }
        let h = match &self.norm {
            Some(n) => n.forward(t, x)?,
            None => *x,
        };
        let y = self.mlp.forward(t, &h, frame)?;
        x.add(t, &y)
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + self.norm.as_ref().map_or(0, SeparableLayerNorm::n_params)
    }
}

/// Rotation-invariant head: align, concatenate, MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputScalar {
    pub mlp: Mlp,
}

impl OutputScalar {
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair, frame: &Arc<RotTable<T>>) -> Result<Var> {
        let aligned = align(t, x.rot, frame)?;
        let input = concat_nonempty(t, &[x.scalar, aligned])?;
        self.mlp.forward(t, input)
    }
}

/// Rotation-equivariant head: align, MLP, rotate back. With `equivariant`
/// off the output pairs are left in the global frame (invariant baselines).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputRot {
    pub mlp: Mlp,
    pub equivariant: bool,
}

impl OutputRot {
    pub fn new(mlp: Mlp, equivariant: bool) -> Result<Self> {
        if !mlp.dout().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rotational output width {} is not a multiple of two",
                mlp.dout()
            )));
        }
        Ok(OutputRot { mlp, equivariant })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair, frame: &Arc<RotTable<T>>) -> Result<Var> {
        let aligned = align(t, x.rot, frame)?;
        let input = concat_nonempty(t, &[x.scalar, aligned])?;
        let out = self.mlp.forward(t, input)?;
        if self.equivariant {
            unalign(t, out, frame)
        } else {
            Ok(out)
        }
    }
}
