use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::so2::{align, unalign};
use super::{concat_nonempty, FeaturePair, LayerNorm, Linear, Mlp, ParamBuilder, So2Mlp, LEAKY_SLOPE};
use crate::engine::{Array, Real, RotTable, Tape, Var};
use crate::geom::{bessel_basis, Graph2D, RadialBasisConfig};
use crate::{Error, Result};

/// Message function family. The `Inv*` variants are the non-equivariant
/// baselines: same wiring, no rotational channels, no rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvKind {
    Se2Mlp,
    Se2Trans,
    InvMlp,
    InvTrans,
}

impl ConvKind {
    pub fn is_equivariant(self) -> bool {
        matches!(self, ConvKind::Se2Mlp | ConvKind::Se2Trans)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ConvKind::Se2Trans | ConvKind::InvTrans)
    }

    pub fn invariant(self) -> ConvKind {
        match self {
            ConvKind::Se2Mlp | ConvKind::InvMlp => ConvKind::InvMlp,
            ConvKind::Se2Trans | ConvKind::InvTrans => ConvKind::InvTrans,
        }
    }

    pub fn equivariant(self) -> ConvKind {
        match self {
            ConvKind::Se2Mlp | ConvKind::InvMlp => ConvKind::Se2Mlp,
            ConvKind::Se2Trans | ConvKind::InvTrans => ConvKind::Se2Trans,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Se2Mlp => "se2-mlp",
            ConvKind::Se2Trans => "se2-trans",
            ConvKind::InvMlp => "inv-mlp",
            ConvKind::InvTrans => "inv-trans",
        }
    }
}

impl std::str::FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se2-mlp" => Ok(ConvKind::Se2Mlp),
            "se2-trans" => Ok(ConvKind::Se2Trans),
            "inv-mlp" => Ok(ConvKind::InvMlp),
            "inv-trans" => Ok(ConvKind::InvTrans),
            _ => Err(Error::InvalidArgument(format!("unknown conv kind {s}"))),
        }
    }
}

/// Per-graph geometry consumed by the layers: edge index lists, radial
/// basis, raw relative vectors and the local and global frames.
#[derive(Debug, Clone)]
pub struct MessageContext<T> {
    pub n_nodes: usize,
    /// receiving node `i` of edge `(i, j)`
    pub recv: Arc<[usize]>,
    /// sending node `j` of edge `(i, j)`
    pub send: Arc<[usize]>,
    /// `[E, n_base]`
    pub basis: Array<T>,
    /// `[E, 2]`, `r_j - r_i`
    pub rel: Array<T>,
    pub theta: Arc<RotTable<T>>,
    pub alpha: Arc<RotTable<T>>,
}

impl<T: Real> MessageContext<T> {
    pub fn new(graph: &Graph2D, radial: &RadialBasisConfig) -> Result<Self> {
        radial.validate()?;
        let geo = graph.edge_geometry()?;
        let e = geo.len();
        let mut basis = Vec::with_capacity(e * radial.n_base);
        let mut rel = Vec::with_capacity(2 * e);
        let mut theta = Vec::with_capacity(e);
        for g in &geo {
            basis.extend(bessel_basis(g.dist, radial).into_iter().map(T::of));
            rel.push(T::of(g.rel_vec[0]));
            rel.push(T::of(g.rel_vec[1]));
            theta.push(g.theta);
        }
        Ok(MessageContext {
            n_nodes: graph.n_nodes(),
            recv: graph.edges.iter().map(|e| e.0).collect(),
            send: graph.edges.iter().map(|e| e.1).collect(),
            basis: Array::new(vec![e, radial.n_base], basis)?,
            rel: Array::new(vec![e, 2], rel)?,
            theta: Arc::new(RotTable::from_angles(&theta)),
            alpha: Arc::new(RotTable::from_angles(graph.global_angles())),
        })
    }

    pub fn n_edges(&self) -> usize {
        self.recv.len()
    }

    pub fn n_base(&self) -> usize {
        self.basis.cols()
    }
}

/// Input embedding: `MLP` on scalars, `SO2-MLP` without scalars on vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeEmbedding {
    pub scalar: Mlp,
    pub rot: Option<So2Mlp>,
}

impl NodeEmbedding {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        (s_in, r_in): (usize, usize),
        (cs, r): (usize, usize),
    ) -> Result<Self> {
        let scalar = b.mlp(&format!("{name}.scalar"), &[s_in, cs, cs])?;
        let rot = match (r_in, r) {
            (0, 0) => None,
            (0, _) | (_, 0) => {
                return Err(Error::InvalidConfig(
                    "rotational inputs and hidden rotational channels must both be present or both absent".into(),
                ))
            }
            _ => Some(So2Mlp::new(b, &format!("{name}.rot"), (0, r_in), &[2 * r], (0, r))?),
        };
        Ok(NodeEmbedding { scalar, rot })
    }

    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        ctx: &MessageContext<T>,
        raw_scalar: Var,
        raw_rot: Var,
    ) -> Result<FeaturePair> {
        let scalar = self.scalar.forward(t, raw_scalar)?;
        let rot = match &self.rot {
            Some(m) => {
                let n = t.value(raw_rot).rows();
                let empty = t.constant(Array::zeros(vec![n, 0]));
                m.forward(t, &FeaturePair { scalar: empty, rot: raw_rot }, &ctx.alpha)?.rot
            }
            None => t.constant(Array::zeros(vec![t.value(raw_scalar).rows(), 0])),
        };
        FeaturePair::new(t, scalar, rot)
    }

    pub fn n_params(&self) -> usize {
        self.scalar.n_params() + self.rot.as_ref().map_or(0, So2Mlp::n_params)
    }
}

/// Position-only embedding: each node sums an SO2-MLP of its relative
/// vectors `r_j - r_i`, aligned by the edge frame. Without alignment it is
/// a plain MLP of the raw vectors (invariant baseline).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelativeEdgeEmbedding {
    pub mlp: Mlp,
    pub cs: usize,
    pub r: usize,
    pub align: bool,
}

impl RelativeEdgeEmbedding {
    pub fn new(b: &mut ParamBuilder, name: &str, (cs, r): (usize, usize), hidden: usize, align: bool) -> Result<Self> {
        Ok(RelativeEdgeEmbedding { mlp: b.mlp(name, &[2, hidden, cs + 2 * r])?, cs, r, align })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ctx: &MessageContext<T>) -> Result<FeaturePair> {
        let rel = t.constant(ctx.rel.clone());
        let rel = if self.align { t.rotate(rel, &ctx.theta, false)? } else { rel };
        let msg = self.mlp.forward(t, rel)?;
        let msg = rotate_back_messages(t, msg, self.cs, &ctx.theta, self.align)?;
        let agg = t.scatter_add_rows(msg, &ctx.recv, ctx.n_nodes)?;
        FeaturePair::split(t, agg, self.cs)
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }
}

fn rotate_back_messages<T: Real>(
    t: &mut Tape<T>,
    msg: Var,
    cs: usize,
    theta: &Arc<RotTable<T>>,
    equivariant: bool,
) -> Result<Var> {
    let cols = t.value(msg).cols();
    if !equivariant || cols == cs {
        return Ok(msg);
    }
    let ms = t.slice_cols(msg, 0, cs)?;
    let mr = t.slice_cols(msg, cs, cols)?;
    let mr = unalign(t, mr, theta)?;
    concat_nonempty(t, &[ms, mr])
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum MessageFn {
    Mlp(Mlp),
    Attention { z: Linear, norm: LayerNorm, score: Linear, value: Linear },
}

/// One message-passing layer: build `m_ij` in the edge frame, apply the
/// message function, rotate back and sum over incoming edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageLayer {
    f: MessageFn,
    pub kind: ConvKind,
    pub cs: usize,
    pub r: usize,
    pub n_base: usize,
}

impl MessageLayer {
    /// Width of `m_ij`. Invariant layers append the raw relative vector,
    /// which is the only directional information they see.
    pub fn message_width(kind: ConvKind, cs: usize, r: usize, n_base: usize) -> usize {
        if kind.is_equivariant() {
            2 * cs + n_base + 4 * r
        } else {
            2 * cs + n_base + 2
        }
    }

    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        kind: ConvKind,
        (cs, r): (usize, usize),
        n_base: usize,
        hidden: usize,
    ) -> Result<Self> {
        if !kind.is_equivariant() && r != 0 {
            return Err(Error::InvalidConfig("invariant layers carry no rotational channels".into()));
        }
        let m = Self::message_width(kind, cs, r, n_base);
        let d = cs + 2 * r;
        let f = if kind.is_attention() {
            MessageFn::Attention {
                z: b.linear(&format!("{name}.z"), m, hidden)?,
                norm: LayerNorm::new(b, &format!("{name}.ln"), hidden)?,
                score: b.linear(&format!("{name}.score"), hidden, 1)?,
                value: b.linear(&format!("{name}.value"), hidden, d)?,
            }
        } else {
            MessageFn::Mlp(b.mlp(&format!("{name}.fm"), &[m, hidden, d])?)
        };
        Ok(MessageLayer { f, kind, cs, r, n_base })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair, ctx: &MessageContext<T>) -> Result<FeaturePair> {
        let (msg, _) = self.edge_messages(t, x, ctx)?;
        let msg = rotate_back_messages(t, msg, self.cs, &ctx.theta, self.kind.is_equivariant())?;
        let agg = t.scatter_add_rows(msg, &ctx.recv, ctx.n_nodes)?;
        FeaturePair::split(t, agg, self.cs)
    }

    /// Attention weights `[E, 1]`, `None` for MLP messages.
    pub fn attention<T: Real>(&self, t: &mut Tape<T>, x: &FeaturePair, ctx: &MessageContext<T>) -> Result<Option<Var>> {
        Ok(self.edge_messages(t, x, ctx)?.1)
    }

    /// Messages in the edge frame, before rotating back.
    fn edge_messages<T: Real>(
        &self,
        t: &mut Tape<T>,
        x: &FeaturePair,
        ctx: &MessageContext<T>,
    ) -> Result<(Var, Option<Var>)> {
        let (n, cs, r) = x.dims(t);
        if (cs, r) != (self.cs, self.r) || n != ctx.n_nodes {
            return Err(Error::ShapeMismatch {
                op: "message_layer",
                lhs: vec![n, cs, r],
                rhs: vec![ctx.n_nodes, self.cs, self.r],
            });
        }
        let si = t.gather_rows(x.scalar, &ctx.recv)?;
        let sj = t.gather_rows(x.scalar, &ctx.send)?;
        let b = t.constant(ctx.basis.clone());
        let dir = if self.kind.is_equivariant() {
            let ri = t.gather_rows(x.rot, &ctx.recv)?;
            let rj = t.gather_rows(x.rot, &ctx.send)?;
            let rr = concat_nonempty(t, &[ri, rj])?;
            align(t, rr, &ctx.theta)?
        } else {
            t.constant(ctx.rel.clone())
        };
        let m = concat_nonempty(t, &[si, sj, b, dir])?;
        match &self.f {
            MessageFn::Mlp(mlp) => Ok((mlp.forward(t, m)?, None)),
            MessageFn::Attention { z, norm, score, value } => {
                let z = z.forward(t, m)?;
                let h = norm.forward(t, z)?;
                let h = t.leaky_relu(h, T::of(LEAKY_SLOPE));
                let logit = score.forward(t, h)?;
                let logit = t.scale(logit, T::of(1.0 / (norm.dim as f64).sqrt()));
                let att = t.segment_softmax(logit, &ctx.recv, n)?;
                let v = t.leaky_relu(z, T::of(LEAKY_SLOPE));
                let v = value.forward(t, v)?;
                Ok((t.mul_col(v, att)?, Some(att)))
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match &self.f {
            MessageFn::Mlp(m) => m.n_params(),
            MessageFn::Attention { z, norm, score, value } => {
                z.n_params() + norm.n_params() + score.n_params() + value.n_params()
            }
        }
    }
}
