//! The assembled network: embedding, `K` blocks of message passing and
//! feed-forward with pre-norm residuals, a final norm and the output heads.

mod checkpoint;

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Array, Init, ParamStore, Precision, Real, RotTable, Tape};
use crate::geom::{center_of_mass_zero, global_angles, Graph2D, RadialBasisConfig, Rot2};
use crate::layers::{
    fourier_pointwise_nonlin, se2_activation, Activation, FeaturePair, FeedForward, MessageContext, MessageLayer,
    NodeEmbedding, OutputRot, OutputScalar, ParamBuilder, RelativeEdgeEmbedding, SeparableLayerNorm, LEAKY_SLOPE,
};
use crate::{Error, Result};

pub use crate::layers::ConvKind;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

/// How node features are first produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// From per-node scalar and vector inputs.
    #[default]
    Node,
    /// From relative positions only; nodes carry no input features.
    RelativeEdges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_scalar: usize,
    /// number of 2-vector channels
    pub hidden_rot: usize,
    pub conv_kind: ConvKind,
    pub n_base: usize,
    pub cutoff: f64,
    pub out_scalar_dim: usize,
    /// number of output 2-vectors per node
    pub out_rot_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub in_scalar_dim: usize,
    /// number of input 2-vectors per node
    #[serde(default)]
    pub in_rot_dim: usize,
    #[serde(default)]
    pub embedding: EmbeddingKind,
    /// Hidden width of every inner MLP; defaults to three times the feature
    /// width `hidden_scalar + 2 hidden_rot`.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.hidden_scalar == 0 {
            return bad("hidden_scalar must be positive");
        }
        if !self.conv_kind.is_equivariant() && self.hidden_rot != 0 {
            return bad("invariant models have no rotational channels; set hidden_rot to 0");
        }
        if self.conv_kind.is_equivariant() && self.hidden_rot == 0 && self.in_rot_dim > 0 {
            return bad("rotational inputs need hidden_rot > 0");
        }
        if self.out_scalar_dim + self.out_rot_dim == 0 {
            return bad("the model must have at least one output");
        }
        if self.embedding == EmbeddingKind::Node && self.in_scalar_dim + self.in_rot_dim == 0 {
            return bad("node embedding needs input features");
        }
        if self.mlp_hidden == Some(0) {
            return bad("mlp_hidden must be positive");
        }
        self.radial().map(|_| ())
    }

    pub fn radial(&self) -> Result<RadialBasisConfig> {
        RadialBasisConfig::new(self.n_base, self.cutoff)
    }

    /// Width `C_s + 2 N_r` of the node features.
    pub fn feature_width(&self) -> usize {
        self.hidden_scalar + 2 * self.hidden_rot
    }

    pub fn hidden_width(&self) -> usize {
        self.mlp_hidden.unwrap_or(3 * self.feature_width())
    }

    /// Scalar input width as seen by the embedding: invariant models read
    /// every input vector as two plain scalars.
    fn embed_inputs(&self) -> (usize, usize) {
        if self.conv_kind.is_equivariant() {
            (self.in_scalar_dim, self.in_rot_dim)
        } else {
            (self.in_scalar_dim + 2 * self.in_rot_dim, 0)
        }
    }

    /// Number of trainable reals, computed from the config alone.
    pub fn param_count(&self) -> usize {
        let lin = |i: usize, o: usize| (i + 1) * o;
        let mlp = |d: &[usize]| d.windows(2).map(|w| lin(w[0], w[1])).sum::<usize>();
        let (cs, r) = (self.hidden_scalar, self.hidden_rot);
        let d = self.feature_width();
        let h = self.hidden_width();
        let sep_ln = cs + r;
        let embed = match self.embedding {
            EmbeddingKind::Node => {
                let (s0, r0) = self.embed_inputs();
                mlp(&[s0, cs, cs]) + if r0 > 0 { mlp(&[2 * r0, 2 * r, 2 * r]) } else { 0 }
            }
            EmbeddingKind::RelativeEdges => mlp(&[2, h, d]),
        };
        let m = MessageLayer::message_width(self.conv_kind, cs, r, self.n_base);
        let conv =
            if self.conv_kind.is_attention() { lin(m, h) + 2 * h + lin(h, 1) + lin(h, d) } else { mlp(&[m, h, d]) };
        let ff = sep_ln + mlp(&[d, h, h, d]);
        let block = sep_ln + conv + ff;
        let heads = if self.out_scalar_dim > 0 { mlp(&[d, d, self.out_scalar_dim]) } else { 0 }
            + if self.out_rot_dim > 0 { mlp(&[d, d, 2 * self.out_rot_dim]) } else { 0 };
        embed + self.n_layers * block + sep_ln + heads
    }

    /// The non-equivariant baseline with the given scalar width. Inner MLP
    /// widths are kept from `self`.
    pub fn invariant_counterpart(&self, hidden_scalar: usize) -> ModelConfig {
        ModelConfig {
            conv_kind: self.conv_kind.invariant(),
            hidden_scalar,
            hidden_rot: 0,
            mlp_hidden: Some(self.hidden_width()),
            ..self.clone()
        }
    }

    /// Invariant counterpart whose scalar width brings its parameter count
    /// closest to this model's.
    pub fn matched_invariant(&self) -> ModelConfig {
        let target = self.param_count() as i64;
        let (mut best, mut best_gap) = (self.hidden_scalar, i64::MAX);
        for w in 1..=8 * self.feature_width().max(1) {
            let gap = (self.invariant_counterpart(w).param_count() as i64 - target).abs();
            if gap < best_gap {
                best = w;
                best_gap = gap;
            }
        }
        self.invariant_counterpart(best)
    }
}

/// Per-node inputs in double precision. `rot` holds interleaved pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInputs {
    /// `[N, in_scalar_dim]`
    pub scalar: Array<f64>,
    /// `[N, 2 in_rot_dim]`
    pub rot: Array<f64>,
}

impl NodeInputs {
    /// Inputs for a model without node features.
    pub fn empty(n: usize) -> Self {
        NodeInputs { scalar: Array::zeros(vec![n, 0]), rot: Array::zeros(vec![n, 0]) }
    }

    pub fn n_nodes(&self) -> usize {
        self.scalar.rows()
    }

    /// Rotates every input vector by `rot`.
    pub fn rotated(&self, rot: &Rot2) -> NodeInputs {
        NodeInputs { scalar: self.scalar.clone(), rot: rotate_pairs(&self.rot, rot) }
    }
}

/// Head outputs. `rot` is `[N, 2 out_rot_dim]`, pairs interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T = f64> {
    pub scalar: Array<T>,
    pub rot: Array<T>,
}

/// Head outputs as tape variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionVars {
    pub scalar: crate::engine::Var,
    pub rot: crate::engine::Var,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Embedding {
    Node(NodeEmbedding),
    Relative(RelativeEdgeEmbedding),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    norm: SeparableLayerNorm,
    conv: MessageLayer,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore<f64>,
    embedding: Embedding,
    blocks: Vec<Block>,
    final_norm: SeparableLayerNorm,
    head_scalar: Option<OutputScalar>,
    head_rot: Option<OutputRot>,
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let mut b = ParamBuilder::new(&mut params, &mut init);
        let (cs, r) = (cfg.hidden_scalar, cfg.hidden_rot);
        let d = cfg.feature_width();
        let h = cfg.hidden_width();
        let equivariant = cfg.conv_kind.is_equivariant();
        let embedding = match cfg.embedding {
            EmbeddingKind::Node => Embedding::Node(NodeEmbedding::new(&mut b, "embed", cfg.embed_inputs(), (cs, r))?),
            EmbeddingKind::RelativeEdges => {
                Embedding::Relative(RelativeEdgeEmbedding::new(&mut b, "embed", (cs, r), h, equivariant)?)
            }
        };
        let blocks = (0..cfg.n_layers)
            .map(|k| {
                Ok(Block {
                    norm: SeparableLayerNorm::new(&mut b, &format!("block{k}.norm"), cs, r)?,
                    conv: MessageLayer::new(&mut b, &format!("block{k}.conv"), cfg.conv_kind, (cs, r), cfg.n_base, h)?,
                    ff: FeedForward::new(&mut b, &format!("block{k}.ff"), (cs, r), h, true)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = SeparableLayerNorm::new(&mut b, "final_norm", cs, r)?;
        let head_scalar = if cfg.out_scalar_dim > 0 {
            Some(OutputScalar { mlp: b.mlp("head.scalar", &[d, d, cfg.out_scalar_dim])? })
        } else {
            None
        };
        let head_rot = if cfg.out_rot_dim > 0 {
            Some(OutputRot::new(b.mlp("head.rot", &[d, d, 2 * cfg.out_rot_dim])?, equivariant)?)
        } else {
            None
        };
        Ok(Model { cfg: cfg.clone(), params, embedding, blocks, final_norm, head_scalar, head_rot })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn load_params(&mut self, params: ParamStore<f64>) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::Mismatch("parameter names differ from the model architecture".into()));
        }
        for (a, b) in params.values().iter().zip(self.params.values()) {
            if a.shape() != b.shape() {
                return Err(Error::Mismatch(format!("parameter shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn context<T: Real>(&self, graph: &Graph2D) -> Result<MessageContext<T>> {
        MessageContext::new(graph, &self.cfg.radial()?)
    }

    /// Records a forward pass. The tape must be bound to parameters laid
    /// out like [`Model::params`].
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        ctx: &MessageContext<T>,
        inputs: &NodeInputs,
    ) -> Result<PredictionVars> {
        let n = ctx.n_nodes;
        let cfg = &self.cfg;
        let mut x = match &self.embedding {
            Embedding::Node(emb) => {
                let want = [n, cfg.in_scalar_dim, 2 * cfg.in_rot_dim];
                let got = [inputs.scalar.rows(), inputs.scalar.cols(), inputs.rot.cols()];
                if want != got || inputs.rot.rows() != n {
                    return Err(Error::ShapeMismatch { op: "model inputs", lhs: got.to_vec(), rhs: want.to_vec() });
                }
                let (s, r) = if cfg.conv_kind.is_equivariant() {
                    (t.constant(inputs.scalar.cast()), t.constant(inputs.rot.cast()))
                } else {
                    let s = t.constant(inputs.scalar.cast());
                    let v = t.constant(inputs.rot.cast());
                    (t.concat(&[s, v])?, t.constant(Array::zeros(vec![n, 0])))
                };
                emb.forward(t, ctx, s, r)?
            }
            Embedding::Relative(emb) => emb.forward(t, ctx)?,
        };
        for blk in &self.blocks {
            let h = blk.norm.forward(t, &x)?;
            let m = blk.conv.forward(t, &h, ctx)?;
            let y = x.add(t, &m)?;
            x = blk.ff.forward(t, &y, &ctx.alpha)?;
        }
        let x = self.final_norm.forward(t, &x)?;
        let scalar = match &self.head_scalar {
            Some(hd) => hd.forward(t, &x, &ctx.alpha)?,
            None => t.constant(Array::zeros(vec![n, 0])),
        };
        let rot = match &self.head_rot {
            Some(hd) => hd.forward(t, &x, &ctx.alpha)?,
            None => t.constant(Array::zeros(vec![n, 0])),
        };
        Ok(PredictionVars { scalar, rot })
    }

    /// Inference with parameters given in precision `T`.
    pub fn predict_with<T: Real>(
        &self,
        params: &ParamStore<T>,
        graph: &Graph2D,
        inputs: &NodeInputs,
    ) -> Result<Prediction<T>> {
        let ctx = self.context::<T>(graph)?;
        let mut t = Tape::inference(params);
        let p = self.forward(&mut t, &ctx, inputs)?;
        Ok(Prediction { scalar: t.value(p.scalar).clone(), rot: t.value(p.rot).clone() })
    }

    pub fn predict(&self, graph: &Graph2D, inputs: &NodeInputs) -> Result<Prediction> {
        self.predict_with(&self.params, graph, inputs)
    }

    /// Same weights in another model with an identical architecture.
    pub fn with_params_of(&self, other: &Model) -> Result<Model> {
        let mut m = self.clone();
        m.load_params(other.params.clone())?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceStats {
    pub mean: f64,
    pub max: f64,
    pub trials: usize,
}

/// Compares `f(g x)` with `g f(x)` for random rotations and translations
/// `g`, on both heads jointly, in the requested precision.
pub fn equivariance_error(
    model: &Model,
    graph: &Graph2D,
    inputs: &NodeInputs,
    trials: usize,
    seed: u64,
    precision: Precision,
) -> Result<EquivarianceStats> {
    match precision {
        Precision::F32 => equivariance_error_in::<f32>(model, graph, inputs, trials, seed),
        Precision::F64 => equivariance_error_in::<f64>(model, graph, inputs, trials, seed),
    }
}

fn equivariance_error_in<T: Real>(
    model: &Model,
    graph: &Graph2D,
    inputs: &NodeInputs,
    trials: usize,
    seed: u64,
) -> Result<EquivarianceStats> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is needed".into()));
    }
    let params = model.params.cast::<T>();
    let base = model.predict_with(&params, graph, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let rot = Rot2::new(rng.gen_range(0.0..2.0 * PI))?;
        let shift = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let moved = model.predict_with(&params, &graph.transformed(&rot, shift)?, &inputs.rotated(&rot))?;
        let want_rot = rotate_pairs(&base.rot.cast::<f64>(), &rot);
        let want: Vec<f64> = base.scalar.to_f64_vec().into_iter().chain(want_rot.into_data()).collect();
        let got: Vec<f64> = moved.scalar.to_f64_vec().into_iter().chain(moved.rot.to_f64_vec()).collect();
        let diff = want.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = want.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let e = diff / norm;
        sum += e;
        max = max.max(e);
    }
    Ok(EquivarianceStats { mean: sum / trials as f64, max, trials })
}

/// A pointwise nonlinearity on rotational features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    /// Activation in the per-node aligned frame.
    Aligned,
    /// Activation on `n` sampled directions.
    Fourier(usize),
}

/// Relative equivariance error of a leaky-relu nonlinearity on random
/// features over `n_nodes` nodes with `channels` rotational channels (and
/// as many scalar ones), under random rotations.
pub fn nonlinearity_equivariance_error(
    kind: Nonlinearity,
    n_nodes: usize,
    channels: usize,
    trials: usize,
    seed: u64,
    precision: Precision,
) -> Result<EquivarianceStats> {
    match precision {
        Precision::F32 => nonlinearity_error_in::<f32>(kind, n_nodes, channels, trials, seed),
        Precision::F64 => nonlinearity_error_in::<f64>(kind, n_nodes, channels, trials, seed),
    }
}

fn nonlinearity_error_in<T: Real>(
    kind: Nonlinearity,
    n: usize,
    c: usize,
    trials: usize,
    seed: u64,
) -> Result<EquivarianceStats> {
    if trials == 0 || n == 0 || c == 0 {
        return Err(Error::InvalidArgument("trials, nodes and channels must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let scalar = Array::<f64>::from_f64(vec![n, c], &draw(n * c))?;
    let rot = Array::<f64>::new(vec![n, 2 * c], draw(2 * n * c))?;
    let pos: Vec<[f64; 2]> = draw(2 * n).chunks_exact(2).map(|p| [p[0], p[1]]).collect();
    let pos = center_of_mass_zero(&pos);
    let act = Activation::LeakyRelu(LEAKY_SLOPE);
    let run = |rot: &Array<f64>, pos: &[[f64; 2]]| -> Result<Vec<f64>> {
        let mut t = Tape::<T>::new();
        let x = FeaturePair { scalar: t.constant(scalar.cast()), rot: t.constant(rot.cast()) };
        let y = match kind {
            Nonlinearity::Aligned => {
                let frame = Arc::new(RotTable::from_angles(&global_angles(pos)));
                se2_activation(&mut t, &x, &frame, act)?
            }
            Nonlinearity::Fourier(k) => fourier_pointwise_nonlin(&mut t, &x, k, act)?,
        };
        Ok(t.value(y.scalar).to_f64_vec().into_iter().chain(t.value(y.rot).to_f64_vec()).collect())
    };
    let base = run(&rot, &pos)?;
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let r = Rot2::new(rng.gen_range(0.0..2.0 * PI))?;
        let moved_pos: Vec<[f64; 2]> = pos.iter().map(|&p| r.apply(p)).collect();
        let got = run(&rotate_pairs(&rot, &r), &moved_pos)?;
        let (bs, br) = base.split_at(n * c);
        let want: Vec<f64> =
            bs.iter().copied().chain(rotate_pairs(&Array::new(vec![n, 2 * c], br.to_vec())?, &r).into_data()).collect();
        let diff = want.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = want.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        sum += diff / norm;
        max = max.max(diff / norm);
    }
    Ok(EquivarianceStats { mean: sum / trials as f64, max, trials })
}

pub(crate) fn rotate_pairs<T: Real>(x: &Array<T>, rot: &Rot2) -> Array<T> {
    let mut out = x.clone();
    let (c, s) = (T::of(rot.cos), T::of(rot.sin));
    for p in out.data_mut().chunks_exact_mut(2) {
        let (a, b) = (p[0], p[1]);
        p[0] = c * a - s * b;
        p[1] = s * a + c * b;
    }
    out
}
