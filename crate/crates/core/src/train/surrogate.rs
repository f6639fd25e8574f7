//! Next-step prediction of smoke and velocity from a three-frame history.
//!
//! Node inputs are the smoke values of the three history frames (plus an
//! inlet indicator when the scenario has one) and, as 2-vectors, the three
//! history velocities, the buoyancy force and the boundary normal.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{accumulate, clip_grad_norm, split_indices, Adam, EpochRecord, MetricReport, TrainConfig};
use crate::data::{inlet_flags, DatasetKind, DatasetManifest, Trajectory};
use crate::engine::{Array, ParamStore, Precision, Real, Tape, Var};
use crate::geom::{edge_length_percentile, Graph2D};
use crate::layers::MessageContext;
use crate::model::{ConvKind, EmbeddingKind, Model, ModelConfig, NodeInputs, PredictionVars};
use crate::sim::Inlet;
use crate::{Error, Result};

/// Frames of input history per prediction.
pub const HISTORY: usize = 3;

/// Input 2-vectors per node: three velocities, the force and the normal.
pub const ROT_INPUTS: usize = HISTORY + 2;

/// Node-sampled fields at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Fields {
    pub u: Vec<f64>,
    pub v: Vec<[f64; 2]>,
}

impl Fields {
    pub fn n_nodes(&self) -> usize {
        self.u.len()
    }
}

/// A trajectory prepared for training: graph, frames in double precision
/// and the optional inlet indicator.
#[derive(Debug, Clone)]
pub struct NsSample {
    pub graph: Graph2D,
    pub frames: Vec<Fields>,
    pub force: [f64; 2],
    pub inlet: Option<Vec<f64>>,
}

impl NsSample {
    pub fn new(traj: &Trajectory, inlet: Option<&Inlet>) -> Result<NsSample> {
        traj.validate()?;
        let graph = traj.graph()?;
        let frames = traj
            .u
            .iter()
            .zip(&traj.v)
            .map(|(u, v)| Fields {
                u: u.iter().map(|&x| x as f64).collect(),
                v: v.iter().map(|w| [w[0] as f64, w[1] as f64]).collect(),
            })
            .collect();
        let inlet = inlet.map(|s| inlet_flags(&graph.positions, Some(s)));
        Ok(NsSample { graph, frames, force: [traj.force[0] as f64, traj.force[1] as f64], inlet })
    }

    /// Pairs trajectories with the inlet recorded in the manifest.
    pub fn from_dataset(m: &DatasetManifest, trajs: &[Trajectory]) -> Result<Vec<NsSample>> {
        if m.kind == DatasetKind::Tetris || m.files.len() != trajs.len() {
            return Err(Error::Mismatch("manifest does not describe these trajectories".into()));
        }
        let with_inlet = m.kind == DatasetKind::NsObstacle;
        m.files
            .iter()
            .zip(trajs)
            .map(|(f, t)| {
                let inlet = match (with_inlet, f.meta.as_ref().and_then(|meta| meta.inlet.as_ref())) {
                    (true, None) => return Err(Error::Mismatch(format!("{} has no inlet metadata", f.name))),
                    (true, inlet) => inlet,
                    (false, _) => None,
                };
                NsSample::new(t, inlet)
            })
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn scalar_inputs(&self) -> usize {
        HISTORY + usize::from(self.inlet.is_some())
    }

    /// Model inputs for a history window, oldest frame first.
    pub fn inputs(&self, history: [&Fields; HISTORY]) -> NodeInputs {
        let n = self.n_nodes();
        let cs = self.scalar_inputs();
        let mut s = Vec::with_capacity(n * cs);
        let mut r = Vec::with_capacity(n * 2 * ROT_INPUTS);
        for i in 0..n {
            s.extend(history.iter().map(|f| f.u[i]));
            if let Some(flags) = &self.inlet {
                s.push(flags[i]);
            }
            for f in &history {
                r.extend_from_slice(&f.v[i]);
            }
            r.extend_from_slice(&self.force);
            r.extend_from_slice(&self.graph.boundary_normals[i]);
        }
        NodeInputs {
            scalar: Array::new(vec![n, cs], s).expect("sized above"),
            rot: Array::new(vec![n, 2 * ROT_INPUTS], r).expect("sized above"),
        }
    }

    fn window(&self, start: usize) -> [&Fields; HISTORY] {
        [&self.frames[start], &self.frames[start + 1], &self.frames[start + 2]]
    }
}

/// `(1/N) sum_i (u_i - u_i^t)^2 + |v_i - v_i^t|^2`.
pub fn smse(pred: &Fields, target: &Fields) -> f64 {
    let n = target.n_nodes();
    let su: f64 = pred.u.iter().zip(&target.u).map(|(a, b)| (a - b).powi(2)).sum();
    let sv: f64 = pred.v.iter().zip(&target.v).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum();
    (su + sv) / n.max(1) as f64
}

/// Differentiable SMSE of the model heads against `target`.
pub fn smse_loss<T: Real>(t: &mut Tape<T>, pred: PredictionVars, target: &Fields) -> Result<Var> {
    let n = target.n_nodes();
    let tu = t.constant(Array::new(vec![n, 1], target.u.iter().map(|&x| T::of(x)).collect())?);
    let tv = t.constant(Array::new(vec![n, 2], target.v.iter().flatten().map(|&x| T::of(x)).collect())?);
    let du = t.sub(pred.scalar, tu)?;
    let dv = t.sub(pred.rot, tv)?;
    let su = t.square(du);
    let su = t.sum(su);
    let sv = t.square(dv);
    let sv = t.sum(sv);
    let s = t.add(su, sv)?;
    Ok(t.scale(s, T::of(1.0 / n.max(1) as f64)))
}

/// Anything that maps a history window to the next fields.
pub trait Surrogate {
    fn predict(&self, sample: &NsSample, history: [&Fields; HISTORY]) -> Result<Fields>;
}

/// Repeats the latest frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPredictor;

impl Surrogate for IdentityPredictor {
    fn predict(&self, _: &NsSample, history: [&Fields; HISTORY]) -> Result<Fields> {
        Ok(history[HISTORY - 1].clone())
    }
}

/// A model evaluated in the given precision.
pub struct ModelSurrogate<'a> {
    pub model: &'a Model,
    pub precision: Precision,
}

impl<'a> ModelSurrogate<'a> {
    pub fn new(model: &'a Model) -> Self {
        ModelSurrogate { model, precision: Precision::F64 }
    }

    fn predict_in<T: Real>(&self, sample: &NsSample, history: [&Fields; HISTORY]) -> Result<Fields> {
        let params = self.model.params.cast::<T>();
        let p = self.model.predict_with(&params, &sample.graph, &sample.inputs(history))?;
        fields_from(&p.scalar, &p.rot)
    }
}

impl Surrogate for ModelSurrogate<'_> {
    fn predict(&self, sample: &NsSample, history: [&Fields; HISTORY]) -> Result<Fields> {
        match self.precision {
            Precision::F32 => self.predict_in::<f32>(sample, history),
            Precision::F64 => self.predict_in::<f64>(sample, history),
        }
    }
}

fn fields_from<T: Real>(scalar: &Array<T>, rot: &Array<T>) -> Result<Fields> {
    if scalar.cols() != 1 || rot.cols() != 2 {
        return Err(Error::ShapeMismatch {
            op: "surrogate heads",
            lhs: vec![scalar.cols(), rot.cols()],
            rhs: vec![1, 2],
        });
    }
    Ok(Fields {
        u: scalar.data().iter().map(|x| x.f64()).collect(),
        v: rot.data().chunks_exact(2).map(|w| [w[0].f64(), w[1].f64()]).collect(),
    })
}

/// Mean SMSE over every window with true history, predicting frames
/// `HISTORY..T`.
pub fn one_step_error(s: &impl Surrogate, sample: &NsSample) -> Result<f64> {
    let t = sample.n_frames();
    if t <= HISTORY {
        return Err(Error::InvalidArgument(format!("{t} frames leave nothing to predict")));
    }
    let mut sum = 0.0;
    for k in HISTORY..t {
        sum += smse(&s.predict(sample, sample.window(k - HISTORY))?, &sample.frames[k]);
    }
    Ok(sum / (t - HISTORY) as f64)
}

pub fn identity_one_step_error(sample: &NsSample) -> Result<f64> {
    one_step_error(&IdentityPredictor, sample)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// predicted frames `HISTORY..HISTORY + horizon`
    pub predictions: Vec<Fields>,
    /// SMSE of each predicted frame
    pub step_errors: Vec<f64>,
}

impl Rollout {
    /// Mean error over the whole horizon.
    pub fn error(&self) -> f64 {
        self.step_errors.iter().sum::<f64>() / self.step_errors.len().max(1) as f64
    }

    /// Entry `h - 1` is the mean error over the first `h` steps.
    pub fn cumulative_errors(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.step_errors
            .iter()
            .enumerate()
            .map(|(k, e)| {
                acc += e;
                acc / (k + 1) as f64
            })
            .collect()
    }
}

/// Seeds with the first `HISTORY` true frames and then feeds predictions
/// back as inputs.
pub fn rollout(s: &impl Surrogate, sample: &NsSample, horizon: usize) -> Result<Rollout> {
    let t = sample.n_frames();
    if horizon == 0 || horizon + HISTORY > t {
        return Err(Error::InvalidArgument(format!("horizon {horizon} must lie in 1..={}", t.saturating_sub(HISTORY))));
    }
    let mut hist: Vec<Fields> = sample.frames[..HISTORY].to_vec();
    let mut out = Rollout { predictions: Vec::with_capacity(horizon), step_errors: Vec::with_capacity(horizon) };
    for k in HISTORY..HISTORY + horizon {
        let n = hist.len();
        let next = s.predict(sample, [&hist[n - 3], &hist[n - 2], &hist[n - 1]])?;
        out.step_errors.push(smse(&next, &sample.frames[k]));
        hist.push(next.clone());
        out.predictions.push(next);
    }
    Ok(out)
}

/// Dataset averages of the one-step and rollout errors for `s` and for the
/// identity predictor.
pub fn evaluate_surrogate(s: &impl Surrogate, samples: &[NsSample], horizon: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let k = samples.len() as f64;
    let mut report = MetricReport::empty();
    let (mut one, mut id_one) = (0.0, 0.0);
    let mut roll = vec![0.0; horizon];
    let mut id_roll = vec![0.0; horizon];
    for smp in samples {
        one += one_step_error(s, smp)? / k;
        id_one += identity_one_step_error(smp)? / k;
        if horizon > 0 {
            for (a, e) in roll.iter_mut().zip(rollout(s, smp, horizon)?.cumulative_errors()) {
                *a += e / k;
            }
            for (a, e) in id_roll.iter_mut().zip(rollout(&IdentityPredictor, smp, horizon)?.cumulative_errors()) {
                *a += e / k;
            }
        }
    }
    report.one_step_smse = Some(one);
    report.identity_one_step_smse = Some(id_one);
    report.rollout_smse = roll;
    report.identity_rollout_smse = id_roll;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SurrogateOutcome {
    /// parameters from the epoch with the lowest validation error
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_one_step: f64,
    pub skipped_steps: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Checks that the model reads the surrogate inputs and writes one scalar
/// and one vector per node.
pub fn check_surrogate_config(cfg: &ModelConfig, sample: &NsSample) -> Result<()> {
    let want = (sample.scalar_inputs(), ROT_INPUTS, 1, 1);
    let got = (cfg.in_scalar_dim, cfg.in_rot_dim, cfg.out_scalar_dim, cfg.out_rot_dim);
    if got != want {
        return Err(Error::InvalidConfig(format!(
            "surrogate needs (in_scalar_dim, in_rot_dim, out_scalar_dim, out_rot_dim) = {want:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Median over the graphs of the 99th-percentile edge length, a radial
/// cutoff that covers nearly every edge without chasing hull outliers.
pub fn auto_cutoff(samples: &[NsSample]) -> Result<f64> {
    let mut cuts: Vec<f64> =
        samples.iter().filter_map(|s| edge_length_percentile(&s.graph.positions, &s.graph.edges, 99.0)).collect();
    if cuts.is_empty() {
        return Err(Error::InvalidArgument("no edges to derive a cutoff from".into()));
    }
    cuts.sort_by(f64::total_cmp);
    Ok(cuts[cuts.len() / 2])
}

/// Two blocks with 8 scalar and 4 rotational channels and the automatic
/// cutoff. Invariant kinds get the parameter-matched scalar width.
pub fn default_surrogate_config(kind: ConvKind, samples: &[NsSample], seed: u64) -> Result<ModelConfig> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    let eq = ModelConfig {
        n_layers: 2,
        hidden_scalar: 8,
        hidden_rot: 4,
        conv_kind: kind.equivariant(),
        n_base: 8,
        cutoff: auto_cutoff(samples)?,
        out_scalar_dim: 1,
        out_rot_dim: 1,
        seed,
        in_scalar_dim: first.scalar_inputs(),
        in_rot_dim: ROT_INPUTS,
        embedding: EmbeddingKind::Node,
        mlp_hidden: None,
    };
    Ok(if kind.is_equivariant() { eq } else { eq.matched_invariant() })
}

/// Minimizes SMSE over random history windows with Adam, cosine decay and
/// gradient clipping, keeping the parameters with the best validation
/// one-step error.
pub fn train_surrogate(cfg: &ModelConfig, data: &[NsSample], tc: &TrainConfig) -> Result<SurrogateOutcome> {
    match tc.precision {
        Precision::F32 => train_in::<f32>(cfg, data, tc),
        Precision::F64 => train_in::<f64>(cfg, data, tc),
    }
}

fn window_grads<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    ctx: &MessageContext<T>,
    sample: &NsSample,
    start: usize,
    weight: f64,
) -> Result<(f64, Vec<Array<f64>>)> {
    let mut t = Tape::with_params(params);
    let p = model.forward(&mut t, ctx, &sample.inputs(sample.window(start)))?;
    let l = smse_loss(&mut t, p, &sample.frames[start + HISTORY])?;
    let l = t.scale(l, T::of(weight));
    let loss = t.value(l).item().f64();
    let grads = t.backward(l)?.into_params().iter().map(Array::cast::<f64>).collect();
    Ok((loss, grads))
}

fn train_in<T: Real>(cfg: &ModelConfig, data: &[NsSample], tc: &TrainConfig) -> Result<SurrogateOutcome> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    for s in data {
        check_surrogate_config(cfg, s)?;
        if s.n_frames() <= HISTORY {
            return Err(Error::InvalidArgument(format!("a trajectory has only {} frames", s.n_frames())));
        }
    }
    let mut model = Model::build(cfg)?;
    let (train_idx, val_idx) = split_indices(data.len(), tc.val_fraction, tc.seed);
    let ctxs: Vec<MessageContext<T>> =
        train_idx.iter().map(|&i| model.context::<T>(&data[i].graph)).collect::<Result<_>>()?;
    let ctxs: Vec<Arc<MessageContext<T>>> = ctxs.into_iter().map(Arc::new).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(tc.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let n_windows = train_idx.len() * tc.windows_per_trajectory;
    let steps_per_epoch = n_windows.div_ceil(tc.batch_size);
    let total = tc.epochs * steps_per_epoch;
    let mut opt = Adam::new(&model.params);
    let mut log = Vec::with_capacity(2 * tc.epochs);
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut step = 0;

    for epoch in 1..=tc.epochs {
        let mut windows: Vec<(usize, usize)> = Vec::with_capacity(n_windows);
        for (slot, &i) in train_idx.iter().enumerate() {
            for _ in 0..tc.windows_per_trajectory {
                windows.push((slot, rng.gen_range(0..data[i].n_frames() - HISTORY)));
            }
        }
        windows.shuffle(&mut rng);
        let lr_epoch = tc.lr(step, total);
        let mut loss_sum = 0.0;
        for batch in windows.chunks(tc.batch_size) {
            let params = model.params.cast::<T>();
            let n_b: usize = batch.iter().map(|&(slot, _)| data[train_idx[slot]].n_nodes()).sum();
            let run = |&(slot, start): &(usize, usize)| {
                let smp = &data[train_idx[slot]];
                window_grads(&model, &params, &ctxs[slot], smp, start, smp.n_nodes() as f64 / n_b as f64)
            };
            let parts: Vec<Result<(f64, Vec<Array<f64>>)>> = if tc.jobs > 1 {
                use rayon::prelude::*;
                pool.install(|| batch.par_iter().map(run).collect())
            } else {
                batch.iter().map(run).collect()
            };
            let mut loss = 0.0;
            let mut grads: Vec<Array<f64>> =
                model.params.values().iter().map(|a| Array::zeros(a.shape().to_vec())).collect();
            for part in parts {
                let (l, g) = part?;
                loss += l;
                accumulate(&mut grads, &g);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss {loss} at epoch {epoch}, step {step}")));
            }
            clip_grad_norm(&mut grads, tc.clip_norm);
            opt.step(&mut model.params, &grads, tc.lr(step, total))?;
            loss_sum += loss;
            step += 1;
        }
        let mut rec = EpochRecord::new(epoch, "train");
        rec.loss = Some(loss_sum / steps_per_epoch as f64);
        rec.lr = Some(lr_epoch);
        log.push(rec);

        let eval = ModelSurrogate::new(&model);
        let mut val = 0.0;
        for &i in &val_idx {
            val += one_step_error(&eval, &data[i])? / val_idx.len() as f64;
        }
        if !val.is_finite() {
            return Err(Error::Divergence(format!("validation error {val} at epoch {epoch}")));
        }
        let mut rec = EpochRecord::new(epoch, "val");
        rec.one_step = Some(val);
        log.push(rec);
        if val < best.0 {
            best = (val, epoch, model.params.clone());
        }
    }
    let (best_val, best_epoch, params) = best;
    model.load_params(params)?;
    Ok(SurrogateOutcome {
        model,
        log,
        best_epoch,
        best_val_one_step: best_val,
        skipped_steps: opt.skipped,
        train_idx,
        val_idx,
    })
}
