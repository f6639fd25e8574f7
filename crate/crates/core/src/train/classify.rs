//! Tetris shape classification: a two-layer network on the complete graph
//! of the four blocks, embedded from relative positions, with the scalar
//! head summed over nodes into seven logits.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{accumulate, clip_grad_norm, Adam, EpochRecord, TrainConfig};
use crate::data::{TetrisSample, TETRIS_CLASSES};
use crate::engine::{Array, ParamStore, Precision, Real, Tape, Var};
use crate::geom::Graph2D;
use crate::layers::MessageContext;
use crate::model::{ConvKind, EmbeddingKind, Model, ModelConfig, NodeInputs};
use crate::{Error, Result};

/// Two layers with the relative-position embedding and seven outputs.
/// Invariant kinds keep the feature width and drop the rotational part.
pub fn classifier_config(kind: ConvKind, seed: u64) -> ModelConfig {
    let eq = ModelConfig {
        n_layers: 2,
        hidden_scalar: 16,
        hidden_rot: 8,
        conv_kind: kind.equivariant(),
        n_base: 8,
        cutoff: 4.0,
        out_scalar_dim: TETRIS_CLASSES,
        out_rot_dim: 0,
        seed,
        in_scalar_dim: 0,
        in_rot_dim: 0,
        embedding: EmbeddingKind::RelativeEdges,
        mlp_hidden: None,
    };
    if kind.is_equivariant() {
        eq
    } else {
        eq.invariant_counterpart(eq.feature_width())
    }
}

pub fn tetris_graph(s: &TetrisSample) -> Result<Graph2D> {
    Graph2D::fully_connected(s.positions.to_vec())
}

/// Sum-pooled scalar head, `[1, classes]`.
pub fn tetris_logits<T: Real>(t: &mut Tape<T>, model: &Model, ctx: &MessageContext<T>) -> Result<Var> {
    let p = model.forward(t, ctx, &NodeInputs::empty(ctx.n_nodes))?;
    let ones = t.constant(Array::full(vec![1, ctx.n_nodes], T::one()));
    t.matmul(ones, p.scalar)
}

fn nll<T: Real>(t: &mut Tape<T>, logits: Var, label: usize) -> Result<Var> {
    let lsm = t.log_softmax_rows(logits);
    let pick = t.gather_cols(lsm, &Arc::from(vec![label]))?;
    let s = t.sum(pick);
    Ok(t.scale(s, -T::one()))
}

fn check_config(cfg: &ModelConfig) -> Result<()> {
    if cfg.embedding != EmbeddingKind::RelativeEdges || cfg.out_scalar_dim != TETRIS_CLASSES {
        return Err(Error::InvalidConfig(format!(
            "the classifier needs the relative-edges embedding and {TETRIS_CLASSES} scalar outputs"
        )));
    }
    Ok(())
}

/// Accuracy and mean negative log-likelihood.
pub fn evaluate_tetris(model: &Model, samples: &[TetrisSample], precision: Precision) -> Result<(f64, f64)> {
    match precision {
        Precision::F32 => evaluate_in::<f32>(model, &model.params.cast(), samples),
        Precision::F64 => evaluate_in::<f64>(model, &model.params, samples),
    }
}

fn evaluate_in<T: Real>(model: &Model, params: &ParamStore<T>, samples: &[TetrisSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let (mut hits, mut loss) = (0usize, 0.0);
    for s in samples {
        let ctx = model.context::<T>(&tetris_graph(s)?)?;
        let mut t = Tape::inference(params);
        let logits = tetris_logits(&mut t, model, &ctx)?;
        let row = t.value(logits).data().iter().map(|x| x.f64()).collect::<Vec<_>>();
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        hits += usize::from(best == s.label);
        let l = nll(&mut t, logits, s.label)?;
        loss += t.value(l).item().f64();
    }
    let n = samples.len() as f64;
    Ok((hits as f64 / n, loss / n))
}

#[derive(Debug, Clone)]
pub struct TetrisOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub test_accuracy: f64,
    pub test_nll: f64,
    pub skipped_steps: usize,
}

/// Cross-entropy training on `train`, scored on `test` after every epoch.
pub fn train_tetris(
    cfg: &ModelConfig,
    train: &[TetrisSample],
    test: &[TetrisSample],
    tc: &TrainConfig,
) -> Result<TetrisOutcome> {
    match tc.precision {
        Precision::F32 => train_in::<f32>(cfg, train, test, tc),
        Precision::F64 => train_in::<f64>(cfg, train, test, tc),
    }
}

fn train_in<T: Real>(
    cfg: &ModelConfig,
    train: &[TetrisSample],
    test: &[TetrisSample],
    tc: &TrainConfig,
) -> Result<TetrisOutcome> {
    tc.validate()?;
    check_config(cfg)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("train and test sets must be non-empty".into()));
    }
    let mut model = Model::build(cfg)?;
    let ctxs: Vec<MessageContext<T>> =
        train.iter().map(|s| model.context::<T>(&tetris_graph(s)?)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total = tc.epochs * steps_per_epoch;
    let mut opt = Adam::new(&model.params);
    let mut log = Vec::with_capacity(2 * tc.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let (mut acc, mut test_nll) = (0.0, 0.0);
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let lr_epoch = tc.lr(step, total);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let params = model.params.cast::<T>();
            let mut grads: Vec<Array<f64>> =
                model.params.values().iter().map(|a| Array::zeros(a.shape().to_vec())).collect();
            let mut loss = 0.0;
            for &i in batch {
                let mut t = Tape::with_params(&params);
                let logits = tetris_logits(&mut t, &model, &ctxs[i])?;
                let l = nll(&mut t, logits, train[i].label)?;
                let l = t.scale(l, T::of(1.0 / batch.len() as f64));
                loss += t.value(l).item().f64();
                let g: Vec<Array<f64>> = t.backward(l)?.into_params().iter().map(Array::cast::<f64>).collect();
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
        (acc, test_nll) = evaluate_tetris(&model, test, tc.precision)?;
        let mut rec = EpochRecord::new(epoch, "test");
        rec.accuracy = Some(acc);
        rec.nll = Some(test_nll);
        log.push(rec);
    }
    Ok(TetrisOutcome { model, log, test_accuracy: acc, test_nll, skipped_steps: opt.skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_tetris, TetrisSpec};
    use crate::geom::Rot2;

    #[test]
    fn logits_are_rotation_invariant() {
        let m = Model::build(&classifier_config(ConvKind::Se2Mlp, 1)).unwrap();
        let params = m.params.cast::<f32>();
        for s in gen_tetris(TetrisSpec::row(1), 0).unwrap() {
            let logits = |pos: Vec<[f64; 2]>| {
                let ctx = m.context::<f32>(&Graph2D::fully_connected(pos).unwrap()).unwrap();
                let mut t = Tape::inference(&params);
                let l = tetris_logits(&mut t, &m, &ctx).unwrap();
                t.value(l).to_f64_vec()
            };
            let base = logits(s.positions.to_vec());
            for k in 1..8 {
                let r = Rot2::new(0.77 * k as f64).unwrap();
                let moved = logits(
                    s.positions
                        .iter()
                        .map(|&p| {
                            let q = r.apply(p);
                            [q[0] + 2.5, q[1] - 1.0]
                        })
                        .collect(),
                );
                let scale = base.iter().fold(1.0f64, |a, x| a.max(x.abs()));
                for (a, b) in base.iter().zip(&moved) {
                    assert!((a - b).abs() < 1e-4 * scale, "{a} vs {b}");
                }
                let arg = |v: &[f64]| (0..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b });
                assert_eq!(arg(&base), arg(&moved));
            }
        }
    }

    #[test]
    fn invariant_config_mirrors_equivariant() {
        let eq = classifier_config(ConvKind::Se2Mlp, 0);
        let inv = classifier_config(ConvKind::InvMlp, 0);
        assert_eq!(inv.conv_kind, ConvKind::InvMlp);
        assert_eq!((inv.hidden_rot, inv.feature_width()), (0, eq.feature_width()));
        assert_eq!(inv.hidden_width(), eq.hidden_width());
        Model::build(&inv).unwrap();
    }

    #[test]
    fn learns_training_shapes() {
        let train = gen_tetris(TetrisSpec::row(1), 0).unwrap();
        let tc = TrainConfig { batch_size: 1, precision: Precision::F64, ..TrainConfig::new(40, 2) };
        let out = train_tetris(&classifier_config(ConvKind::Se2Mlp, 2), &train, &train, &tc).unwrap();
        assert_eq!(out.test_accuracy, 1.0);
        assert!(out.log[0].loss.unwrap() > out.log[out.log.len() - 2].loss.unwrap());
    }

    #[test]
    fn rejects_wrong_head() {
        let train = gen_tetris(TetrisSpec::row(1), 0).unwrap();
        let cfg = ModelConfig { out_scalar_dim: 3, ..classifier_config(ConvKind::Se2Mlp, 0) };
        assert!(matches!(train_tetris(&cfg, &train, &train, &TrainConfig::new(1, 0)), Err(Error::InvalidConfig(_))));
    }
}
