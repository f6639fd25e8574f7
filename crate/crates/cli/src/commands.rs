use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use se2gnn::data::{
    build_ns_dataset, gen_tetris as tetris_samples, load_ns_dataset, load_tetris, manifest_count, read_manifest,
    save_tetris, DatasetKind, ForceMode, NsDatasetConfig, Scenario, TetrisSpec,
};
use se2gnn::engine::{rotation_op_count, Array, Precision};
use se2gnn::geom::{delaunay, Graph2D};
use se2gnn::model::{
    equivariance_error, load_checkpoint, nonlinearity_equivariance_error, save_checkpoint, ConvKind, EquivarianceStats,
    Model, ModelConfig, NodeInputs, Nonlinearity,
};
use se2gnn::train::{
    check_surrogate_config, classifier_config, default_surrogate_config, evaluate_surrogate, evaluate_tetris,
    train_surrogate, train_tetris, write_metrics_csv, MetricReport, ModelSurrogate, NsSample, TrainConfig, HISTORY,
};
use se2gnn::Error;

use crate::{
    EquivCheck, Eval, Failure, ForceArg, GenNs, GenTetris, Overrides, Row, ScenarioArg, Task, Train, PRECISION_ENV,
};

type Outcome = Result<String, Failure>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "run_config.json";
pub const REPORT_FILE: &str = "report.json";

/// Rollout horizon reported after training, capped by the trajectory length.
const TRAIN_REPORT_HORIZON: usize = 10;

/// Flag, then environment, then config file.
fn resolve_precision(flag: Option<Precision>, file: Precision) -> Result<Precision, Failure> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var(PRECISION_ENV) {
        Ok(s) => crate::parse_precision(s.trim()).map_err(|e| Failure::usage(format!("{PRECISION_ENV}: {e}"))),
        Err(_) => Ok(file),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    text.push(b'\n');
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn line(v: &Value) -> Outcome {
    serde_json::to_string(v).map_err(|e| Failure::from(Error::from(e)))
}

pub fn gen_tetris(a: &GenTetris) -> Outcome {
    let spec = match a.row {
        Row::One => TetrisSpec::row(1),
        Row::Two => TetrisSpec::row(2),
        Row::Four => TetrisSpec::row(4),
        Row::Eight => TetrisSpec::row(8),
        Row::Test => TetrisSpec::test(),
    };
    let samples = tetris_samples(spec, a.seed)?;
    let m = save_tetris(&a.out, spec, a.seed, &samples)?;
    line(&json!({
        "command": "gen-tetris",
        "kind": m.kind,
        "count": manifest_count(&m),
        "seed": a.seed,
        "out": a.out,
    }))
}

pub fn gen_ns(a: &GenNs) -> Outcome {
    let scenario = match a.scenario {
        ScenarioArg::Open => Scenario::Open,
        ScenarioArg::Obstacle => Scenario::Obstacle,
    };
    let base = NsDatasetConfig::new(scenario, a.grid, a.n_traj, a.nodes, a.seed);
    let cfg = NsDatasetConfig {
        n_steps: a.steps.unwrap_or(base.n_steps),
        force_mode: match a.force {
            ForceArg::Fixed => ForceMode::Fixed,
            ForceArg::Varying => ForceMode::Varying,
        },
        cg_tol: a.cg_tol,
        ..base
    };
    let m = build_ns_dataset(&cfg, &a.out, a.jobs)?;
    let frames = m.files.first().and_then(|f| f.meta.as_ref()).map_or(0, |meta| meta.n_steps);
    line(&json!({
        "command": "gen-ns",
        "kind": m.kind,
        "count": manifest_count(&m),
        "seed": a.seed,
        "frames": frames,
        "nodes": a.nodes,
        "out": a.out,
    }))
}

fn train_config(a: &Train) -> Result<TrainConfig, Failure> {
    let seed = a.overrides.seed.unwrap_or(0);
    let mut tc = match &a.train_config {
        Some(p) => read_json(p)?,
        None => match a.task {
            Task::Tetris => TrainConfig::tetris(seed),
            Task::Ns => TrainConfig::surrogate(seed),
        },
    };
    let o: &Overrides = &a.overrides;
    tc.epochs = o.epochs.unwrap_or(tc.epochs);
    tc.seed = o.seed.unwrap_or(tc.seed);
    tc.jobs = o.jobs.unwrap_or(tc.jobs);
    tc.precision = resolve_precision(o.precision, tc.precision)?;
    tc.validate()?;
    Ok(tc)
}

/// Explicit file, else the task default for the requested kind.
fn model_config(
    a: &Train,
    default_kind: ConvKind,
    default: impl FnOnce(ConvKind) -> Result<ModelConfig, Error>,
) -> Result<ModelConfig, Failure> {
    let cfg = match &a.model_config {
        Some(p) => {
            let mut cfg: ModelConfig = read_json(p)?;
            if let Some(k) = a.overrides.conv_kind {
                cfg.conv_kind = k;
            }
            cfg
        }
        None => default(a.overrides.conv_kind.unwrap_or(default_kind))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &Train) -> Outcome {
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let tc = train_config(a)?;
    let ops0 = rotation_op_count();
    let (model, log, mut summary) = match a.task {
        Task::Tetris => {
            let (_, train) = load_tetris(&a.data)?;
            let test = match &a.test_data {
                Some(p) => load_tetris(p)?.1,
                None => tetris_samples(TetrisSpec::test(), tc.seed)?,
            };
            let cfg = model_config(a, ConvKind::Se2Mlp, |k| Ok(classifier_config(k, tc.seed)))?;
            let out = train_tetris(&cfg, &train, &test, &tc)?;
            let s = json!({
                "test_accuracy": out.test_accuracy,
                "test_nll": out.test_nll,
                "skipped_steps": out.skipped_steps,
                "train_samples": train.len(),
                "test_samples": test.len(),
            });
            (out.model, out.log, s)
        }
        Task::Ns => {
            let (m, trajs) = load_ns_dataset(&a.data)?;
            let samples = NsSample::from_dataset(&m, &trajs)?;
            let cfg = model_config(a, ConvKind::Se2Trans, |k| default_surrogate_config(k, &samples, tc.seed))?;
            let out = train_surrogate(&cfg, &samples, &tc)?;
            let val: Vec<NsSample> = out.val_idx.iter().map(|&i| samples[i].clone()).collect();
            let horizon = TRAIN_REPORT_HORIZON.min(samples[0].n_frames() - HISTORY);
            let surrogate = ModelSurrogate { model: &out.model, precision: tc.precision };
            let rep = evaluate_surrogate(&surrogate, &val, horizon)?;
            let s = json!({
                "best_epoch": out.best_epoch,
                "val_one_step_smse": rep.one_step_smse,
                "val_rollout_smse": rep.rollout_smse.last(),
                "val_identity_one_step_smse": rep.identity_one_step_smse,
                "val_identity_rollout_smse": rep.identity_rollout_smse.last(),
                "rollout_horizon": horizon,
                "skipped_steps": out.skipped_steps,
                "train_samples": out.train_idx.len(),
                "val_samples": out.val_idx.len(),
            });
            (out.model, out.log, s)
        }
    };
    let ckpt = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt)?;
    write_metrics_csv(&a.out.join(METRICS_FILE), &log)?;
    write_json(&a.out.join(CONFIG_FILE), &json!({ "model": model.cfg, "train": tc, "data": a.data }))?;
    let extra = summary.as_object_mut().expect("summary is an object");
    extra.insert("task".into(), json!(if a.task == Task::Tetris { "tetris" } else { "ns" }));
    extra.insert("conv_kind".into(), json!(model.cfg.conv_kind));
    extra.insert("n_params".into(), json!(model.n_params()));
    extra.insert("epochs".into(), json!(tc.epochs));
    extra.insert("precision".into(), json!(tc.precision));
    extra.insert("rotation_ops".into(), json!(rotation_op_count() - ops0));
    extra.insert("checkpoint".into(), json!(ckpt));
    write_json(&a.out.join(REPORT_FILE), &summary)?;
    line(&summary)
}

pub fn eval(a: &Eval) -> Outcome {
    let model = load_checkpoint(&a.checkpoint)?;
    let precision = resolve_precision(a.precision, Precision::F64)?;
    let m = read_manifest(&a.data)?;
    let mut report = MetricReport::empty();
    let samples;
    if m.kind == DatasetKind::Tetris {
        let cfg = &model.cfg;
        if cfg.out_scalar_dim != se2gnn::data::TETRIS_CLASSES || cfg.in_scalar_dim + cfg.in_rot_dim > 0 {
            return Err(Error::Mismatch("checkpoint is not a tetris classifier".into()).into());
        }
        let (_, data) = load_tetris(&a.data)?;
        (report.accuracy, report.nll) = evaluate_tetris(&model, &data, precision).map(|(a, n)| (Some(a), Some(n)))?;
        samples = data.len();
    } else {
        let (m, trajs) = load_ns_dataset(&a.data)?;
        let data = NsSample::from_dataset(&m, &trajs)?;
        check_surrogate_config(&model.cfg, &data[0]).map_err(|e| Failure { code: 5, message: e.to_string() })?;
        let frames = data.iter().map(NsSample::n_frames).min().unwrap_or(0);
        let max = frames.saturating_sub(HISTORY);
        if a.rollout_horizon == 0 || a.rollout_horizon > max {
            return Err(Failure::usage(format!("--rollout-horizon must lie in 1..={max} for {frames} frames")));
        }
        report = evaluate_surrogate(&ModelSurrogate { model: &model, precision }, &data, a.rollout_horizon)?;
        samples = data.len();
    }
    let mut v = serde_json::to_value(&report).map_err(Error::from)?;
    let o = v.as_object_mut().expect("report is an object");
    o.insert("kind".into(), json!(m.kind));
    o.insert("conv_kind".into(), json!(model.cfg.conv_kind));
    o.insert("samples".into(), json!(samples));
    o.insert("rollout_horizon".into(), json!(report.rollout_smse.len()));
    o.insert("precision".into(), json!(precision));
    if let Some(p) = &a.out {
        write_json(p, &v)?;
    }
    line(&v)
}

/// Random surrogate-shaped model for the audit: two blocks, 8 scalar and 4
/// rotational channels, invariant kinds matched in size.
fn random_model(kind: ConvKind, seed: u64) -> Result<Model, Error> {
    let eq = ModelConfig {
        n_layers: 2,
        hidden_scalar: 8,
        hidden_rot: 4,
        conv_kind: kind.equivariant(),
        n_base: 8,
        cutoff: 1.5,
        out_scalar_dim: 1,
        out_rot_dim: 1,
        seed,
        in_scalar_dim: 3,
        in_rot_dim: 5,
        embedding: se2gnn::model::EmbeddingKind::Node,
        mlp_hidden: None,
    };
    Model::build(&if kind.is_equivariant() { eq } else { eq.matched_invariant() })
}

/// Delaunay graph on uniform points in the unit square scaled by
/// `sqrt(n) / 4`, with uniform inputs in `[-1, 1]`.
fn random_fixture(cfg: &ModelConfig, n: usize, seed: u64) -> Result<(Graph2D, NodeInputs), Error> {
    if n < 3 {
        return Err(Error::InvalidArgument("--nodes must be at least 3".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).sqrt() / 4.0;
    let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side)]).collect();
    let graph = Graph2D::from_undirected(pos.clone(), &delaunay(&pos)?, None)?;
    let mut draw = |cols: usize| Array::new(vec![n, cols], (0..n * cols).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let inputs = match cfg.embedding {
        se2gnn::model::EmbeddingKind::RelativeEdges => NodeInputs::empty(n),
        se2gnn::model::EmbeddingKind::Node => {
            NodeInputs { scalar: draw(cfg.in_scalar_dim)?, rot: draw(2 * cfg.in_rot_dim)? }
        }
    };
    Ok((graph, inputs))
}

fn stats(s: &EquivarianceStats) -> Value {
    json!({ "mean": s.mean, "max": s.max })
}

pub fn equiv_check(a: &EquivCheck) -> Outcome {
    if a.trials == 0 {
        return Err(Failure::usage("--trials must be positive"));
    }
    let precision = resolve_precision(a.precision, Precision::F64)?;
    let (model, source): (Model, Value) = match (&a.source.checkpoint, a.source.random_model) {
        (Some(p), _) => (load_checkpoint(p)?, json!(p)),
        (None, Some(k)) => (random_model(k, a.seed)?, json!("random")),
        (None, None) => return Err(Failure::usage("one of --checkpoint or --random-model is required")),
    };
    let (graph, inputs) = random_fixture(&model.cfg, a.nodes, a.seed)?;
    let e = equivariance_error(&model, &graph, &inputs, a.trials, a.seed, precision)?;
    let mut out = json!({
        "command": "equiv-check",
        "source": source,
        "conv_kind": model.cfg.conv_kind,
        "precision": precision,
        "trials": a.trials,
        "nodes": a.nodes,
        "mean": e.mean,
        "max": e.max,
    });
    if !a.compare_fourier.is_empty() {
        const CHANNELS: usize = 8;
        let nl = |k| nonlinearity_equivariance_error(k, a.nodes, CHANNELS, a.trials, a.seed, precision);
        let rows = a
            .compare_fourier
            .iter()
            .map(|&n| nl(Nonlinearity::Fourier(n)).map(|s| json!({ "n_samples": n, "mean": s.mean, "max": s.max })))
            .collect::<Result<Vec<_>, _>>()?;
        let means: Vec<f64> = rows.iter().map(|r| r["mean"].as_f64().unwrap_or(f64::NAN)).collect();
        let o = out.as_object_mut().expect("object");
        o.insert("fourier".into(), json!(rows));
        o.insert("fourier_non_increasing".into(), json!(means.windows(2).all(|w| w[1] <= w[0])));
        o.insert("aligned".into(), stats(&nl(Nonlinearity::Aligned)?));
    }
    line(&out)
}
