//! Losses, metrics, the optimizer and the training loops.

pub mod classify;
pub mod surrogate;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Array, ParamStore, Precision};
use crate::{Error, Result};

pub use classify::{classifier_config, evaluate_tetris, tetris_graph, tetris_logits, train_tetris, TetrisOutcome};
pub use surrogate::{
    auto_cutoff, check_surrogate_config, default_surrogate_config, evaluate_surrogate, identity_one_step_error,
    one_step_error, rollout, smse, smse_loss, train_surrogate, Fields, IdentityPredictor, ModelSurrogate, NsSample,
    Rollout, Surrogate, SurrogateOutcome, HISTORY, ROT_INPUTS,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    #[serde(default)]
    pub schedule: Schedule,
    pub val_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
    /// random history windows drawn per training trajectory and epoch
    #[serde(default = "one")]
    pub windows_per_trajectory: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// threads for per-sample gradients within a batch
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

fn default_clip() -> f64 {
    10.0
}

impl TrainConfig {
    /// Batch 32, learning rate 1e-3, 5% validation.
    pub fn new(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs,
            lr0: 1e-3,
            schedule: Schedule::Cosine,
            val_fraction: 0.05,
            seed,
            precision: Precision::F32,
            windows_per_trajectory: 1,
            clip_norm: default_clip(),
            jobs: 1,
        }
    }

    /// 100 epochs at batch 8 with the same learning rate.
    pub fn tetris(seed: u64) -> TrainConfig {
        TrainConfig { batch_size: 8, ..TrainConfig::new(100, seed) }
    }

    /// 30 epochs at batch 8, learning rate 3e-3, four windows per
    /// trajectory and epoch.
    pub fn surrogate(seed: u64) -> TrainConfig {
        TrainConfig { batch_size: 8, lr0: 3e-3, windows_per_trajectory: 4, ..TrainConfig::new(30, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 || self.windows_per_trajectory == 0 || self.jobs == 0 {
            return bad("batch_size, epochs, windows_per_trajectory and jobs must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn lr(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, total, self.lr0),
        }
    }
}

/// `lr0 (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let x = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Bias-corrected Adam with decay rates 0.9 and 0.999.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array<f64>>,
    v: Vec<Array<f64>>,
    t: i32,
    /// steps dropped because a gradient was not finite
    pub skipped: usize,
}

impl Adam {
    pub fn new(params: &ParamStore<f64>) -> Adam {
        let zeros: Vec<Array<f64>> = params.values().iter().map(|a| Array::zeros(a.shape().to_vec())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0, skipped: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update. Returns false and leaves everything untouched
    /// when a gradient entry is not finite.
    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &[Array<f64>], lr: f64) -> Result<bool> {
        if grads.len() != params.len() || grads.iter().zip(params.values()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: grads.iter().map(Array::len).collect(),
                rhs: params.values().iter().map(Array::len).collect(),
            });
        }
        if !grads.iter().all(Array::all_finite) {
            self.skipped += 1;
            log::warn!("skipping optimizer step with a non-finite gradient ({} so far)", self.skipped);
            return Ok(false);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(grads: &mut [Array<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adds `b` into `a` entrywise.
pub(crate) fn accumulate(a: &mut [Array<f64>], b: &[Array<f64>]) {
    for (x, y) in a.iter_mut().zip(b) {
        x.axpy(1.0, y);
    }
}

/// One CSV row. Fields a split does not measure are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub one_step: Option<f64>,
    pub accuracy: Option<f64>,
    pub nll: Option<f64>,
    pub lr: Option<f64>,
}

impl EpochRecord {
    pub(crate) fn new(epoch: usize, split: &str) -> EpochRecord {
        EpochRecord { epoch, split: split.into(), loss: None, one_step: None, accuracy: None, nll: None, lr: None }
    }
}

/// Writes `epoch,split,loss,one_step,accuracy,nll,lr`.
pub fn write_metrics_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?)
}

/// Evaluation summary. Absent metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub one_step_smse: Option<f64>,
    /// entry `h - 1` averages the rollout error over the first `h` steps
    pub rollout_smse: Vec<f64>,
    pub identity_one_step_smse: Option<f64>,
    pub identity_rollout_smse: Vec<f64>,
    pub accuracy: Option<f64>,
    pub nll: Option<f64>,
}

impl MetricReport {
    pub fn empty() -> MetricReport {
        MetricReport {
            one_step_smse: None,
            rollout_smse: Vec::new(),
            identity_one_step_smse: None,
            identity_rollout_smse: Vec::new(),
            accuracy: None,
            nll: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.one_step_smse, self.identity_one_step_smse, self.accuracy, self.nll]
            .iter()
            .flatten()
            .chain(&self.rollout_smse)
            .chain(&self.identity_rollout_smse)
            .all(|x| x.is_finite())
    }
}

/// Deterministic split of `n` items into (train, validation) index lists.
/// At least one item goes to each side when `n >= 2`; a single item is
/// used for both.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}
