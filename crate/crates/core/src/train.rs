//! Loss, optimizer, minibatch training with early stopping, and evaluation
//! metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::experts::count_parameters;
use crate::model::Network;
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without validation improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    /// Trailing fraction of the training rows held out for validation.
    pub validation_fraction: f64,
    /// Reload the parameters of the best validation epoch after training.
    pub restore_best: bool,
    pub seed: u64,
    /// Rows per inference chunk during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            patience: Some(10),
            validation_fraction: 0.1,
            restore_best: false,
            seed: 0,
            eval_chunk: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("train.validation_fraction must lie in [0, 1)"));
        }
        if self.eval_chunk == 0 {
            return Err(Error::config("train.eval_chunk must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// Updates every parameter from its accumulated `grad`; the parameter
    /// list must keep the same order across calls.
    pub fn step(&mut self, params: Vec<&mut Parameter>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let (grad, value) = p.grad_and_value_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Mean of squared entrywise errors, recorded on the tape.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

fn same_shape(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    if pred.is_empty() {
        return Err(Error::DegenerateTarget("no rows to evaluate".into()));
    }
    let total: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(total / pred.len() as f64)
}

pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    mse(pred, target).map(f64::sqrt)
}

/// `1 − SS_res / SS_tot` per output column, averaged uniformly over columns.
pub fn r2_score(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let rows = target.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::DegenerateTarget("no rows to evaluate".into()));
    }
    let cols = target.len() / rows;
    let mut total = 0.0;
    for c in 0..cols {
        let col = |t: &Tensor, r: usize| t.data()[r * cols + c];
        let mean = (0..rows).map(|r| col(target, r)).sum::<f64>() / rows as f64;
        let ss_tot: f64 = (0..rows).map(|r| (col(target, r) - mean).powi(2)).sum();
        let ss_res: f64 = (0..rows).map(|r| (col(target, r) - col(pred, r)).powi(2)).sum();
        if ss_tot == 0.0 {
            return Err(Error::DegenerateTarget(format!("target column {c} has zero variance")));
        }
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / cols as f64)
}

/// Inputs with their targets, row-aligned on axis 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.shape().first() != y.shape().first() || y.rank() != 2 {
            return Err(Error::shape(format!(
                "inputs {:?} and targets {:?} are not row-aligned (targets must be rank 2)",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.select_rows(idx)?,
            y: self.y.select_rows(idx)?,
        })
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.slice_rows(start, end)?,
            y: self.y.slice_rows(start, end)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub r2: f64,
    pub rmse: f64,
    pub mse: f64,
    pub train_seconds: f64,
    pub parameter_count: usize,
    pub epochs_run: usize,
    /// Full training-set loss before the first and after the last update.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
}

impl RunMetrics {
    /// Copy with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunMetrics {
        RunMetrics {
            train_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Stat> {
        if values.is_empty() {
            return Err(Error::config("cannot aggregate zero runs"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Stat { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub r2: Stat,
    pub rmse: Stat,
    pub mse: Stat,
    pub train_seconds: Stat,
    pub parameter_count: Stat,
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateMetrics> {
    let pick = |f: fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateMetrics {
        runs: runs.len(),
        r2: pick(|r| r.r2)?,
        rmse: pick(|r| r.rmse)?,
        mse: pick(|r| r.mse)?,
        train_seconds: pick(|r| r.train_seconds)?,
        parameter_count: pick(|r| r.parameter_count as f64)?,
    })
}

fn dataset_loss(model: &Network, data: &Dataset, chunk: usize) -> Result<f64> {
    let pred = model.predict(&data.x, chunk)?;
    mse(&pred, &data.y)
}

/// Trains `model` on `train` with minibatch Adam and evaluates on `test`.
///
/// The trailing `validation_fraction` of `train` drives early stopping. All
/// shuffling draws from `rng`.
pub fn train(
    model: &mut Network,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<RunMetrics> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let start = Instant::now();
    let n_val = (train.len() as f64 * config.validation_fraction).round() as usize;
    let n_fit = train.len() - n_val;
    if n_fit == 0 {
        return Err(Error::config("validation split leaves no training rows"));
    }
    let fit = train.slice(0, n_fit)?;
    let val = (n_val > 0).then(|| train.slice(n_fit, train.len())).transpose()?;

    let initial_train_loss = dataset_loss(model, &fit, config.eval_chunk)?;
    let mut adam = Adam::new(config);
    let mut order: Vec<usize> = (0..n_fit).collect();
    let mut best_val = f64::INFINITY;
    let mut best_state = None;
    let mut wait = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let xb = fit.x.select_rows(batch)?;
            let yb = fit.y.select_rows(batch)?;
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let yv = tape.constant(yb);
            let pred = model.forward(&mut tape, xv)?;
            let loss = mse_loss(&mut tape, pred, yv)?;
            if !tape.value(loss).item()?.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = tape.backward(loss)?;
            model.zero_grad();
            grads.accumulate_into(model.parameters_mut());
            adam.step(model.parameters_mut());
        }
        epochs_run = epoch;
        if let Some(val) = &val {
            let loss = dataset_loss(model, val, config.eval_chunk)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if loss < best_val {
                best_val = loss;
                wait = 0;
                if config.restore_best {
                    best_state = Some(model.state());
                }
            } else {
                wait += 1;
                if config.patience.is_some_and(|p| wait >= p) {
                    break;
                }
            }
        }
    }
    if let Some(state) = &best_state {
        model.load_state(state)?;
    }
    let final_train_loss = dataset_loss(model, &fit, config.eval_chunk)?;
    let train_seconds = start.elapsed().as_secs_f64();

    let pred = model.predict(&test.x, config.eval_chunk)?;
    let m = mse(&pred, &test.y)?;
    Ok(RunMetrics {
        seed: config.seed,
        r2: r2_score(&pred, &test.y)?,
        rmse: m.sqrt(),
        mse: m,
        train_seconds,
        parameter_count: count_parameters(model),
        epochs_run,
        initial_train_loss,
        final_train_loss,
        best_val_loss: best_val.is_finite().then_some(best_val),
    })
}
