//! Sliding windows, chronological splits, Adam and the training loop with
//! early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::matrix::Matrix;
use crate::numerics::{Tape, Tensor};
use crate::predictor::{Model, ParamStore, Prepared};
use crate::processing::TrafficMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

/// Input `[start, start + L)` and target `[start + L, start + L + T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub input: Matrix,
    pub target: Matrix,
}

/// Chronologically ordered windows taken every `step` time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub windows: Vec<Window>,
    pub lookback: usize,
    pub horizon: usize,
    pub step: usize,
    pub tag: Option<SplitTag>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Every `stride`-th window, starting with the first.
    pub fn subsample(&self, stride: usize) -> WindowDataset {
        let stride = stride.max(1);
        WindowDataset {
            windows: self.windows.iter().step_by(stride).cloned().collect(),
            step: self.step * stride,
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> WindowDataset {
        WindowDataset {
            windows: Vec::new(),
            lookback: self.lookback,
            horizon: self.horizon,
            step: self.step,
            tag: self.tag,
        }
    }

    /// First time index after the last target.
    pub fn end(&self) -> usize {
        self.windows
            .last()
            .map_or(0, |w| w.start + self.lookback + self.horizon)
    }

    pub fn starts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.start).collect()
    }

    pub fn inputs(&self) -> Vec<Matrix> {
        self.windows.iter().map(|w| w.input.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Matrix> {
        self.windows.iter().map(|w| w.target.clone()).collect()
    }

    /// Applies `f` to every input and target.
    pub fn map_values(&self, f: impl Fn(&Matrix) -> Result<Matrix>) -> Result<WindowDataset> {
        let windows = self
            .windows
            .iter()
            .map(|w| {
                Ok(Window {
                    start: w.start,
                    input: f(&w.input)?,
                    target: f(&w.target)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(WindowDataset {
            windows,
            ..self.clone_empty()
        })
    }
}

/// Windows at offsets `0, step, 2 * step, ...`.
pub fn make_windows(
    series: &TrafficMatrix,
    lookback: usize,
    horizon: usize,
    step: usize,
) -> Result<WindowDataset> {
    if step == 0 || lookback == 0 || horizon == 0 {
        return Err(Error::Parameter("lookback, horizon and step must be >= 1".into()));
    }
    let span = lookback + horizon;
    if series.len() < span {
        return Err(Error::Data(format!(
            "series of length {} is shorter than lookback + horizon = {span}",
            series.len()
        )));
    }
    let windows = (0..=series.len() - span)
        .step_by(step)
        .map(|t| Window {
            start: t,
            input: series.values.columns(t, t + lookback),
            target: series.values.columns(t + lookback, t + span),
        })
        .collect();
    Ok(WindowDataset {
        windows,
        lookback,
        horizon,
        step,
        tag: None,
    })
}

/// Split ratios for train, validation and test.
pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Contiguous train/val/test partition with no leakage across boundaries.
///
/// Windows whose target would reach the next split's first input are
/// dropped at each boundary: `ceil((L + T) / step) - 1` windows per
/// boundary. The ratios are applied to the windows that remain.
pub fn chronological_split(ds: &WindowDataset, ratios: [f64; 3]) -> Result<[WindowDataset; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let span = ds.lookback + ds.horizon;
    let gap = span.div_ceil(ds.step) - 1;
    let n = ds.len();
    let usable = n.checked_sub(2 * gap).filter(|u| *u > 0).ok_or_else(|| {
        Error::Config(format!(
            "{n} windows leave nothing after dropping {gap} per boundary"
        ))
    })?;
    let a = (ratios[0] * usable as f64).round() as usize;
    let b = ((ratios[0] + ratios[1]) * usable as f64).round() as usize;
    let ranges = [(0, a), (a + gap, b + gap), (b + 2 * gap, n)];
    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut out = tags.map(|tag| WindowDataset {
        tag: Some(tag),
        ..ds.clone_empty()
    });
    for ((lo, hi), part) in ranges.into_iter().zip(out.iter_mut()) {
        if hi <= lo {
            return Err(Error::Config(format!(
                "{} split is empty ({n} windows, ratios {ratios:?})",
                part.tag.map_or("", SplitTag::name)
            )));
        }
        part.windows = ds.windows[lo..hi].to_vec();
    }
    Ok(out)
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers start at zero.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        for (name, g) in params.names().iter().zip(grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::Training(format!("non-finite gradient for {name}")));
                }
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let g = grads[k].as_ref().map(Tensor::data);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

/// Tracks validation losses; an epoch improves when its loss is below the
/// best so far by at least `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64, max_epochs: usize) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            max_epochs,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the next epoch's loss. Returns whether it improved and, if
    /// training should end now, why.
    pub fn observe(&mut self, val_loss: f64) -> (bool, Option<StopReason>) {
        self.epoch += 1;
        let improved = val_loss < self.best - self.min_delta;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.epoch;
        }
        let stop = if self.epoch - self.best_epoch >= self.patience {
            Some(StopReason::EarlyStop)
        } else if self.epoch >= self.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        (improved, stop)
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Use every n-th training window.
    pub train_stride: usize,
    /// Use every n-th validation window.
    pub val_stride: usize,
    /// Windows per forward pass; gradients are accumulated over a batch.
    pub micro_batch: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 100,
            patience: 20,
            min_delta: 1e-6,
            train_stride: 1,
            val_stride: 1,
            micro_batch: 8,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = a.lr >= 0.0
            && a.lr.is_finite()
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.min_delta >= 0.0
            && self.train_stride > 0
            && self.val_stride > 0
            && self.micro_batch > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training schedule {self:?}")))
        }
    }

    /// Reads training keys from `map`, starting from the defaults.
    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let mut s = TrainSchedule::default();
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = map.take($key)? {
                    $slot = v;
                }
            };
        }
        field!("lr", s.adam.lr);
        field!("beta1", s.adam.beta1);
        field!("beta2", s.adam.beta2);
        field!("adam_eps", s.adam.eps);
        field!("batch_size", s.batch_size);
        field!("max_epochs", s.max_epochs);
        field!("patience", s.patience);
        field!("min_delta", s.min_delta);
        field!("train_stride", s.train_stride);
        field!("val_stride", s.val_stride);
        field!("micro_batch", s.micro_batch);
        Ok(s)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.float("lr", self.adam.lr)
            .float("beta1", self.adam.beta1)
            .float("beta2", self.adam.beta2)
            .float("adam_eps", self.adam.eps)
            .put("batch_size", self.batch_size)
            .put("max_epochs", self.max_epochs)
            .put("patience", self.patience)
            .float("min_delta", self.min_delta)
            .put("train_stride", self.train_stride)
            .put("val_stride", self.val_stride)
            .put("micro_batch", self.micro_batch);
    }
}

/// Loss history and outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_train_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub seed: u64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }

    /// Everything except the wall time, which differs between runs.
    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("epochs", self.epochs())
            .put("best_epoch", self.best_epoch)
            .float("best_val_loss", self.best_val_loss)
            .put("stop_reason", self.stop_reason.name())
            .put("seed", self.seed)
            .float("initial_train_loss", self.initial_train_loss)
            .floats("train_loss", &self.train_loss)
            .floats("val_loss", &self.val_loss);
    }
}

/// A window ready for the model: its preprocessing and the target on the
/// same normalized scale as the model output.
pub struct Sample {
    pub prepared: Prepared,
    pub target: Vec<f64>,
}

pub fn prepare_samples(model: &Model, ds: &WindowDataset) -> Result<Vec<Sample>> {
    ds.windows
        .iter()
        .map(|w| {
            let prepared = model.prepare(&w.input)?;
            let mut target = Vec::with_capacity(w.target.data().len());
            for i in 0..w.target.rows() {
                let (mu, s) = (prepared.stats.mu[i], prepared.stats.sigma_eff[i]);
                target.extend(w.target.row(i).iter().map(|y| (y - mu) / s));
            }
            Ok(Sample { prepared, target })
        })
        .collect()
}

fn as_training(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training(format!("epoch {epoch}: {op} diverged")),
        Error::Training(m) => Error::Training(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// Mean squared error on the normalized scale over all samples.
pub fn normalized_loss(model: &Model, samples: &[Sample], chunk: usize) -> Result<f64> {
    let (mut se, mut n) = (0.0, 0usize);
    for group in samples.chunks(chunk.max(1)) {
        let refs: Vec<&Prepared> = group.iter().map(|s| &s.prepared).collect();
        let preds = model.predict_prepared(&refs)?;
        let targets = group.iter().flat_map(|s| s.target.iter());
        for (p, t) in preds.iter().flatten().zip(targets) {
            se += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("loss over an empty set".into()));
    }
    Ok(se / n as f64)
}

/// Trains `model` in place and restores the parameters of the best
/// validation epoch.
pub fn train(
    model: &mut Model,
    train_set: &WindowDataset,
    val_set: &WindowDataset,
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    let started = Instant::now();
    let train_ds = train_set.subsample(schedule.train_stride);
    let val_ds = val_set.subsample(schedule.val_stride);
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let samples = prepare_samples(model, &train_ds)?;
    let val_samples = prepare_samples(model, &val_ds)?;
    let chunk = schedule.micro_batch;
    log::info!(
        "training {} ({} params) on {} windows, validating on {}",
        model.config.variant,
        model.count_params(),
        samples.len(),
        val_samples.len()
    );

    let initial_train_loss = normalized_loss(model, &samples, chunk).map_err(|e| as_training(e, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(schedule.adam, &model.params);
    let mut monitor = EarlyStopping::new(schedule.patience, schedule.min_delta, schedule.max_epochs);
    let mut best_params = model.params.clone();
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let stop_reason = loop {
        let epoch = monitor.epoch + 1;
        order.shuffle(&mut rng);
        let (mut epoch_se, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(schedule.batch_size) {
            let batch_n: usize = batch.iter().map(|&i| samples[i].target.len()).sum();
            let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
            for micro in batch.chunks(chunk) {
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape, true);
                let refs: Vec<&Prepared> = micro.iter().map(|&i| &samples[i].prepared).collect();
                let target: Vec<f64> = micro
                    .iter()
                    .flat_map(|&i| samples[i].target.iter().copied())
                    .collect();
                let micro_n = target.len();
                let step = (|| {
                    let pred = model.forward(&mut tape, &bound, &refs, Some(&mut rng))?;
                    let shape = tape.shape(pred).to_vec();
                    let t = tape.leaf(Tensor::new(shape, target)?);
                    let loss = tape.mse_loss(pred, t)?;
                    let weighted = tape.scale(loss, micro_n as f64 / batch_n as f64)?;
                    tape.backward(weighted)?;
                    Ok::<f64, Error>(tape.value(loss).data()[0])
                })()
                .map_err(|e| as_training(e, epoch))?;
                if !step.is_finite() {
                    return Err(Error::Training(format!("epoch {epoch}: loss is not finite")));
                }
                epoch_se += step * micro_n as f64;
                epoch_n += micro_n;
                for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
                    if let Some(g) = tape.take_grad(v) {
                        match acc {
                            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                            None => *acc = Some(g),
                        }
                    }
                }
            }
            adam.step(&mut model.params, &grads)
                .map_err(|e| as_training(e, epoch))?;
        }
        let tl = epoch_se / epoch_n as f64;
        let vl = normalized_loss(model, &val_samples, chunk).map_err(|e| as_training(e, epoch))?;
        if !vl.is_finite() {
            return Err(Error::Training(format!(
                "epoch {epoch}: validation loss is not finite"
            )));
        }
        train_loss.push(tl);
        val_loss.push(vl);
        let (improved, stop) = monitor.observe(vl);
        log::info!(
            "epoch {epoch}: train {tl:.6} val {vl:.6}{}",
            if improved { " *" } else { "" }
        );
        if improved {
            best_params = model.params.clone();
        }
        if let Some(reason) = stop {
            break reason;
        }
    };
    model.params = best_params;
    Ok(TrainReport {
        initial_train_loss,
        train_loss,
        val_loss,
        best_epoch: monitor.best_epoch,
        best_val_loss: monitor.best,
        stop_reason,
        seed: schedule.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
