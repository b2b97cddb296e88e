//! Masked metrics, Adam, warm-up and curriculum schedules, the training loop and ablations.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use numcore::{named_rng, Graph, ParamId, ParamStore, Tensor};
use rand::seq::SliceRandom;

use crate::clusterer::ClusterAssignment;
use crate::data::{make_windows, split, Scaler, SplitRatios, TrafficSeries, WindowedDataset};
use crate::dstgg::GraphMode;
use crate::error::{Error, Result};
use crate::model::{ClusterRefresh, ForecastModel, ModelConfig};

/// Targets with `|t|` at or below this are missing-data sentinels.
pub const MASK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub mask_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Indexed by forecast step, `per_horizon[0]` is horizon 1.
    pub per_horizon: Vec<Metrics>,
    /// Pooled over every step.
    pub average: Metrics,
}

impl MetricsReport {
    pub fn horizon(&self, h: usize) -> Option<&Metrics> {
        h.checked_sub(1).and_then(|i| self.per_horizon.get(i))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>10}{:>10}{:>10}", "horizon", "MAE", "RMSE", "MAPE%")?;
        for h in [3, 6, 12] {
            if let Some(m) = self.horizon(h) {
                writeln!(f, "{h:<10}{:>10.4}{:>10.4}{:>10.3}", m.mae, m.rmse, m.mape)?;
            }
        }
        let m = &self.average;
        write!(f, "{:<10}{:>10.4}{:>10.4}{:>10.3}", "average", m.mae, m.rmse, m.mape)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
}

impl Sums {
    fn push(&mut self, p: f64, t: f64) {
        if t.abs() > MASK_THRESHOLD {
            let d = (p - t).abs();
            self.abs += d;
            self.sq += d * d;
            self.ape += d / t.abs();
            self.count += 1;
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.ape += o.ape;
        self.count += o.count;
    }

    fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::UndefinedMetrics);
        }
        let n = self.count as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: self.ape / n * 100.0,
            mask_count: self.count,
        })
    }
}

/// Streams forecast/target pairs `[B, T_f, ...]` and reports per-step and pooled metrics.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    steps: Vec<Sums>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Size(format!(
                "forecast {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let shape = pred.shape();
        let (batch, steps) = match shape.len() {
            0 => (1, 1),
            1 => (1, 1),
            _ => (shape[0], shape[1]),
        };
        let inner = pred.numel() / (batch * steps).max(1);
        if self.steps.len() < steps {
            self.steps.resize(steps, Sums::default());
        }
        for (k, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
            self.steps[(k / inner) % steps].push(p, t);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        let mut all = Sums::default();
        for s in &self.steps {
            all.merge(s);
        }
        Ok(MetricsReport {
            average: all.finish()?,
            per_horizon: self.steps.iter().map(Sums::finish).collect::<Result<_>>()?,
        })
    }
}

/// Masked MAE, RMSE and MAPE. Axis 1 of rank ≥ 2 inputs is the forecast step.
pub fn masked_metrics(pred: &Tensor, target: &Tensor) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.push(pred, target)?;
    acc.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub curriculum_length: usize,
    pub max_horizon: usize,
    pub base_lr: f64,
    /// Ramp the learning rate linearly over the warm-up epochs.
    pub lr_warmup: bool,
    /// Pin the training horizon to 1 during warm-up.
    pub horizon_warmup: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            curriculum_length: 3,
            max_horizon: 12,
            base_lr: 0.002,
            lr_warmup: true,
            horizon_warmup: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.curriculum_length == 0 || self.max_horizon == 0 {
            return Err(Error::Config("curriculum_length and max_horizon must be positive".into()));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.base_lr)));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.lr_warmup && self.warmup_epochs > 0 {
            self.base_lr * ((epoch + 1) as f64 / self.warmup_epochs as f64).min(1.0)
        } else {
            self.base_lr
        }
    }
}

/// Number of leading forecast steps in the training loss at `epoch`.
pub fn curriculum_horizon(epoch: usize, s: &Schedule) -> usize {
    let h = if s.horizon_warmup {
        if epoch < s.warmup_epochs {
            1
        } else {
            2 + (epoch - s.warmup_epochs) / s.curriculum_length
        }
    } else {
        1 + epoch / s.curriculum_length
    };
    h.min(s.max_horizon).max(1)
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub betas: (f64, f64),
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            step: 0,
            lr,
            weight_decay: 1e-5,
            eps: 1e-8,
            betas: (0.9, 0.999),
        }
    }

    /// One Adam update. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(grad) = by_id[i] else { continue };
            let theta = store.value_mut(id);
            if grad.shape() != theta.shape() {
                return Err(Error::Size(format!(
                    "gradient {:?} for parameter {:?}",
                    grad.shape(),
                    theta.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, th) in theta.data_mut().iter_mut().enumerate() {
                let g = grad.data()[k] + self.weight_decay * *th;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *th -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Chronological train/val/test windows with a scaler fitted on the training inputs.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub scaler: Scaler,
}

pub fn prepare(series: Arc<TrafficSeries>, history: usize, horizon: usize, ratios: SplitRatios) -> Result<Splits> {
    let all = make_windows(series, history, horizon)?;
    let (train, val, test) = split(&all, ratios)?;
    let scaler = Scaler::fit_train(&train);
    Ok(Splits {
        train,
        val,
        test,
        scaler,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            epochs: 100,
            batch_size: 32,
            seed: 1,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub horizon: usize,
    pub lr: f64,
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,horizon,lr,train_mae,val_mae,val_rmse,val_mape,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}\n",
                e.epoch, e.horizon, e.lr, e.train_mae, e.val_mae, e.val_rmse, e.val_mape, e.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> Option<&EpochLog> {
        self.best_epoch.and_then(|b| self.epochs.iter().find(|e| e.epoch == b))
    }
}

/// Forecast metrics on a split, in the original units.
pub fn evaluate(model: &ForecastModel, data: &WindowedDataset, scaler: &Scaler, batch_size: usize) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, scaler);
        let pred = model.predict(&batch.x, &batch.time)?.map(|v| scaler.inverse(v));
        acc.push(&pred, &batch.y)?;
    }
    acc.finish()
}

fn parameter_norms(store: &ParamStore) -> String {
    store
        .iter()
        .map(|(_, p)| format!("{}={:.3e}", p.name, p.value.norm_l2()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains in place and leaves the model at its best validation epoch.
pub fn train(model: &mut ForecastModel, data: &Splits, opts: &TrainOptions) -> Result<TrainingLog> {
    opts.schedule.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut log = TrainingLog::default();
    if opts.epochs == 0 {
        return Ok(log);
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let scaler = data.scaler;
    let mut optimizer = OptimizerState::new(&model.store, opts.schedule.base_lr);
    let mut shuffle_rng = named_rng(opts.seed, "train.shuffle");
    let mut dropout_rng = named_rng(opts.seed, "train.dropout");
    let mut best: Option<(f64, ParamStore, ClusterAssignment)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..opts.epochs {
        let start = Instant::now();
        let horizon = curriculum_horizon(epoch, &opts.schedule);
        optimizer.lr = opts.schedule.learning_rate(epoch);
        model.refresh_clusters(&data.train, &scaler)?;
        model.set_training(true);
        order.shuffle(&mut shuffle_rng);

        let (mut loss_sum, mut loss_batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch = data.train.batch(chunk, &scaler);
            if model.config.cluster_refresh == ClusterRefresh::Batch {
                model.recluster(&batch.x, &batch.time)?;
            }
            let target = gather_steps(&batch.y, horizon);
            let mask = target.map(|t| if t.abs() > MASK_THRESHOLD { 1.0 } else { 0.0 });
            let count = mask.data().iter().sum::<f64>();
            if count == 0.0 {
                continue;
            }

            let mut g = Graph::new();
            let pass = model.forward(&mut g, &batch.x, &batch.time, Some(&mut dropout_rng))?;
            let steps: Vec<usize> = (0..horizon).collect();
            let pred = g.gather(pass.prediction, 1, &steps)?;
            let pred = g.scale(pred, scaler.std);
            let pred = g.add_scalar(pred, scaler.mean);
            let t = g.constant(target);
            let diff = g.sub(pred, t)?;
            let diff = g.abs(diff);
            let diff = g.mul_const(diff, mask)?;
            let total = g.sum_all(diff);
            let loss = g.scale(total, 1.0 / count);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    norms: parameter_norms(&model.store),
                });
            }
            let grads = g.backward(loss)?.into_params();
            if grads.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    norms: parameter_norms(&model.store),
                });
            }
            optimizer.step(&mut model.store, &grads)?;
            loss_sum += value;
            loss_batches += 1;
        }

        model.set_training(false);
        let val = evaluate(model, &data.val, &scaler, opts.batch_size.max(64))?;
        let entry = EpochLog {
            epoch,
            horizon,
            lr: optimizer.lr,
            train_mae: loss_sum / loss_batches.max(1) as f64,
            val_mae: val.average.mae,
            val_rmse: val.average.rmse,
            val_mape: val.average.mape,
            seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  h={:<2} lr={:.5}  train_mae={:.4}  val_mae={:.4}  ({:.1}s)",
                entry.epoch, entry.horizon, entry.lr, entry.train_mae, entry.val_mae, entry.seconds
            );
        }
        if best.as_ref().is_none_or(|(b, _, _)| entry.val_mae < *b) {
            best = Some((entry.val_mae, model.store.clone(), model.assignment().clone()));
            log.best_epoch = Some(epoch);
        }
        log.epochs.push(entry);
    }

    if let Some((_, store, asg)) = best {
        model.store = store;
        model.set_assignment(asg)?;
    }
    Ok(log)
}

/// First `h` steps along axis 1.
fn gather_steps(y: &Tensor, h: usize) -> Tensor {
    if y.shape()[1] == h {
        y.clone()
    } else {
        let idx: Vec<usize> = (0..h).collect();
        y.gather(1, &idx).expect("horizon within forecast length")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoClusterer,
    NoSpatial,
    NoTemporal,
    Patterns(usize),
}

impl Variant {
    pub const NAMES: [&'static str; 6] = ["full", "no-clusterer", "no-sg", "no-tg", "p2", "p3"];

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoClusterer => c.clustering = false,
            Variant::NoSpatial => c.graph_mode = GraphMode::NoSpatial,
            Variant::NoTemporal => c.graph_mode = GraphMode::NoTemporal,
            Variant::Patterns(p) => c.patterns = p,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no-clusterer" => Variant::NoClusterer,
            "no-sg" => Variant::NoSpatial,
            "no-tg" => Variant::NoTemporal,
            "p2" => Variant::Patterns(2),
            "p3" => Variant::Patterns(3),
            _ => {
                return Err(Error::Usage(format!(
                    "unknown variant `{s}`, expected one of {}",
                    Variant::NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoClusterer => f.write_str("no-clusterer"),
            Variant::NoSpatial => f.write_str("no-sg"),
            Variant::NoTemporal => f.write_str("no-tg"),
            Variant::Patterns(p) => write!(f, "p{p}"),
        }
    }
}

/// Trains the variant from scratch and reports test metrics.
pub fn run_ablation(variant: Variant, config: &ModelConfig, data: &Splits, opts: &TrainOptions) -> Result<MetricsReport> {
    let mut model = ForecastModel::new(variant.apply(config))?;
    train(&mut model, data, opts)?;
    evaluate(&model, &data.test, &data.scaler, opts.batch_size.max(64))
}
