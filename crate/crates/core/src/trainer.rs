//! Regularized minibatch training.
//!
//! Per minibatch:
//!
//! 1. `u`  = backprop gradient of the mean cross-entropy
//! 2. `v`  = gradient of `L2'`
//! 3. `z1`, `z2` = VL1 / VL2 gradients of the VR layer's slabs (double convolution)
//! 4. `g`  = `u + lambda v + mu1 z1 + mu2 z2`
//! 5. momentum step: `vel <- beta vel + g`, `w <- w - alpha vel`
//!    (Nesterov: `w <- w - alpha (g + beta vel)`)

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{flip, RelKernel};
use crate::data::{epoch_rng, minibatches, Dataset};
use crate::error::{Error, Result};
use crate::network::{
    Architecture, Batch, GradientParts, Gradients, LossTerms, Mode, NetworkModel, Regularization, Shape3,
};
use crate::visloss::Norm;

const DROPOUT_STREAM: u64 = 0xD0;

/// Piecewise-constant learning-rate schedules.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// `alpha0` for epochs `0..75`, then `alpha0 / 2`, divided by 1.3 every 25 epochs from epoch 100.
    Mnist,
    /// `alpha0`, divided by 1.3 every 500 epochs.
    Cifar,
    Constant,
    /// `(start_epoch, rate)` pairs sorted by epoch; `alpha0` before the first.
    Steps(Vec<(usize, f64)>),
}

impl Schedule {
    pub fn rate(&self, epoch: usize, alpha0: f64) -> f64 {
        match self {
            Schedule::Mnist => {
                if epoch < 75 {
                    alpha0
                } else {
                    alpha0 * 0.5 / 1.3f64.powi(((epoch - 75) / 25) as i32)
                }
            }
            Schedule::Cifar => alpha0 / 1.3f64.powi((epoch / 500) as i32),
            Schedule::Constant => alpha0,
            Schedule::Steps(steps) => steps
                .iter()
                .take_while(|(start, _)| *start <= epoch)
                .last()
                .map_or(alpha0, |&(_, r)| r),
        }
    }
}

pub fn lr_schedule(schedule: &Schedule, epoch: usize, alpha0: f64) -> f64 {
    schedule.rate(epoch, alpha0)
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Mnist => write!(f, "mnist"),
            Schedule::Cifar => write!(f, "cifar"),
            Schedule::Constant => write!(f, "constant"),
            Schedule::Steps(steps) => {
                let parts: Vec<String> = steps.iter().map(|(e, r)| format!("{e}:{r}")).collect();
                write!(f, "steps({})", parts.join(", "))
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `mnist`, `cifar`, `constant` or `steps(10:0.005, 20:0.001)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "mnist" | "mnist_schedule" => return Ok(Schedule::Mnist),
            "cifar" | "cifar_schedule" => return Ok(Schedule::Cifar),
            "constant" => return Ok(Schedule::Constant),
            _ => {}
        }
        let inner = s
            .strip_prefix("steps(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Config(format!("unknown schedule {s:?}")))?;
        let mut steps = Vec::new();
        for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (e, r) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("schedule step {part:?} must be epoch:rate")))?;
            let e: usize = e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule epoch {e:?}")))?;
            let r: f64 = r
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule rate {r:?}")))?;
            if steps.last().is_some_and(|&(prev, _)| prev >= e) {
                return Err(Error::Config("schedule steps must have increasing epochs".into()));
            }
            steps.push((e, r));
        }
        Ok(Schedule::Steps(steps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub reg: Regularization,
    /// Initial learning rate `alpha0`.
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reg: Regularization::none(),
            lr: 0.01,
            momentum: 0.9,
            nesterov: false,
            schedule: Schedule::Constant,
            epochs: 1,
            batch_size: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean composite loss over the epoch's minibatches (train mode).
    pub train_loss: f64,
    /// Fraction of train samples classified correctly during the epoch (train mode).
    pub train_acc: f64,
    /// Eval-mode test accuracy after the epoch, if a test set was given.
    pub test_acc: Option<f64>,
    pub vl1: f64,
    pub vl2: f64,
    pub l2_prime: f64,
    pub seconds: f64,
}

/// Column order of the metrics CSV. Wall time is kept out so that seeded
/// runs produce byte-identical logs; it goes to a separate timing log.
pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc,vl1,vl2,l2_prime";
pub const TIMING_HEADER: &str = "epoch,seconds";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let test = self.test_acc.map_or(String::new(), |a| format!("{a}"));
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, test, self.vl1, self.vl2, self.l2_prime
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Momentum state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Option<Gradients>,
}

impl Optimizer {
    pub fn new(momentum: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            nesterov,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&Gradients> {
        self.velocity.as_ref()
    }

    /// Applies one update with gradient `g` and rate `lr`.
    pub fn step(&mut self, model: &mut NetworkModel, g: &Gradients, lr: f64) {
        let beta = self.momentum;
        let vel = self.velocity.get_or_insert_with(|| Gradients::zeros_like(model));
        for (v, g) in vel.layers.iter_mut().zip(&g.layers) {
            if let (Some(v), Some(g)) = (v.as_mut(), g.as_ref()) {
                Zip::from(&mut v.weights).and(&g.weights).for_each(|v, &g| *v = beta * *v + g);
                Zip::from(&mut v.bias).and(&g.bias).for_each(|v, &g| *v = beta * *v + g);
            }
        }
        let nesterov = self.nesterov;
        for ((p, v), g) in model.params_mut().iter_mut().zip(&vel.layers).zip(&g.layers) {
            if let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_ref(), g.as_ref()) {
                if nesterov {
                    Zip::from(&mut p.weights)
                        .and(&v.weights)
                        .and(&g.weights)
                        .for_each(|w, &v, &g| *w -= lr * (g + beta * v));
                    Zip::from(&mut p.bias)
                        .and(&v.bias)
                        .and(&g.bias)
                        .for_each(|b, &v, &g| *b -= lr * (g + beta * v));
                } else {
                    Zip::from(&mut p.weights).and(&v.weights).for_each(|w, &v| *w -= lr * v);
                    Zip::from(&mut p.bias).and(&v.bias).for_each(|b, &v| *b -= lr * v);
                }
            }
        }
    }
}

/// Everything one minibatch step produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Loss terms at the parameters before the update (train-mode forward).
    pub terms: LossTerms,
    pub correct: usize,
    pub parts: GradientParts,
    /// The assembled gradient `g` handed to the optimizer.
    pub applied: Gradients,
}

/// One regularized SGD step on `batch`.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut NetworkModel,
    batch: &Batch,
    reg: &Regularization,
    opt: &mut Optimizer,
    lr: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    let cache = model.forward(&batch.inputs, Mode::Train, rng)?;
    let terms = model.loss_terms_from(cache.outputs(), &batch.labels, reg)?;
    let correct = count_correct(cache.outputs(), &batch.labels);
    let parts = model.backward(&cache, &batch.labels, reg)?;
    drop(cache);
    let applied = parts.assemble(reg);
    opt.step(model, &applied, lr);
    Ok(StepOutcome {
        terms,
        correct,
        parts,
        applied,
    })
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(probs: &Array2<f64>, labels: &[usize]) -> usize {
    probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count()
}

/// Eval-mode accuracy (ties go to the lowest class index).
pub fn evaluate(model: &NetworkModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(1000) {
        let batch = data.batch(chunk);
        let probs = model.predict(&batch.inputs)?;
        correct += count_correct(&probs, &batch.labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs `config.epochs` epochs, calling `on_epoch` after each with the new row.
pub fn train(
    config: &TrainConfig,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    model: &mut NetworkModel,
    mut on_epoch: impl FnMut(&MetricsRow, &NetworkModel) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    if train_data.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "training data has shape {} but the model expects {}",
            train_data.shape(),
            model.input_shape()
        )));
    }
    let mut opt = Optimizer::new(config.momentum, config.nesterov);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.schedule.rate(epoch, config.lr);
        let mut rng = epoch_rng(config.seed, epoch, DROPOUT_STREAM);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let batches = minibatches(train_data.len(), config.batch_size, config.seed, epoch)?;
        for idx in &batches {
            let batch = train_data.batch(idx);
            let out = train_step(model, &batch, &config.reg, &mut opt, lr, &mut rng)?;
            let loss = out.terms.total(&config.reg);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    lr,
                    msg: format!("minibatch loss is {loss}"),
                });
            }
            loss_sum += loss;
            correct += out.correct;
        }
        let (vl1, vl2) = match model.vr_layer() {
            Some(_) => (model.vl(&config.reg.kernel, Norm::L1)?, model.vl(&config.reg.kernel, Norm::L2)?),
            None => (0.0, 0.0),
        };
        let test_acc = test_data.map(|d| evaluate(model, d)).transpose()?;
        let row = MetricsRow {
            epoch,
            lr,
            train_loss: loss_sum / batches.len().max(1) as f64,
            train_acc: correct as f64 / train_data.len().max(1) as f64,
            test_acc,
            vl1,
            vl2,
            l2_prime: model.l2_prime(),
            seconds: start.elapsed().as_secs_f64(),
        };
        if !row.train_loss.is_finite() || !vl2.is_finite() {
            return Err(Error::Diverged {
                epoch,
                lr,
                msg: "non-finite loss after epoch".into(),
            });
        }
        on_epoch(&row, model)?;
        log.push(row);
    }
    Ok(log)
}

/// Median wall times of the three gradient steps on one model/batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchTimes {
    /// VL2 gradient of the VR layer (double convolution over every slab).
    pub t_vr: f64,
    /// `L2'` gradient.
    pub t_l2: f64,
    /// Train-mode forward plus classification backprop.
    pub t_backprop: f64,
    pub vr_weights: usize,
    pub batch: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn timed(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64()
}

/// Times Step 1 (backprop), Step 2 (L2') and Step 3 (VR) on every
/// `(model, batch)` pair, `reps` times, and reports per-pair medians.
///
/// Pairs are visited round-robin within each repetition, so a slow period of
/// the machine lands on all pairs alike rather than on one. Within a visit
/// the steps run in training order: backprop, then VR, then L2'. Output
/// buffers are allocated once, so allocator and page-fault costs stay out.
pub fn bench_round_robin(setups: &[(&NetworkModel, &Batch)], kernel: &RelKernel, reps: usize) -> Result<Vec<BenchTimes>> {
    let flipped = flip(kernel);
    let mut rng = epoch_rng(0, 0, DROPOUT_STREAM);
    // One set of output buffers per distinct model: buffer placement alone can
    // shift timings by tens of percent, which must not masquerade as a batch effect.
    let mut buffers: Vec<(*const NetworkModel, usize, Array2<f64>, Gradients)> = Vec::new();
    let mut slot = Vec::with_capacity(setups.len());
    for &(model, _) in setups {
        let key = model as *const NetworkModel;
        match buffers.iter().position(|b| b.0 == key) {
            Some(i) => slot.push(i),
            None => {
                let v = model.vr_layer().ok_or(Error::NoVrLayer)?;
                let vr = model.vr_gradient(v, kernel, &flipped, Norm::L2)?;
                buffers.push((key, v, vr, Gradients::zeros_like(model)));
                slot.push(buffers.len() - 1);
            }
        }
    }
    let mut samples = vec![(Vec::new(), Vec::new(), Vec::new()); setups.len()];
    // Repetition 0 is a warm-up and is discarded.
    for rep in 0..=reps.max(1) {
        for (i, &(model, batch)) in setups.iter().enumerate() {
            let (_, v, vr_out, l2_out) = &mut buffers[slot[i]];
            let mut result = Ok(());
            let t_bp = timed(|| {
                result = model
                    .forward(&batch.inputs, Mode::Train, &mut rng)
                    .and_then(|c| model.class_gradient(&c, &batch.labels))
                    .map(|g| {
                        std::hint::black_box(g);
                    });
            });
            std::mem::replace(&mut result, Ok(()))?;
            let t_vr = timed(|| {
                result = model.vr_gradient_into(*v, kernel, &flipped, Norm::L2, vr_out);
                std::hint::black_box(&*vr_out);
            });
            result?;
            let t_l2 = timed(|| {
                model.l2_gradient_into(l2_out);
                std::hint::black_box(&*l2_out);
            });
            if rep > 0 {
                samples[i].0.push(t_vr);
                samples[i].1.push(t_l2);
                samples[i].2.push(t_bp);
            }
        }
    }
    Ok(setups
        .iter()
        .zip(samples)
        .map(|(&(model, batch), (vr, l2, bp))| {
            let (count, rows, cols) = model.vr_geometry().expect("vr layer checked");
            BenchTimes {
                t_vr: median(vr),
                t_l2: median(l2),
                t_backprop: median(bp),
                vr_weights: count * rows * cols,
                batch: batch.len(),
            }
        })
        .collect())
}

/// Median-of-`reps` times of the three gradient steps on one model and batch.
pub fn vr_overhead_bench(model: &NetworkModel, batch: &Batch, kernel: &RelKernel, reps: usize) -> Result<BenchTimes> {
    Ok(bench_round_robin(&[(model, batch)], kernel, reps)?[0])
}

/// Random inputs in `[0, 1)` with cycling labels, for timing only.
pub fn synthetic_batch(shape: Shape3, n: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_fn((n, shape.len()), |_| rng.random_range(0.0..1.0));
    Batch {
        inputs,
        labels: (0..n).map(|i| i % classes.max(1)).collect(),
    }
}

/// Round-robin bench of `arch` with every hidden fc layer set to each width.
pub fn bench_widths(
    arch: &Architecture,
    shape: Shape3,
    widths: &[usize],
    batch_size: usize,
    kernel: &RelKernel,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchTimes>> {
    let mut models = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        models.push(NetworkModel::from_architecture(&arch.clone().with_fc_width(w), shape, None, &mut rng)?);
    }
    let batches: Vec<Batch> = models
        .iter()
        .map(|m| synthetic_batch(m.input_shape(), batch_size, m.classes(), seed))
        .collect();
    let setups: Vec<_> = models.iter().zip(&batches).collect();
    bench_round_robin(&setups, kernel, reps)
}

/// Round-robin bench of one model at each batch size.
pub fn bench_batches(model: &NetworkModel, sizes: &[usize], kernel: &RelKernel, reps: usize, seed: u64) -> Result<Vec<BenchTimes>> {
    let batches: Vec<Batch> = sizes
        .iter()
        .map(|&n| synthetic_batch(model.input_shape(), n, model.classes(), seed))
        .collect();
    let setups: Vec<_> = batches.iter().map(|b| (model, b)).collect();
    bench_round_robin(&setups, kernel, reps)
}

/// Least-squares slope of `log t` against `log n`; 1.0 means linear scaling.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_schedule() {
        let s = Schedule::Cifar;
        assert_eq!(s.rate(0, 0.01), 0.01);
        assert_eq!(s.rate(499, 0.01), 0.01);
        assert_eq!(s.rate(500, 0.01), 0.01 / 1.3);
        assert_eq!(s.rate(1000, 0.01), 0.01 / 1.3 / 1.3);
    }

    #[test]
    fn mnist_schedule() {
        let s = Schedule::Mnist;
        assert_eq!(s.rate(0, 0.01), 0.01);
        assert_eq!(s.rate(74, 0.01), 0.01);
        assert_eq!(s.rate(75, 0.01), 0.005);
        assert_eq!(s.rate(99, 0.01), 0.005);
        assert_eq!(s.rate(100, 0.01), 0.005 / 1.3);
        assert!((s.rate(125, 0.01) - 0.005 / 1.69).abs() < 1e-15);
    }

    #[test]
    fn constant_and_steps() {
        for e in [0, 10, 10_000] {
            assert_eq!(lr_schedule(&Schedule::Constant, e, 0.3), 0.3);
        }
        let s: Schedule = "steps(10:0.005, 20:0.001)".parse().unwrap();
        assert_eq!(s.rate(9, 0.01), 0.01);
        assert_eq!(s.rate(10, 0.01), 0.005);
        assert_eq!(s.rate(25, 0.01), 0.001);
        assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        assert!("steps(5:1, 5:2)".parse::<Schedule>().is_err());
        assert!("weekly".parse::<Schedule>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig { epochs: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.reg.mu2 = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn slope_of_linear_data() {
        let pts: Vec<_> = (1..6).map(|i| (f64::from(i), 3.0 * f64::from(i))).collect();
        assert!((log_log_slope(&pts) - 1.0).abs() < 1e-12);
    }
}
