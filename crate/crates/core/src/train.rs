//! Adam, learning-rate schedule, evaluation and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainProgress};
use crate::data::{batches, translate_batch, Dataset};
use crate::error::{config_err, contract_err, Error, Result};
use crate::model::{CapsNet, Mode};
use crate::objectives::{spread_loss, MarginSchedule};
use crate::tensor::{Graph, Tensor};

pub const METRICS_HEADER: &str = "epoch,margin,lr,train_loss,val_accuracy,wall_seconds";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// parameter changes; `names` label the diagnostics.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, names: &[&str]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(contract_err!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).copied().unwrap_or("?");
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(contract_err!(
                "parameter {name}: shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            ));
        }
        if let Some(at) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of {name} is {} at element {at}",
                g.data()[at]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Step decay `base * factor^floor(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            factor: 0.8,
            every: 20,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.base));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) || self.every == 0 {
            return Err(config_err!("learning-rate decay needs 0 < factor <= 1 and every >= 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.every) as i32)
    }
}

/// `1e-3 * 0.8^floor(epoch / 20)`.
pub fn lr_at(epoch: usize) -> f64 {
    LrSchedule::default().lr_at(epoch)
}

/// Anything that maps images to `[B, M]` class scores.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn predict(&self, images: &Tensor) -> Result<Tensor>;
}

impl Classifier for CapsNet {
    fn num_classes(&self) -> usize {
        self.spec().num_classes()
    }

    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        CapsNet::predict(self, images)
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `ds` whose argmax prediction equals the label.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(contract_err!("cannot evaluate on an empty dataset"));
    }
    ds.check_classes(model.num_classes())?;
    let mut correct = 0usize;
    for (images, labels) in batches(ds, batch_size, false, 0)? {
        let prob = model.predict(&images)?;
        let m = model.num_classes();
        if prob.shape() != [labels.len(), m] {
            return Err(contract_err!("classifier returned {:?} for a batch of {}", prob.shape(), labels.len()));
        }
        correct += prob.data().chunks(m).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: LrSchedule,
    pub margin: MarginSchedule,
    pub seed: u64,
    /// Random translation of each training image, in pixels.
    pub translate_px: usize,
    /// Write measured epoch times to the metrics file; when off the column
    /// holds zeros so that runs compare byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 128,
            eval_batch_size: 256,
            lr: LrSchedule::default(),
            margin: MarginSchedule::default(),
            seed: 0,
            translate_px: 2,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(config_err!("batch sizes must be at least 1"));
        }
        self.lr.validate()?;
        self.margin.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub margin: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Validation accuracy before the first update.
    pub initial_val_accuracy: f64,
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    /// Best `(epoch, accuracy)`; epoch 0 is the untrained model. Earlier
    /// epochs win ties.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, self.initial_val_accuracy);
        for r in &self.records {
            if r.val_accuracy > best.1 {
                best = (r.epoch, r.val_accuracy);
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.margin, r.lr, r.train_loss, r.val_accuracy, r.wall_seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Generator for epoch `epoch` (0-based) of a run seeded with `seed`; used for
/// shuffling, translation and dropout so that any epoch can be replayed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One pass over `train`; returns the example-weighted mean loss.
pub fn train_epoch(
    net: &mut CapsNet,
    opt: &mut OptimizerState,
    train: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let margin = cfg.margin.margin_at(epoch);
    opt.lr = cfg.lr.lr_at(epoch);
    let mut rng = epoch_rng(cfg.seed, epoch);
    let order_seed: u64 = rng.gen();
    let names: Vec<String> = net.layout().iter().map(|p| p.name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut total = 0.0;
    for (i, (images, labels)) in batches(train, cfg.batch_size, true, order_seed)?.enumerate() {
        let images = translate_batch(&images, cfg.translate_px, &mut rng)?;
        let (loss, grads, bn) = {
            let g = Graph::new();
            let vars = net.bind(&g);
            let out = net.forward(&vars, g.constant(images), Mode::Train, &mut rng)?;
            let loss = spread_loss(out.prob, &labels, margin)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss is {value} at epoch {}, batch {i}", epoch + 1)));
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            (value, grads, out.bn_batch)
        };
        adam_step(net.params_mut(), &grads, opt, &names)?;
        net.update_running_stats(&bn);
        total += loss * labels.len() as f64;
    }
    Ok(total / train.len() as f64)
}

/// Runs epochs `progress.epochs_done..cfg.epochs`, evaluating on `val` after
/// each. With `out_dir`, rewrites the metrics file and the last checkpoint
/// every epoch and saves the best checkpoint whenever validation accuracy
/// improves.
pub fn train_from(
    net: &mut CapsNet,
    opt: &mut OptimizerState,
    progress: &mut TrainProgress,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(contract_err!("training set is empty"));
    }
    train.check_classes(net.spec().num_classes())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if progress.metrics.records.is_empty() {
            save_best(net, progress, dir)?;
            progress.metrics.write_csv(&dir.join(METRICS_FILE))?;
        }
    }
    for epoch in progress.epochs_done..cfg.epochs {
        let start = Instant::now();
        let train_loss = train_epoch(net, opt, train, cfg, epoch)?;
        let val_accuracy = evaluate(net, val, cfg.eval_batch_size)?;
        let elapsed = start.elapsed().as_secs_f64();
        let record = EpochRecord {
            epoch: epoch + 1,
            margin: cfg.margin.margin_at(epoch),
            lr: cfg.lr.lr_at(epoch),
            train_loss,
            val_accuracy,
            wall_seconds: if cfg.record_wall_time { elapsed } else { 0.0 },
        };
        log::info!(
            "epoch {:>3}  margin {:.3}  lr {:.2e}  loss {:.5}  val {:.4}  ({elapsed:.1}s)",
            record.epoch,
            record.margin,
            record.lr,
            train_loss,
            val_accuracy
        );
        let improved = val_accuracy > progress.metrics.best().1;
        progress.metrics.records.push(record);
        progress.epochs_done = epoch + 1;
        if let Some(dir) = out_dir {
            if improved {
                save_best(net, progress, dir)?;
            }
            Checkpoint::capture(net, Some(opt), progress).save(&dir.join(LAST_CHECKPOINT))?;
            progress.metrics.write_csv(&dir.join(METRICS_FILE))?;
        }
    }
    Ok(())
}

fn save_best(net: &CapsNet, progress: &TrainProgress, dir: &Path) -> Result<()> {
    Checkpoint::capture(net, None, progress).save(&dir.join(BEST_CHECKPOINT))
}

/// Fresh run: measures the initial validation accuracy, then trains.
pub fn train(net: &mut CapsNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunMetrics> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(net.params(), cfg.lr.base);
    let mut progress = TrainProgress {
        epochs_done: 0,
        metrics: RunMetrics {
            initial_val_accuracy: evaluate(net, val, cfg.eval_batch_size)?,
            records: Vec::new(),
        },
    };
    train_from(net, &mut opt, &mut progress, train, val, cfg, out_dir)?;
    Ok(progress.metrics)
}

/// Continues the run stored in `checkpoint` up to `cfg.epochs`.
pub fn resume(
    checkpoint: Checkpoint,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CapsNet, RunMetrics)> {
    let (mut net, opt, mut progress) = checkpoint.restore()?;
    let mut opt = opt.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
    train_from(&mut net, &mut opt, &mut progress, train, val, cfg, out_dir)?;
    Ok((net, progress.metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_points() {
        assert_eq!(lr_at(0), 1e-3);
        assert_eq!(lr_at(19), 1e-3);
        assert!((lr_at(20) - 8e-4).abs() < 1e-18);
        assert!((lr_at(40) - 6.4e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut st = OptimizerState::new(&p, 1e-3);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &["w"]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(vec![0.0, 0.0])];
        let mut st = OptimizerState::new(&p, 1e-3);
        let g = [Tensor::from_vec(vec![3.0, -0.5])];
        for _ in 0..200 {
            let before = p[0].data().to_vec();
            adam_step(&mut p, &g, &mut st, &["w"]).unwrap();
            let d0 = p[0].data()[0] - before[0];
            let d1 = p[0].data()[1] - before[1];
            assert!((d0 + 1e-3).abs() < 1e-8 && (d1 - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_nan_names_parameter() {
        let mut p = vec![Tensor::zeros(&[1]), Tensor::zeros(&[2])];
        let mut st = OptimizerState::new(&p, 1e-3);
        let g = [Tensor::zeros(&[1]), Tensor::from_vec(vec![0.0, f64::NAN])];
        let err = adam_step(&mut p, &g, &mut st, &["a", "b.kernel"]).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("b.kernel")));
        assert_eq!(st.step, 0);
    }

    struct Fixed(Vec<f64>);

    impl Classifier for Fixed {
        fn num_classes(&self) -> usize {
            3
        }
        fn predict(&self, images: &Tensor) -> Result<Tensor> {
            let b = images.shape()[0];
            Tensor::new(&[b, 3], self.0.iter().copied().cycle().take(3 * b).collect())
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        let ds = Dataset::new(Tensor::zeros(&[4, 1, 1, 1]), vec![0, 1, 0, 2], crate::data::Split::Val).unwrap();
        assert_eq!(evaluate(&Fixed(vec![0.3, 0.3, 0.1]), &ds, 3).unwrap(), 0.5);
    }
}
