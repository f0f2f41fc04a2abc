//! Adam training with per-epoch validation and early stopping.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{augment, AugmentConfig, Batch, Sample};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::model::{argmax_labels, build, forward, forward_logits, ForwardMode, ForwardOptions, ModelParams, ModelSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Stream tags for [`Rng::derive`].
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

const EVAL_BATCH: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Weight of the newest batch in the batchnorm running statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 10,
            patience: 30,
            max_epochs: 200,
            seed: 0,
            augment: AugmentConfig::default(),
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(invalid!("batchnorm momentum must be in (0, 1], got {}", self.bn_momentum));
        }
        Ok(())
    }
}

/// Best validation score so far and how long ago it was reached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_metric: f64,
    pub best_step: u64,
    pub patience: usize,
    pub evals_since_best: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_metric: f64::NEG_INFINITY,
            best_step: 0,
            patience,
            evals_since_best: 0,
        }
    }

    /// Records an evaluation; returns true when it is a new best.
    pub fn observe(&mut self, metric: f64, step: u64) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_step = step;
            self.evals_since_best = 0;
            true
        } else {
            self.evals_since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.evals_since_best > self.patience
    }
}

/// One line of the training log. Epoch 0 is the evaluation before any update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val: MetricsReport,
    pub best_val_iou: f64,
    pub evals_since_best: usize,
}

/// Eval-mode metrics pooled over every pixel of `samples`.
pub fn evaluate(params: &ModelParams, spec: &ModelSpec, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(invalid!("cannot evaluate an empty sample set"));
    }
    let mut counts = ConfusionCounts::new();
    let mut rng = Rng::new(0);
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::stack(&chunk.iter().collect::<Vec<_>>())?;
        let logits = forward_logits(params, spec, &batch.images, ForwardMode::Eval, &mut rng)?;
        counts.accumulate(&argmax_labels(&logits)?, &batch.masks)?;
    }
    counts.finalize()
}

/// Validation hook: `(epoch, params) -> report`. Replaces [`evaluate`] on
/// the validation set.
pub type Validator<'a> = dyn FnMut(usize, &ModelParams) -> Result<MetricsReport> + 'a;

#[derive(Default)]
pub struct TrainRun<'a> {
    /// Receives `best.ckpt`, `last.ckpt` and the JSONL log.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<ResumeState>,
    pub validator: Option<&'a mut Validator<'a>>,
}

/// Latest and best checkpoints of an interrupted run.
#[derive(Clone, Debug)]
pub struct ResumeState {
    pub last: Checkpoint,
    pub best: Checkpoint,
}

impl ResumeState {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(ResumeState {
            last: load_checkpoint(&dir.join(LAST_CHECKPOINT))?,
            best: load_checkpoint(&dir.join(BEST_CHECKPOINT))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Records written by this call (a resumed run omits earlier epochs).
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub fn train(
    spec: &ModelSpec,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut run: TrainRun<'_>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    check_disjoint(train_set, val_set)?;
    if train_set.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if run.validator.is_none() && val_set.is_empty() {
        return Err(invalid!("validation set is empty"));
    }
    if let Some(dir) = &run.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut log = Vec::new();
    let (mut params, mut opt, mut stop, mut best, start_epoch) = match run.resume.take() {
        Some(r) => resume(spec, cfg, r)?,
        None => {
            let params = build(spec, &mut Rng::derive(cfg.seed, &[STREAM_INIT]))?;
            let opt = AdamState::new(cfg.adam)?;
            let mut stop = EarlyStopState::new(cfg.patience);
            let report = validate(&mut run, val_set, 0, &params, spec)?;
            stop.observe(report.iou_polyp, 0);
            let best = snapshot(spec, cfg, &params, None, &stop, 0);
            let rec = record(0, 0, None, report, &stop);
            emit(&run, &rec, true)?;
            log.push(rec);
            write_checkpoints(&run, Some(&best), &best)?;
            (params, opt, stop, best, 1)
        }
    };

    let mut stopped_early = stop.should_stop();
    let mut epoch = start_epoch;
    while !stopped_early && epoch <= cfg.max_epochs {
        let loss = train_epoch(spec, cfg, train_set, epoch, &mut params, &mut opt)?;
        let report = validate(&mut run, val_set, epoch, &params, spec)?;
        let improved = stop.observe(report.iou_polyp, opt.step_count);
        let last = snapshot(spec, cfg, &params, Some(&opt), &stop, epoch);
        if improved {
            best = snapshot(spec, cfg, &params, None, &stop, epoch);
        }
        write_checkpoints(&run, improved.then_some(&best), &last)?;
        let rec = record(epoch, opt.step_count, Some(loss), report, &stop);
        log::info!(
            "epoch {epoch}: loss {loss:.4} val polyp IoU {:.4} (best {:.4})",
            report.iou_polyp,
            stop.best_metric
        );
        emit(&run, &rec, false)?;
        log.push(rec);
        stopped_early = stop.should_stop();
        epoch += 1;
    }
    let last = snapshot(spec, cfg, &params, Some(&opt), &stop, epoch - 1);
    Ok(TrainOutcome {
        best,
        last,
        log,
        stopped_early,
    })
}

fn check_disjoint(train_set: &[Sample], val_set: &[Sample]) -> Result<()> {
    let names: BTreeSet<&str> = train_set.iter().map(|s| s.name.as_str()).collect();
    let patients: BTreeSet<&str> = train_set.iter().map(|s| s.patient_id.as_str()).collect();
    for s in val_set {
        if names.contains(s.name.as_str()) {
            return Err(invalid!("sample '{}' is in both the training and validation sets", s.name));
        }
        if patients.contains(s.patient_id.as_str()) {
            return Err(invalid!("patient '{}' is in both the training and validation sets", s.patient_id));
        }
    }
    Ok(())
}

fn validate(
    run: &mut TrainRun<'_>,
    val_set: &[Sample],
    epoch: usize,
    params: &ModelParams,
    spec: &ModelSpec,
) -> Result<MetricsReport> {
    match run.validator.as_mut() {
        Some(v) => v(epoch, params),
        None => evaluate(params, spec, val_set),
    }
}

/// One pass over the training set; returns the mean batch loss.
fn train_epoch(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    samples: &[Sample],
    epoch: usize,
    params: &mut ModelParams,
    opt: &mut AdamState,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    Rng::derive(cfg.seed, &[STREAM_ORDER, epoch as u64]).shuffle(&mut order);
    let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
    // A lone trailing sample joins the previous batch so batch statistics
    // stay defined.
    if batches.len() > 1 && batches[batches.len() - 1].len() == 1 {
        batches.pop();
        let start = (batches.len() - 1) * cfg.batch_size;
        *batches.last_mut().unwrap() = &order[start..];
    }
    let mut total = 0.0;
    for idx in &batches {
        let augmented = idx
            .iter()
            .map(|&i| augment(&samples[i], &cfg.augment, &mut Rng::derive(cfg.seed, &[STREAM_AUGMENT, epoch as u64, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::stack(&augmented.iter().collect::<Vec<_>>())?;
        let mut rng = Rng::derive(cfg.seed, &[STREAM_DROPOUT, opt.step_count]);
        total += train_step(spec, cfg, &batch, params, opt, &mut rng)?;
    }
    Ok(total / batches.len() as f64)
}

fn train_step(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    batch: &Batch,
    params: &mut ModelParams,
    opt: &mut AdamState,
    rng: &mut Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(batch.images.clone());
    let out = forward(&mut g, params, spec, x, ForwardOptions::training(), rng)?;
    let loss = g.softmax_ce(out.logits, batch.masks.clone())?;
    let value = g.value(loss)?.item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value} at step {}", opt.step_count)));
    }
    let mut grads = g.backward(loss)?;
    let grad_map = out
        .params
        .iter()
        .map(|(name, &id)| (name.clone(), grads.take(id)))
        .collect();
    adam_step(params.trainable_mut(), &grad_map, opt)?;
    params.apply_bn_stats(&out.bn_stats, cfg.bn_momentum)?;
    Ok(value)
}

fn record(epoch: usize, step: u64, loss: Option<f64>, val: MetricsReport, stop: &EarlyStopState) -> EpochRecord {
    EpochRecord {
        epoch,
        step,
        train_loss: loss,
        val,
        best_val_iou: stop.best_metric,
        evals_since_best: stop.evals_since_best,
    }
}

fn snapshot(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    params: &ModelParams,
    opt: Option<&AdamState>,
    stop: &EarlyStopState,
    epoch: usize,
) -> Checkpoint {
    let mut c = Checkpoint::new(spec.clone(), params.clone(), cfg.seed);
    c.step_count = opt.map_or(stop.best_step, |o| o.step_count);
    c.optimizer = opt.cloned();
    for (key, v) in [
        ("epoch", epoch as f64),
        ("best_metric", stop.best_metric),
        ("best_step", stop.best_step as f64),
        ("evals_since_best", stop.evals_since_best as f64),
    ] {
        c.train_state.insert(key.to_string(), Tensor::scalar(v));
    }
    c
}

fn state_value(c: &Checkpoint, key: &str) -> Result<f64> {
    c.train_state
        .get(key)
        .map(|t| t.item())
        .ok_or_else(|| invalid!("checkpoint has no training state '{key}'"))
}

type Restored = (ModelParams, AdamState, EarlyStopState, Checkpoint, usize);

fn resume(spec: &ModelSpec, cfg: &TrainConfig, r: ResumeState) -> Result<Restored> {
    let last = r.last;
    if &last.spec != spec {
        return Err(invalid!("checkpoint model spec differs from the configured one"));
    }
    if last.seed != cfg.seed {
        return Err(invalid!("checkpoint seed {} differs from configured seed {}", last.seed, cfg.seed));
    }
    let opt = last
        .optimizer
        .clone()
        .ok_or_else(|| invalid!("checkpoint has no optimizer state to resume from"))?;
    let stop = EarlyStopState {
        best_metric: state_value(&last, "best_metric")?,
        best_step: state_value(&last, "best_step")? as u64,
        patience: cfg.patience,
        evals_since_best: state_value(&last, "evals_since_best")? as usize,
    };
    let epoch = state_value(&last, "epoch")? as usize;
    Ok((last.params, opt, stop, r.best, epoch + 1))
}

fn write_checkpoints(run: &TrainRun<'_>, best: Option<&Checkpoint>, last: &Checkpoint) -> Result<()> {
    let Some(dir) = &run.out_dir else { return Ok(()) };
    if let Some(b) = best {
        save_checkpoint(b, &dir.join(BEST_CHECKPOINT))?;
    }
    save_checkpoint(last, &dir.join(LAST_CHECKPOINT))
}

fn emit(run: &TrainRun<'_>, rec: &EpochRecord, truncate: bool) -> Result<()> {
    let Some(dir) = &run.out_dir else { return Ok(()) };
    let path = dir.join(TRAIN_LOG);
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::model::ModelKind;
    use crate::tensor::IntTensor;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            base_width: 2,
            input_size: (32, 32),
            ..ModelSpec::new(ModelKind::Efcn8)
        }
    }

    fn tiny_data() -> (Vec<Sample>, Vec<Sample>) {
        let all = generate_synthetic(10, (32, 32), &mut Rng::new(5)).unwrap();
        (all[..5].to_vec(), all[5..].to_vec())
    }

    fn tiny_config(patience: usize, max_epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            patience,
            max_epochs,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn early_stop_arithmetic() {
        let mut s = EarlyStopState::new(2);
        assert!(s.observe(0.5, 0));
        for k in 1..=2 {
            assert!(!s.observe(0.5 - 0.1 * k as f64, k));
            assert!(!s.should_stop());
        }
        assert!(!s.observe(0.1, 3));
        assert!(s.should_stop());
        assert_eq!((s.best_metric, s.best_step), (0.5, 0));
    }

    fn run_degrading(patience: usize) {
        let (tr, va) = tiny_data();
        let cfg = tiny_config(patience, 200);
        let mut calls = Vec::new();
        let mut v = |epoch: usize, _: &ModelParams| {
            calls.push(epoch);
            Ok(MetricsReport::from_parts(0.9, 0.9 - 0.001 * epoch as f64, 0.9))
        };
        let out = train(
            &tiny_spec(),
            &tr,
            &va,
            &cfg,
            TrainRun {
                validator: Some(&mut v),
                ..TrainRun::default()
            },
        )
        .unwrap();
        assert!(out.stopped_early);
        // The step-0 evaluation is the best, then patience + 1 evaluations.
        assert_eq!(calls, (0..=patience + 1).collect::<Vec<_>>());
        assert_eq!(out.best.step_count, 0);
        let initial = build(&tiny_spec(), &mut Rng::derive(cfg.seed, &[STREAM_INIT])).unwrap();
        assert_eq!(out.best.params, initial);
        assert_eq!(out.log.last().unwrap().evals_since_best, patience + 1);
        assert!(out.log.iter().all(|r| r.best_val_iou == 0.9));
    }

    #[test]
    fn patience_two_stops_after_three_worse_evals() {
        run_degrading(2);
    }

    #[test]
    fn patience_thirty_stops_after_thirty_one_worse_evals() {
        run_degrading(30);
    }

    #[test]
    fn best_checkpoint_has_highest_metric() {
        let (tr, va) = tiny_data();
        let scores = [0.2, 0.5, 0.4, 0.7, 0.6, 0.65];
        let mut v = |epoch: usize, _: &ModelParams| Ok(MetricsReport::from_parts(0.9, scores[epoch], 0.9));
        let out = train(
            &tiny_spec(),
            &tr,
            &va,
            &tiny_config(5, 5),
            TrainRun {
                validator: Some(&mut v),
                ..TrainRun::default()
            },
        )
        .unwrap();
        assert!(!out.stopped_early);
        assert_eq!(out.log.len(), 6);
        assert_eq!(out.best.train_state["epoch"].item(), 3.0);
        assert_eq!(out.best.train_state["best_metric"].item(), 0.7);
        let bests: Vec<f64> = out.log.iter().map(|r| r.best_val_iou).collect();
        assert_eq!(bests, [0.2, 0.5, 0.5, 0.7, 0.7, 0.7]);
    }

    #[test]
    fn runs_are_deterministic_and_resume_exactly() {
        let (tr, va) = tiny_data();
        let spec = tiny_spec();
        let full_dir = tempfile::tempdir().unwrap();
        let run = |dir: &Path, max_epochs, resume| {
            train(
                &spec,
                &tr,
                &va,
                &tiny_config(30, max_epochs),
                TrainRun {
                    out_dir: Some(dir.to_path_buf()),
                    resume,
                    validator: None,
                },
            )
            .unwrap()
        };
        let full = run(full_dir.path(), 3, None);
        let again = run(tempfile::tempdir().unwrap().path(), 3, None);
        assert_eq!(full.last.to_bytes(), again.last.to_bytes());
        assert_eq!(full.best.to_bytes(), again.best.to_bytes());

        let split_dir = tempfile::tempdir().unwrap();
        run(split_dir.path(), 1, None);
        let resumed = run(split_dir.path(), 3, Some(ResumeState::load(split_dir.path()).unwrap()));
        assert_eq!(resumed.log.len(), 2);
        assert_eq!(resumed.last.to_bytes(), full.last.to_bytes());
        assert_eq!(resumed.best.to_bytes(), full.best.to_bytes());
        for name in [BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG] {
            assert_eq!(
                fs::read(split_dir.path().join(name)).unwrap(),
                fs::read(full_dir.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn rejects_overlapping_splits() {
        let (tr, _) = tiny_data();
        let err = train(&tiny_spec(), &tr, &tr[..1], &tiny_config(1, 1), TrainRun::default()).unwrap_err();
        assert!(err.to_string().contains("both"), "{err}");
    }

    #[test]
    fn evaluate_identity_and_empty() {
        let spec = tiny_spec();
        let mut params = build(&spec, &mut Rng::new(1)).unwrap();
        // Zero the final upsampler so the bias alone decides: always background.
        for (name, t) in params.trainable_mut().iter_mut() {
            if name.starts_with("up8.") {
                t.data_mut().fill(0.0);
            }
        }
        params.get_mut("up8.bias").unwrap().data_mut().copy_from_slice(&[10.0, -10.0]);
        let image = Tensor::full(&[3, 32, 32], 0.5);
        let bg = Sample::new(image.clone(), IntTensor::zeros(&[32, 32]), "p", "a").unwrap();
        let r = evaluate(&params, &spec, &[bg]).unwrap();
        assert_eq!((r.iou_background, r.iou_polyp, r.iou_mean, r.global_accuracy), (1.0, 1.0, 1.0, 1.0));
        let mut m = IntTensor::zeros(&[32, 32]);
        m.data_mut()[0] = 1;
        let fg = Sample::new(image, m, "p", "b").unwrap();
        assert_eq!(evaluate(&params, &spec, &[fg]).unwrap().iou_polyp, 0.0);
        assert!(evaluate(&params, &spec, &[]).is_err());
    }
}
