//! Implementation of each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polyseg::checkpoint::{load_checkpoint, save_tensor_dump, Checkpoint};
use polyseg::data::{generate_synthetic, load_dataset, read_image, save_dataset, write_mask, Dataset, Sample, Split, SplitManifest};
use polyseg::metrics::MetricsReport;
use polyseg::model::{argmax_labels, forward_logits, ForwardMode};
use polyseg::saliency::{guided_backprop, render_saliency};
use polyseg::train::{evaluate, train as run_training, ResumeState, TrainOutcome, TrainRun, BEST_CHECKPOINT};
use polyseg::uncertainty::{mc_predict, render_uncertainty};
use polyseg::{IntTensor, Rng};

use crate::config::RunConfig;

/// Stream tags for [`Rng::derive`], distinct from the training streams.
const STREAM_SYNTH: u64 = 100;
const STREAM_MC: u64 = 101;

/// Writes a synthetic dataset to `data.root`.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let root = cfg.data_root()?;
    let size = (cfg.synth_size, cfg.synth_size);
    let samples = generate_synthetic(cfg.synth_n, size, &mut Rng::derive(cfg.train.seed, &[STREAM_SYNTH]))?;
    let manifest = SplitManifest::by_patient(&samples, cfg.synth_val, cfg.synth_test)?;
    save_dataset(root, &samples, &manifest).with_context(|| format!("writing dataset to {}", root.display()))?;
    log::info!("wrote {} samples to {}", samples.len(), root.display());
    Ok(root.to_path_buf())
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg.data_root()?;
    load_dataset(root).with_context(|| format!("loading dataset from {} (data.root)", root.display()))
}

fn split(ds: &Dataset, name: &str) -> Result<Vec<Sample>> {
    let s: Split = name.parse()?;
    let samples = ds.split(s)?;
    if samples.is_empty() {
        bail!("the manifest assigns no samples to split '{name}'");
    }
    Ok(samples)
}

/// Trains on the train split with early stopping on the val split; writes
/// checkpoints and the log to `output.dir`.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load(cfg)?;
    let train_set = split(&ds, "train")?;
    let val_set = split(&ds, "val")?;
    let (h, w) = (train_set[0].height(), train_set[0].width());
    if let Some(s) = train_set.iter().chain(&val_set).find(|s| (s.height(), s.width()) != (h, w)) {
        bail!("sample '{}' is {}x{}, expected {h}x{w} like the rest", s.name, s.height(), s.width());
    }
    let mut spec = cfg.model.clone();
    spec.input_size = cfg.train.augment.crop.map_or((h, w), |c| (c, c));
    let out = &cfg.output_dir;
    let resume = if resume {
        Some(ResumeState::load(out).with_context(|| format!("resuming from {}", out.display()))?)
    } else {
        None
    };
    let outcome = run_training(
        &spec,
        &train_set,
        &val_set,
        &cfg.train,
        TrainRun {
            out_dir: Some(out.clone()),
            resume,
            validator: None,
        },
    )?;
    fs::write(out.join("config.txt"), cfg.to_text()).with_context(|| format!("writing {}", out.display()))?;
    Ok(outcome)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cfg.output_dir.join(BEST_CHECKPOINT), Path::to_path_buf)
}

fn open_checkpoint(cfg: &RunConfig, given: Option<&Path>) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg, given);
    load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Metrics of a checkpoint on one split.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, split_name: &str) -> Result<MetricsReport> {
    let ckpt = open_checkpoint(cfg, checkpoint)?;
    let ds = load(cfg)?;
    let samples = split(&ds, split_name)?;
    Ok(evaluate(&ckpt.params, &ckpt.spec, &samples)?)
}

fn out_path(cfg: &RunConfig, image: &Path, suffix: &str) -> Result<PathBuf> {
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("{} has no file name", image.display()))?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg.output_dir.join(format!("{stem}.{suffix}")))
}

fn read_input(path: &Path) -> Result<polyseg::Tensor> {
    read_image(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes `<stem>.pred.png` masks (0 background, 255 polyp).
pub fn predict(cfg: &RunConfig, checkpoint: Option<&Path>, images: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let ckpt = open_checkpoint(cfg, checkpoint)?;
    let mut written = Vec::new();
    for path in images {
        let x = read_input(path)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let logits = forward_logits(&ckpt.params, &ckpt.spec, &x.reshape(&[1, c, h, w])?, ForwardMode::Eval, &mut Rng::new(0))
            .with_context(|| format!("predicting {}", path.display()))?;
        let labels = argmax_labels(&logits)?;
        let out = out_path(cfg, path, "pred.png")?;
        write_mask(&out, &IntTensor::new(&[h, w], labels.data().to_vec())?)?;
        written.push(out);
    }
    Ok(written)
}

/// Writes `<stem>.unc.png` and, with `dump`, the raw map as `<stem>.unc.bin`.
pub fn uncertainty(cfg: &RunConfig, checkpoint: Option<&Path>, images: &[PathBuf], dump: bool) -> Result<Vec<PathBuf>> {
    let ckpt = open_checkpoint(cfg, checkpoint)?;
    let mut written = Vec::new();
    for path in images {
        let x = read_input(path)?;
        let mut rng = Rng::derive(cfg.train.seed, &[STREAM_MC]);
        let r = mc_predict(&ckpt.params, &ckpt.spec, &x, &cfg.uncertainty, &mut rng)
            .with_context(|| format!("uncertainty for {}", path.display()))?;
        let out = out_path(cfg, path, "unc.png")?;
        render_uncertainty(&r, &out)?;
        written.push(out);
        if dump {
            let raw = out_path(cfg, path, "unc.bin")?;
            save_tensor_dump(&raw, "std_map", &r.std_map)?;
            written.push(raw);
        }
    }
    Ok(written)
}

/// Writes `<stem>.sal.png` and, with `dump`, the input gradient as
/// `<stem>.sal.bin`.
pub fn saliency(cfg: &RunConfig, checkpoint: Option<&Path>, images: &[PathBuf], dump: bool) -> Result<Vec<PathBuf>> {
    let ckpt = open_checkpoint(cfg, checkpoint)?;
    let mut written = Vec::new();
    for path in images {
        let x = read_input(path)?;
        let m = guided_backprop(&ckpt.params, &ckpt.spec, &x, cfg.saliency_target)
            .with_context(|| format!("saliency for {}", path.display()))?;
        let out = out_path(cfg, path, "sal.png")?;
        render_saliency(&m, &out)?;
        written.push(out);
        if dump {
            let raw = out_path(cfg, path, "sal.bin")?;
            save_tensor_dump(&raw, "input_gradient", &m.grad)?;
            written.push(raw);
        }
    }
    Ok(written)
}
