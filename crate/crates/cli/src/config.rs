//! `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Later assignments win, so
//! the effective value of a key follows this precedence (lowest first):
//! built-in default, config file, `--set KEY=VALUE`, dedicated flags
//! (`--seed`, `--out`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use polyseg::data::AugmentConfig;
use polyseg::model::{ModelKind, ModelSpec, SIZE_MULTIPLE};
use polyseg::saliency::SaliencyTarget;
use polyseg::train::TrainConfig;
use polyseg::uncertainty::UncertaintyConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.kind", "efcn8 or esegnet"),
    ("model.base_width", "channels of the first encoder stage"),
    ("model.dropout_rate", "dropout probability in [0, 1)"),
    ("data.root", "dataset directory (images/, masks/, split.txt)"),
    ("data.synthetic.n", "number of synthetic samples"),
    ("data.synthetic.size", "synthetic image side, a multiple of 32"),
    ("data.synthetic.val", "synthetic samples held out for validation"),
    ("data.synthetic.test", "synthetic samples held out for testing"),
    ("train.lr", "Adam learning rate"),
    ("train.batch_size", "samples per optimizer step"),
    ("train.patience", "epochs without validation improvement before stopping"),
    ("train.max_epochs", "upper bound on training epochs"),
    ("train.seed", "seed for every random stream"),
    ("augment.enabled", "random rotation, zoom and shear during training"),
    ("augment.crop", "square training crop side, or none"),
    ("augment.rotation", "rotation range in degrees, LO,HI"),
    ("augment.zoom", "zoom range, LO,HI"),
    ("augment.shear", "shear range, LO,HI"),
    ("uncertainty.T", "Monte Carlo dropout passes"),
    ("saliency.target", "predicted, channel or pixel:Y,X"),
    ("output.dir", "directory for checkpoints, logs and images"),
];

/// A configuration problem tied to one key or file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key '{}': {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Architecture for `train`; the input size is taken from the data.
    pub model: ModelSpec,
    pub data_root: Option<PathBuf>,
    pub synth_n: usize,
    pub synth_size: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    pub train: TrainConfig,
    pub uncertainty: UncertaintyConfig,
    pub saliency_target: SaliencyTarget,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::new(ModelKind::Efcn8),
            data_root: None,
            synth_n: 600,
            synth_size: 64,
            synth_val: 50,
            synth_test: 50,
            train: TrainConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            saliency_target: SaliencyTarget::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| err(key, format!("expected {what}, got '{value}'")))
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64), ConfigError> {
    let (lo, hi) = value
        .split_once(',')
        .ok_or_else(|| err(key, format!("expected LO,HI, got '{value}'")))?;
    let lo: f64 = parse(key, lo.trim(), "a number")?;
    let hi: f64 = parse(key, hi.trim(), "a number")?;
    // Also rejects NaN bounds.
    if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
        return Err(err(key, format!("range {lo},{hi} is empty")));
    }
    Ok((lo, hi))
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: usize = parse(key, value, "a non-negative integer")?;
    if v == 0 {
        return Err(err(key, "must be at least 1"));
    }
    Ok(v)
}

impl RunConfig {
    /// Assigns one key, validating the value on its own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "model.kind" => self.model.kind = value.parse().map_err(|_| err(key, format!("unknown model '{value}'")))?,
            "model.base_width" => self.model.base_width = positive(key, value)?,
            "model.dropout_rate" => {
                let r: f64 = parse(key, value, "a number")?;
                if !(0.0..1.0).contains(&r) {
                    return Err(err(key, format!("must be in [0, 1), got {r}")));
                }
                self.model.dropout_rate = r;
            }
            "data.root" => self.data_root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.synthetic.n" => self.synth_n = positive(key, value)?,
            "data.synthetic.size" => {
                let s = positive(key, value)?;
                if s % SIZE_MULTIPLE != 0 {
                    return Err(err(key, format!("must be a multiple of {SIZE_MULTIPLE}, got {s}")));
                }
                self.synth_size = s;
            }
            "data.synthetic.val" => self.synth_val = parse(key, value, "a non-negative integer")?,
            "data.synthetic.test" => self.synth_test = parse(key, value, "a non-negative integer")?,
            "train.lr" => {
                let lr: f64 = parse(key, value, "a number")?;
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(err(key, format!("must be positive, got {lr}")));
                }
                self.train.adam.lr = lr;
            }
            "train.batch_size" => self.train.batch_size = positive(key, value)?,
            "train.patience" => self.train.patience = parse(key, value, "a non-negative integer")?,
            "train.max_epochs" => self.train.max_epochs = positive(key, value)?,
            "train.seed" => self.train.seed = parse(key, value, "an unsigned integer")?,
            "augment.enabled" => self.train.augment.enabled = parse(key, value, "true or false")?,
            "augment.crop" => {
                self.train.augment.crop = match value {
                    "none" => None,
                    v => {
                        let c = positive(key, v)?;
                        if c % SIZE_MULTIPLE != 0 {
                            return Err(err(key, format!("must be a multiple of {SIZE_MULTIPLE}, got {c}")));
                        }
                        Some(c)
                    }
                }
            }
            "augment.rotation" => self.train.augment.rotation_deg = parse_range(key, value)?,
            "augment.zoom" => {
                let r = parse_range(key, value)?;
                if r.0 <= 0.0 {
                    return Err(err(key, "zoom must be positive"));
                }
                self.train.augment.zoom = r;
            }
            "augment.shear" => self.train.augment.shear = parse_range(key, value)?,
            "uncertainty.T" => self.uncertainty.samples = positive(key, value)?,
            "saliency.target" => self.saliency_target = value.parse().map_err(|e| err(key, format!("{e}")))?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `KEY=VALUE`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| err(pair.trim(), "expected KEY=VALUE"))?;
        self.set(key.trim(), value)
    }

    /// Applies every assignment in config text; `source` names it in errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| ConfigError {
                message: format!("{} ({source}, line {})", e.message, i + 1),
                ..e
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            key: path.display().to_string(),
            message: format!("cannot read config file: {e}"),
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Checks rules that involve more than one key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.synth_val + self.synth_test >= self.synth_n {
            return Err(err(
                "data.synthetic.n",
                format!(
                    "{} samples leave nothing to train on after {} validation and {} test samples",
                    self.synth_n, self.synth_val, self.synth_test
                ),
            ));
        }
        let aug: &AugmentConfig = &self.train.augment;
        aug.validate().map_err(|e| err("augment", e.to_string()))?;
        Ok(())
    }

    pub fn data_root(&self) -> Result<&Path, ConfigError> {
        self.data_root
            .as_deref()
            .ok_or_else(|| err("data.root", "required by this command but not set"))
    }

    /// Renders the effective configuration in the file format.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let range = |r: (f64, f64)| format!("{},{}", r.0, r.1);
        let target = match self.saliency_target {
            SaliencyTarget::PredictedPolyp => "predicted".to_string(),
            SaliencyTarget::PolypChannel => "channel".to_string(),
            SaliencyTarget::Pixel(y, x) => format!("pixel:{y},{x}"),
        };
        let values = [
            self.model.kind.name().to_string(),
            self.model.base_width.to_string(),
            self.model.dropout_rate.to_string(),
            self.data_root.as_ref().map_or(String::new(), |p| p.display().to_string()),
            self.synth_n.to_string(),
            self.synth_size.to_string(),
            self.synth_val.to_string(),
            self.synth_test.to_string(),
            t.adam.lr.to_string(),
            t.batch_size.to_string(),
            t.patience.to_string(),
            t.max_epochs.to_string(),
            t.seed.to_string(),
            t.augment.enabled.to_string(),
            t.augment.crop.map_or("none".to_string(), |c| c.to_string()),
            range(t.augment.rotation_deg),
            range(t.augment.zoom),
            range(t.augment.shear),
            self.uncertainty.samples.to_string(),
            target,
            self.output_dir.display().to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .filter(|(_, v)| !v.is_empty())
            .map(|((k, _), v)| format!("{k} = {v}\n"))
            .collect()
    }
}
