//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file or `--set key=value` overrides
//! only what it names, and unknown keys are rejected. The resolved config is
//! echoed into the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::{DomainSpec, Shift};
use crate::error::{Error, Result};
use crate::rng;
use crate::source_stage::{SourceConfig, ValueConfig};
use crate::target_stage::TargetConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub palette_noise: f64,
    pub object_jitter: f64,
    pub illumination_jitter: f64,
    pub shift: Shift,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = DomainSpec::source(0, 0);
        Self {
            height: s.height,
            width: s.width,
            source_train: 200,
            source_val: 40,
            target_train: 200,
            target_test: 100,
            palette_noise: s.palette_noise,
            object_jitter: s.object_jitter,
            illumination_jitter: s.illumination_jitter,
            shift: Shift::DEFAULT_TARGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub source: SourceConfig,
    pub value: ValueConfig,
    pub target: TargetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            source: SourceConfig::default(),
            value: ValueConfig::default(),
            target: TargetConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// `(key, description)` in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed for data, initialization, shuffling and sampling"),
    ("out_dir", "run directory"),
    ("data.height", "image height in pixels"),
    ("data.width", "image width in pixels"),
    ("data.source_train", "source training images"),
    (
        "data.source_val",
        "source validation images used for checkpoint selection",
    ),
    ("data.target_train", "unlabeled target images used for adaptation"),
    ("data.target_test", "held-out target images used for evaluation"),
    ("data.palette_noise", "per-pixel color noise"),
    ("data.object_jitter", "per-image class color offset half-width"),
    ("data.illumination_jitter", "per-image brightness offset half-width"),
    ("data.shift_hue", "target hue rotation, fraction of a full turn"),
    ("data.shift_brightness", "target brightness offset"),
    ("data.shift_noise", "target additive noise standard deviation"),
    ("source.alpha", "weight of the differentiable ECE loss"),
    ("source.epochs", "source training epochs"),
    ("source.batch_size", "source batch size"),
    ("source.lr", "initial learning rate"),
    ("source.momentum", "SGD momentum"),
    ("source.weight_decay", "L2 weight decay"),
    ("source.poly_power", "polynomial decay power"),
    (
        "source.ece_warmup_epochs",
        "epochs of pure cross-entropy before the ECE loss joins",
    ),
    ("calib.bins", "confidence bins"),
    ("calib.temperature", "logsumexp temperature of the differentiable ECE"),
    ("value.epochs", "value net epochs"),
    ("value.batch_size", "value net batch size"),
    ("value.lr", "value net initial learning rate"),
    ("value.momentum", "value net SGD momentum"),
    ("value.weight_decay", "value net weight decay"),
    ("value.poly_power", "value net polynomial decay power"),
    ("target.delta", "fraction of each class pseudo-labeled"),
    (
        "target.epsilon",
        "weight of the weighted cross-entropy in the symmetric loss",
    ),
    ("target.eta", "weight of the entropy regularizer"),
    ("target.rounds", "pseudo-labeling rounds"),
    (
        "target.epochs_per_round",
        "epochs per round, the first being the statistic warm-up",
    ),
    ("target.batch_size", "adaptation batch size"),
    ("target.lr", "adaptation initial learning rate"),
    ("target.momentum", "adaptation SGD momentum"),
    ("target.weight_decay", "adaptation weight decay"),
    ("target.poly_power", "adaptation polynomial decay power"),
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (d, s, vc, t) = (&mut self.data, &mut self.source, &mut self.value, &mut self.target);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.source_train" => d.source_train = parse(key, v)?,
            "data.source_val" => d.source_val = parse(key, v)?,
            "data.target_train" => d.target_train = parse(key, v)?,
            "data.target_test" => d.target_test = parse(key, v)?,
            "data.palette_noise" => d.palette_noise = parse(key, v)?,
            "data.object_jitter" => d.object_jitter = parse(key, v)?,
            "data.illumination_jitter" => d.illumination_jitter = parse(key, v)?,
            "data.shift_hue" => d.shift.hue = parse(key, v)?,
            "data.shift_brightness" => d.shift.brightness = parse(key, v)?,
            "data.shift_noise" => d.shift.noise = parse(key, v)?,
            "source.alpha" => s.alpha = parse(key, v)?,
            "source.epochs" => s.epochs = parse(key, v)?,
            "source.batch_size" => s.batch_size = parse(key, v)?,
            "source.lr" => s.lr = parse(key, v)?,
            "source.momentum" => s.momentum = parse(key, v)?,
            "source.weight_decay" => s.weight_decay = parse(key, v)?,
            "source.poly_power" => s.poly_power = parse(key, v)?,
            "source.ece_warmup_epochs" => s.ece_warmup_epochs = parse(key, v)?,
            "calib.bins" => {
                s.calib.bins = parse(key, v)?;
                vc.bins = s.calib.bins;
            }
            "calib.temperature" => s.calib.temperature = parse(key, v)?,
            "value.epochs" => vc.epochs = parse(key, v)?,
            "value.batch_size" => vc.batch_size = parse(key, v)?,
            "value.lr" => vc.lr = parse(key, v)?,
            "value.momentum" => vc.momentum = parse(key, v)?,
            "value.weight_decay" => vc.weight_decay = parse(key, v)?,
            "value.poly_power" => vc.poly_power = parse(key, v)?,
            "target.delta" => t.delta = parse(key, v)?,
            "target.epsilon" => t.epsilon = parse(key, v)?,
            "target.eta" => t.eta = parse(key, v)?,
            "target.rounds" => t.rounds = parse(key, v)?,
            "target.epochs_per_round" => t.epochs_per_round = parse(key, v)?,
            "target.batch_size" => t.batch_size = parse(key, v)?,
            "target.lr" => t.lr = parse(key, v)?,
            "target.momentum" => t.momentum = parse(key, v)?,
            "target.weight_decay" => t.weight_decay = parse(key, v)?,
            "target.poly_power" => t.poly_power = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let (d, s, vc, t) = (&self.data, &self.source, &self.value, &self.target);
        match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "data.height" => d.height.to_string(),
            "data.width" => d.width.to_string(),
            "data.source_train" => d.source_train.to_string(),
            "data.source_val" => d.source_val.to_string(),
            "data.target_train" => d.target_train.to_string(),
            "data.target_test" => d.target_test.to_string(),
            "data.palette_noise" => d.palette_noise.to_string(),
            "data.object_jitter" => d.object_jitter.to_string(),
            "data.illumination_jitter" => d.illumination_jitter.to_string(),
            "data.shift_hue" => d.shift.hue.to_string(),
            "data.shift_brightness" => d.shift.brightness.to_string(),
            "data.shift_noise" => d.shift.noise.to_string(),
            "source.alpha" => s.alpha.to_string(),
            "source.epochs" => s.epochs.to_string(),
            "source.batch_size" => s.batch_size.to_string(),
            "source.lr" => s.lr.to_string(),
            "source.momentum" => s.momentum.to_string(),
            "source.weight_decay" => s.weight_decay.to_string(),
            "source.poly_power" => s.poly_power.to_string(),
            "source.ece_warmup_epochs" => s.ece_warmup_epochs.to_string(),
            "calib.bins" => s.calib.bins.to_string(),
            "calib.temperature" => s.calib.temperature.to_string(),
            "value.epochs" => vc.epochs.to_string(),
            "value.batch_size" => vc.batch_size.to_string(),
            "value.lr" => vc.lr.to_string(),
            "value.momentum" => vc.momentum.to_string(),
            "value.weight_decay" => vc.weight_decay.to_string(),
            "value.poly_power" => vc.poly_power.to_string(),
            "target.delta" => t.delta.to_string(),
            "target.epsilon" => t.epsilon.to_string(),
            "target.eta" => t.eta.to_string(),
            "target.rounds" => t.rounds.to_string(),
            "target.epochs_per_round" => t.epochs_per_round.to_string(),
            "target.batch_size" => t.batch_size.to_string(),
            "target.lr" => t.lr.to_string(),
            "target.momentum" => t.momentum.to_string(),
            "target.weight_decay" => t.weight_decay.to_string(),
            "target.poly_power" => t.poly_power.to_string(),
            _ => unreachable!("every listed key has a getter"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The fully resolved config, one documented key per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(s, "# {doc}\n{key} = {}", self.get(key));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source_train < 2 || d.source_val == 0 || d.target_train < 2 || d.target_test == 0 {
            return Err(Error::Config(
                "every split needs images (training splits at least two)".into(),
            ));
        }
        self.source.validate()?;
        self.target.validate()?;
        self.source_spec().validate()?;
        self.target_spec().validate()
    }

    fn spec(&self, n_images: usize, shift: Shift, domain: u64) -> DomainSpec {
        DomainSpec {
            height: self.data.height,
            width: self.data.width,
            palette_noise: self.data.palette_noise,
            object_jitter: self.data.object_jitter,
            illumination_jitter: self.data.illumination_jitter,
            shift,
            seed: rng::stream_seed(self.seed, rng::DATAGEN, domain),
            ..DomainSpec::source(n_images, 0)
        }
    }

    pub fn source_spec(&self) -> DomainSpec {
        self.spec(self.data.source_train + self.data.source_val, Shift::NONE, 0)
    }

    pub fn target_spec(&self) -> DomainSpec {
        self.spec(self.data.target_train + self.data.target_test, self.data.shift, 1)
    }
}
