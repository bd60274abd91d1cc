//! Run configuration: a flat `key = value` text format (one pair per line,
//! `#` starts a comment line) wiring together the encoder, windowing,
//! training, and evaluation settings plus dataset paths.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::Direction;
use crate::longcap::LongTextConfig;
use crate::training::{TrainConfig, TrainScope};

/// Which split a stage consumes. `All` skips splitting entirely, which small
/// desk runs use to train and evaluate on the same pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

impl SplitChoice {
    fn parse(field: &str, s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "test" => Ok(SplitChoice::Test),
            "all" => Ok(SplitChoice::All),
            other => Err(Error::config(field, format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionChoice {
    Single(Direction),
    Both,
}

impl DirectionChoice {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "both" {
            Ok(DirectionChoice::Both)
        } else {
            Ok(DirectionChoice::Single(Direction::parse(s)?))
        }
    }

    pub fn directions(&self) -> Vec<Direction> {
        match self {
            DirectionChoice::Single(d) => vec![*d],
            DirectionChoice::Both => vec![Direction::ImageToText, Direction::TextToImage],
        }
    }
}

/// Union of all run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub vocab_path: PathBuf,
    pub manifest_path: PathBuf,
    pub output_dir: PathBuf,
    pub dataset_name: String,

    pub context_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_width: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub image_width: usize,
    pub embed_dim: usize,
    pub pool_kernel: usize,

    /// Window stride in content tokens; None means half the content capacity.
    pub stride: Option<usize>,
    pub normalize_before_mean: bool,

    /// Starting value of the learnable log-temperature.
    pub initial_log_temperature: f64,

    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub split_seed: u64,
    pub train_split: SplitChoice,
    pub eval_split: SplitChoice,
    pub train_scope: TrainScope,

    pub sample_size: usize,
    pub seeds: Vec<u64>,
    pub k_values: Vec<usize>,
    pub direction: DirectionChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab_path: PathBuf::new(),
            manifest_path: PathBuf::new(),
            output_dir: PathBuf::new(),
            dataset_name: "synthetic".into(),
            context_len: 77,
            text_layers: 2,
            text_heads: 4,
            text_width: 128,
            image_size: 32,
            patch_size: 8,
            image_layers: 2,
            image_heads: 4,
            image_width: 128,
            embed_dim: 64,
            pool_kernel: 1,
            stride: None,
            normalize_before_mean: false,
            initial_log_temperature: crate::encoders::LOG_TEMP_INIT,
            learning_rate: 1e-6,
            epochs: 10,
            batch_size: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            split_seed: 0,
            train_split: SplitChoice::Train,
            eval_split: SplitChoice::Test,
            train_scope: TrainScope::All,
            sample_size: 2000,
            seeds: vec![0, 1, 2, 3, 4],
            k_values: vec![1, 5, 10, 20],
            direction: DirectionChoice::Single(Direction::ImageToText),
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(field, format!("cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(field: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(field, s))
        .collect()
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(field, format!("cannot parse {other:?} as a boolean"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let mut pairs: HashMap<&str, &str> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            pairs.insert(key.trim(), value.trim());
        }

        let mut cfg = RunConfig::default();
        let resolve = |p: &str| -> PathBuf {
            let path = PathBuf::from(p);
            if path.is_absolute() {
                path
            } else {
                base_dir.join(path)
            }
        };
        for (key, value) in pairs {
            match key {
                "vocab_path" => cfg.vocab_path = resolve(value),
                "manifest_path" => cfg.manifest_path = resolve(value),
                "output_dir" => cfg.output_dir = resolve(value),
                "dataset_name" => cfg.dataset_name = value.to_string(),
                "context_len" => cfg.context_len = parse_scalar(key, value)?,
                "text_layers" => cfg.text_layers = parse_scalar(key, value)?,
                "text_heads" => cfg.text_heads = parse_scalar(key, value)?,
                "text_width" => cfg.text_width = parse_scalar(key, value)?,
                "image_size" => cfg.image_size = parse_scalar(key, value)?,
                "patch_size" => cfg.patch_size = parse_scalar(key, value)?,
                "image_layers" => cfg.image_layers = parse_scalar(key, value)?,
                "image_heads" => cfg.image_heads = parse_scalar(key, value)?,
                "image_width" => cfg.image_width = parse_scalar(key, value)?,
                "embed_dim" => cfg.embed_dim = parse_scalar(key, value)?,
                "pool_kernel" => cfg.pool_kernel = parse_scalar(key, value)?,
                "stride" => cfg.stride = Some(parse_scalar(key, value)?),
                "normalize_before_mean" => cfg.normalize_before_mean = parse_bool(key, value)?,
                "initial_log_temperature" => {
                    cfg.initial_log_temperature = parse_scalar(key, value)?
                }
                "learning_rate" => cfg.learning_rate = parse_scalar(key, value)?,
                "epochs" => cfg.epochs = parse_scalar(key, value)?,
                "batch_size" => cfg.batch_size = parse_scalar(key, value)?,
                "seed" => cfg.seed = parse_scalar(key, value)?,
                "adam_beta1" => cfg.adam_beta1 = parse_scalar(key, value)?,
                "adam_beta2" => cfg.adam_beta2 = parse_scalar(key, value)?,
                "adam_eps" => cfg.adam_eps = parse_scalar(key, value)?,
                "split_seed" => cfg.split_seed = parse_scalar(key, value)?,
                "train_split" => cfg.train_split = SplitChoice::parse(key, value)?,
                "eval_split" => cfg.eval_split = SplitChoice::parse(key, value)?,
                "train_scope" => {
                    cfg.train_scope = match value {
                        "all" => TrainScope::All,
                        "text" => TrainScope::TextOnly,
                        other => {
                            return Err(Error::config(key, format!("expected all or text, got {other:?}")))
                        }
                    }
                }
                "sample_size" => cfg.sample_size = parse_scalar(key, value)?,
                "seeds" => cfg.seeds = parse_list(key, value)?,
                "k_values" => cfg.k_values = parse_list(key, value)?,
                "direction" => cfg.direction = DirectionChoice::parse(value)?,
                other => {
                    return Err(Error::config(other, "unknown configuration field"));
                }
            }
        }
        Ok(cfg)
    }

    /// Parses a config file; relative paths inside it resolve against the
    /// current working directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text, Path::new(""))
    }

    /// Checks sub-config invariants and that referenced input paths exist.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_path.as_os_str().is_empty() {
            return Err(Error::config("vocab_path", "missing"));
        }
        if self.manifest_path.as_os_str().is_empty() {
            return Err(Error::config("manifest_path", "missing"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "missing"));
        }
        if !self.vocab_path.is_file() {
            return Err(Error::config(
                "vocab_path",
                format!("{} does not exist", self.vocab_path.display()),
            ));
        }
        if !self.manifest_path.is_file() {
            return Err(Error::config(
                "manifest_path",
                format!("{} does not exist", self.manifest_path.display()),
            ));
        }
        if self.k_values.is_empty() {
            return Err(Error::config("k_values", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        self.train_config().validate()?;
        // encoder shape checks run once the vocabulary size is known
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            context_len: self.context_len,
            vocab_size,
            text_layers: self.text_layers,
            text_heads: self.text_heads,
            text_width: self.text_width,
            image_size: self.image_size,
            patch_size: self.patch_size,
            image_layers: self.image_layers,
            image_heads: self.image_heads,
            image_width: self.image_width,
            embed_dim: self.embed_dim,
            pool_kernel: self.pool_kernel,
        }
    }

    pub fn long_text_config(&self) -> LongTextConfig {
        let capacity = self.context_len.saturating_sub(2);
        LongTextConfig {
            context_len: self.context_len,
            stride: self.stride.unwrap_or((capacity / 2).max(1)),
            normalize_before_mean: self.normalize_before_mean,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            scope: self.train_scope,
        }
    }
}
