//! Run configuration as line-oriented `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, which is how command-line overrides are layered
//! on top of a file. [`RunConfig::to_text`] writes every key in a fixed
//! order, so two runs with equal text are equal runs.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{NormScope, SplitSpec};
use crate::embed::{Activation, BlockOrder, EmbedderConfig, Init};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, MatchingMetric, NullSigma};
use crate::tensor::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Tree,
    Idx,
}

/// Activation choice; `Auto` picks Leaky ReLU for Gaussian heads and ReLU
/// otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationChoice {
    Auto,
    Relu,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Groups,
    Classes,
    Files,
    /// Train on `data_root`, test on `test_root`.
    Separate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: Option<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_spread: f64,
    pub synth_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub head: HeadKind,
    pub order: BlockOrder,
    pub activation: ActivationChoice,
    pub leaky_alpha: f64,
    pub shots: usize,
    pub null_sigma: NullSigma,
    pub matching_metric: MatchingMetric,
    pub sigma_floor: f64,
    pub min_gaussian_supports: usize,
    pub temperature: f64,

    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub padding: Padding,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init: Init,

    pub dataset: DatasetSpec,
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub norm_scope: NormScope,
    pub split: SplitKind,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub split_train_file: Option<PathBuf>,
    pub split_test_file: Option<PathBuf>,
    pub test_root: Option<PathBuf>,

    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seeds: Vec<u64>,
    pub checkpoint_every_epoch: bool,

    pub eval_episodes: usize,
    /// Shot count at evaluation; `None` reuses `shots`.
    pub eval_shots: Option<usize>,
    pub bn_transductive: bool,
    pub bn_background: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::OneWayProto,
            order: BlockOrder::Reordered,
            activation: ActivationChoice::Auto,
            leaky_alpha: 0.01,
            shots: 5,
            null_sigma: NullSigma::Fixed,
            matching_metric: MatchingMetric::SqEuclid,
            sigma_floor: 1e-3,
            min_gaussian_supports: 2,
            temperature: 1.0,
            blocks: 4,
            channels: 64,
            kernel: 3,
            padding: Padding::Same,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init: Init::HeUniform,
            dataset: DatasetSpec {
                kind: DatasetKind::Synth,
                root: None,
                idx_images: None,
                idx_labels: None,
                synth_classes: 50,
                synth_per_class: 20,
                synth_spread: 0.1,
                synth_seed: 0,
            },
            image_size: (28, 28),
            in_channels: 1,
            norm_scope: NormScope::Global,
            split: SplitKind::Groups,
            train_fraction: 0.6,
            split_seed: 0,
            split_train_file: None,
            split_test_file: None,
            test_root: None,
            episodes_per_epoch: 2000,
            epochs: 10,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seeds: vec![0],
            checkpoint_every_epoch: false,
            eval_episodes: 2000,
            eval_shots: None,
            bn_transductive: false,
            bn_background: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "head",
    "order",
    "activation",
    "leaky_alpha",
    "shots",
    "null_sigma",
    "matching_metric",
    "sigma_floor",
    "min_gaussian_supports",
    "temperature",
    "blocks",
    "channels",
    "kernel",
    "padding",
    "bn_eps",
    "bn_momentum",
    "init",
    "dataset",
    "data_root",
    "idx_images",
    "idx_labels",
    "synth_classes",
    "synth_per_class",
    "synth_spread",
    "synth_seed",
    "image_size",
    "in_channels",
    "norm_scope",
    "split",
    "train_fraction",
    "split_seed",
    "split_train_file",
    "split_test_file",
    "test_root",
    "episodes_per_epoch",
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "seeds",
    "checkpoint_every_epoch",
    "eval_episodes",
    "eval_shots",
    "bn_transductive",
    "bn_background",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::config(key, format!("`{value}` is not one of {}", names.join(", ")))
        })
}

fn name_of<T: PartialEq>(value: &T, options: &[(&'static str, T)]) -> &'static str {
    options
        .iter()
        .find(|(_, v)| v == value)
        .map(|(n, _)| *n)
        .expect("every variant has a name")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

const ORDERS: &[(&str, BlockOrder)] = &[("standard", BlockOrder::Standard), ("reordered", BlockOrder::Reordered)];
const ACTIVATIONS: &[(&str, ActivationChoice)] = &[
    ("auto", ActivationChoice::Auto),
    ("relu", ActivationChoice::Relu),
    ("leaky_relu", ActivationChoice::LeakyRelu),
];
const NULL_SIGMAS: &[(&str, NullSigma)] = &[("fixed", NullSigma::Fixed), ("trainable", NullSigma::Trainable)];
const METRICS: &[(&str, MatchingMetric)] = &[("sqeuclid", MatchingMetric::SqEuclid), ("cosine", MatchingMetric::Cosine)];
const PADDINGS: &[(&str, Padding)] = &[("same", Padding::Same), ("valid", Padding::Valid)];
const INITS: &[(&str, Init)] = &[("he_uniform", Init::HeUniform), ("zero", Init::Zero)];
const DATASETS: &[(&str, DatasetKind)] = &[
    ("synth", DatasetKind::Synth),
    ("tree", DatasetKind::Tree),
    ("idx", DatasetKind::Idx),
];
const SCOPES: &[(&str, NormScope)] = &[("global", NormScope::Global), ("per-image", NormScope::PerImage)];
const SPLITS: &[(&str, SplitKind)] = &[
    ("groups", SplitKind::Groups),
    ("classes", SplitKind::Classes),
    ("files", SplitKind::Files),
    ("separate", SplitKind::Separate),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies assignments from `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "head" => self.head = parse(key, value)?,
            "order" => self.order = choice(key, value, ORDERS)?,
            "activation" => self.activation = choice(key, value, ACTIVATIONS)?,
            "leaky_alpha" => self.leaky_alpha = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "null_sigma" => self.null_sigma = choice(key, value, NULL_SIGMAS)?,
            "matching_metric" => self.matching_metric = choice(key, value, METRICS)?,
            "sigma_floor" => self.sigma_floor = parse(key, value)?,
            "min_gaussian_supports" => self.min_gaussian_supports = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "padding" => self.padding = choice(key, value, PADDINGS)?,
            "bn_eps" => self.bn_eps = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "init" => self.init = choice(key, value, INITS)?,
            "dataset" => self.dataset.kind = choice(key, value, DATASETS)?,
            "data_root" => self.dataset.root = opt_path(value),
            "idx_images" => self.dataset.idx_images = opt_path(value),
            "idx_labels" => self.dataset.idx_labels = opt_path(value),
            "synth_classes" => self.dataset.synth_classes = parse(key, value)?,
            "synth_per_class" => self.dataset.synth_per_class = parse(key, value)?,
            "synth_spread" => self.dataset.synth_spread = parse(key, value)?,
            "synth_seed" => self.dataset.synth_seed = parse(key, value)?,
            "image_size" => self.image_size = parse_size(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "norm_scope" => self.norm_scope = choice(key, value, SCOPES)?,
            "split" => self.split = choice(key, value, SPLITS)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "split_train_file" => self.split_train_file = opt_path(value),
            "split_test_file" => self.split_test_file = opt_path(value),
            "test_root" => self.test_root = opt_path(value),
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "checkpoint_every_epoch" => self.checkpoint_every_epoch = parse_bool(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "eval_shots" => {
                self.eval_shots = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "bn_transductive" => self.bn_transductive = parse_bool(key, value)?,
            "bn_background" => self.bn_background = parse(key, value)?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    valid: KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        let d = &self.dataset;
        match key {
            "head" => self.head.to_string(),
            "order" => name_of(&self.order, ORDERS).into(),
            "activation" => name_of(&self.activation, ACTIVATIONS).into(),
            "leaky_alpha" => self.leaky_alpha.to_string(),
            "shots" => self.shots.to_string(),
            "null_sigma" => name_of(&self.null_sigma, NULL_SIGMAS).into(),
            "matching_metric" => name_of(&self.matching_metric, METRICS).into(),
            "sigma_floor" => self.sigma_floor.to_string(),
            "min_gaussian_supports" => self.min_gaussian_supports.to_string(),
            "temperature" => self.temperature.to_string(),
            "blocks" => self.blocks.to_string(),
            "channels" => self.channels.to_string(),
            "kernel" => self.kernel.to_string(),
            "padding" => name_of(&self.padding, PADDINGS).into(),
            "bn_eps" => self.bn_eps.to_string(),
            "bn_momentum" => self.bn_momentum.to_string(),
            "init" => name_of(&self.init, INITS).into(),
            "dataset" => name_of(&d.kind, DATASETS).into(),
            "data_root" => show_path(&d.root),
            "idx_images" => show_path(&d.idx_images),
            "idx_labels" => show_path(&d.idx_labels),
            "synth_classes" => d.synth_classes.to_string(),
            "synth_per_class" => d.synth_per_class.to_string(),
            "synth_spread" => d.synth_spread.to_string(),
            "synth_seed" => d.synth_seed.to_string(),
            "image_size" => format!("{}x{}", self.image_size.0, self.image_size.1),
            "in_channels" => self.in_channels.to_string(),
            "norm_scope" => name_of(&self.norm_scope, SCOPES).into(),
            "split" => name_of(&self.split, SPLITS).into(),
            "train_fraction" => self.train_fraction.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "split_train_file" => show_path(&self.split_train_file),
            "split_test_file" => show_path(&self.split_test_file),
            "test_root" => show_path(&self.test_root),
            "episodes_per_epoch" => self.episodes_per_epoch.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "checkpoint_every_epoch" => self.checkpoint_every_epoch.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "eval_shots" => self.eval_shots.map_or_else(|| "none".into(), |k| k.to_string()),
            "bn_transductive" => self.bn_transductive.to_string(),
            "bn_background" => self.bn_background.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    pub fn resolved_activation(&self) -> Activation {
        match self.activation {
            ActivationChoice::Relu => Activation::Relu,
            ActivationChoice::LeakyRelu => Activation::LeakyRelu(self.leaky_alpha),
            ActivationChoice::Auto if self.head.is_gaussian() => Activation::LeakyRelu(self.leaky_alpha),
            ActivationChoice::Auto => Activation::Relu,
        }
    }

    pub fn embedder_config(&self, seed: u64) -> EmbedderConfig {
        EmbedderConfig {
            blocks: self.blocks,
            in_channels: self.in_channels,
            channels: self.channels,
            kernel: self.kernel,
            padding: self.padding,
            activation: self.resolved_activation(),
            order: self.order,
            input_hw: self.image_size,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            init: self.init,
            seed,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            kind: self.head,
            matching_metric: self.matching_metric,
            null_sigma: self.null_sigma,
            sigma_floor: self.sigma_floor,
            min_gaussian_supports: self.min_gaussian_supports,
            temperature: self.temperature,
        }
    }

    pub fn eval_shots(&self) -> usize {
        self.eval_shots.unwrap_or(self.shots)
    }

    pub fn split_spec(&self) -> Result<Option<SplitSpec>> {
        Ok(match self.split {
            SplitKind::Groups => Some(SplitSpec::Groups {
                train_fraction: self.train_fraction,
            }),
            SplitKind::Classes => Some(SplitSpec::Classes {
                train_fraction: self.train_fraction,
            }),
            SplitKind::Files => Some(SplitSpec::Files {
                train: require(&self.split_train_file, "split_train_file")?,
                test: require(&self.split_test_file, "split_test_file")?,
            }),
            SplitKind::Separate => None,
        })
    }

    /// Checks the whole configuration, including that every named input
    /// file exists, before any work starts.
    pub fn validate(&self) -> Result<()> {
        let head = crate::heads::Head::new(self.head_config())?;
        head.check_shots(self.shots)?;
        head.check_shots(self.eval_shots())?;
        self.embedder_config(0).output_dim()?;
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return Err(Error::config("leaky_alpha", "must lie in (0, 1)"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be a non-negative number"));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if self.episodes_per_epoch == 0 {
            return Err(Error::config("episodes_per_epoch", "must be positive"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config("train_fraction", "must lie in [0, 1]"));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::config("in_channels", "must be 1 or 3"));
        }
        self.validate_dataset()?;
        self.split_spec()?;
        for (key, p) in [
            ("split_train_file", &self.split_train_file),
            ("split_test_file", &self.split_test_file),
        ] {
            if self.split == SplitKind::Files {
                exists(key, p)?;
            }
        }
        Ok(())
    }

    /// Checks only that the configured dataset inputs exist and fit the split.
    pub fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synth => {
                if d.synth_classes < 2 || d.synth_per_class == 0 {
                    return Err(Error::config("synth_classes", "need at least 2 classes with examples"));
                }
                if !(d.synth_spread >= 0.0) {
                    return Err(Error::config("synth_spread", "must be non-negative"));
                }
                if self.split == SplitKind::Separate || self.split == SplitKind::Files {
                    return Err(Error::config("split", "synthetic data supports `groups` or `classes` only"));
                }
            }
            DatasetKind::Tree => {
                exists("data_root", &d.root)?;
                if self.split == SplitKind::Separate {
                    exists("test_root", &self.test_root)?;
                }
            }
            DatasetKind::Idx => {
                exists("idx_images", &d.idx_images)?;
                exists("idx_labels", &d.idx_labels)?;
                if self.split == SplitKind::Separate {
                    return Err(Error::config("split", "IDX data cannot use a separate test root"));
                }
            }
        }
        Ok(())
    }
}

fn require(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::config(key, "required but not set"))
}

fn exists(key: &str, p: &Option<PathBuf>) -> Result<()> {
    let path = require(p, key)?;
    if !path.exists() {
        return Err(Error::config(key, format!("`{}` does not exist", path.display())));
    }
    Ok(())
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once('x') {
        Some((h, w)) => Ok((parse(key, h.trim())?, parse(key, w.trim())?)),
        None => {
            let s = parse(key, value)?;
            Ok((s, s))
        }
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.head = HeadKind::TwoWayNormal;
        cfg.seeds = vec![3, 1, 4];
        cfg.image_size = (32, 28);
        cfg.eval_shots = Some(19);
        cfg.dataset.root = Some("/data/omni".into());
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn later_lines_override() {
        let cfg = RunConfig::parse("shots = 3\n# comment\n\nshots=7").unwrap();
        assert_eq!(cfg.shots, 7);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::parse("shot = 3").unwrap_err();
        assert!(matches!(err, Error::UnknownKey { .. }));
        let msg = err.to_string();
        assert!(msg.contains("`shot`") && msg.contains("shots") && msg.contains("episodes_per_epoch"));
        assert!(err.is_validation());
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = RunConfig::parse("order = sideways").unwrap_err().to_string();
        assert!(err.contains("order") && err.contains("reordered"), "{err}");
        assert!(RunConfig::parse("shots = many").is_err());
        assert!(RunConfig::parse("nonsense line").is_err());
    }

    #[test]
    fn gaussian_head_refuses_one_shot() {
        let cfg = RunConfig::parse("head = one_way_normal\nshots = 1").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InsufficientSupports { got: 1, need: 2 })));
        assert!(RunConfig::parse("head = one_way_normal\nshots = 2").unwrap().validate().is_ok());
    }

    #[test]
    fn missing_dataset_path_fails_validation() {
        let cfg = RunConfig::parse("dataset = tree\ndata_root = /definitely/not/here").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("data_root"));
    }

    #[test]
    fn auto_activation_follows_head() {
        let proto = RunConfig::default();
        assert_eq!(proto.resolved_activation(), Activation::Relu);
        let normal = RunConfig::parse("head = two_way_normal").unwrap();
        assert_eq!(normal.resolved_activation(), Activation::LeakyRelu(0.01));
    }
}
