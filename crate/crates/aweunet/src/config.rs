//! Experiment configuration: flat UTF-8 `key = value` files with dotted
//! keys, e.g. `model.base_width = 8`. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationSpec, PhantomSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.0002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weight_bce: f64,
    pub loss_weight_iou: f64,
    pub augmentation: AugmentationSpec,
    pub augment_enabled: bool,
    pub phantom: PhantomSpec,
    pub seed: u64,
    pub threshold: f64,
    pub roi_pad_fraction: f64,
    pub detector_min_area: usize,
    pub detector_max_count: usize,
    pub detector_quantile: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_root: PathBuf::from("dataset"),
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            epochs: 100,
            loss_weight_bce: 1.0,
            loss_weight_iou: 1.0,
            augmentation: AugmentationSpec::default(),
            augment_enabled: true,
            phantom: PhantomSpec::default(),
            seed: 0,
            threshold: 0.5,
            roi_pad_fraction: 0.10,
            detector_min_area: 9,
            detector_max_count: 8,
            detector_quantile: 0.95,
        }
    }
}

/// Documentation of every accepted key; printed by `--help`.
pub const CONFIG_KEYS_HELP: &str = "\
Config file keys (flat `key = value`, `#` comments):
  dataset_root                 path to the dataset root (default: dataset)
  output_dir                   output directory (default: out)
  seed                         global RNG seed (default: 0)
  threshold                    mask probability threshold in (0,1) (default: 0.5)
  batch_size                   training batch size (default: 4)
  epochs                       training epochs (default: 100)
  roi_pad_fraction             ROI padding per side before resize (default: 0.10)
  loss.bce_weight              BCE loss weight (default: 1.0)
  loss.iou_weight              soft-IoU loss weight (default: 1.0)
  optimizer.lr                 learning rate (default: 0.0002)
  optimizer.beta1              first-moment decay (default: 0.9)
  optimizer.beta2              second-moment decay (default: 0.999)
  optimizer.eps                epsilon (default: 1e-8)
  model.in_channels            input channels (default: 1)
  model.num_classes            output classes (default: 2)
  model.base_width             stage-1 channel width (default: 64)
  model.web_ratio              WEB bottleneck reduction ratio (default: 4)
  model.input_size             network input side in px, divisible by 16 (default: 224)
  augmentation.enabled         true/false (default: true)
  augmentation.rotation_degrees   rotation range +/- deg (default: 15)
  augmentation.hflip_prob      horizontal flip probability (default: 0.5)
  augmentation.vflip_prob      vertical flip probability (default: 0.5)
  augmentation.elastic_alpha   elastic displacement magnitude px (default: 34)
  augmentation.elastic_sigma   elastic smoothing px (default: 4)
  detector.min_area            baseline detector min component area px (default: 9)
  detector.max_count           baseline detector max proposals (default: 8)
  detector.quantile            baseline detector intensity quantile (default: 0.95)
  phantom.image_size           phantom side in px (default: 128)
  phantom.count                number of phantoms (default: 20)
  phantom.nodule_count_min     min nodules per phantom (default: 1)
  phantom.nodule_count_max     max nodules per phantom (default: 2)
  phantom.radius_min           min nodule radius px (default: 6)
  phantom.radius_max           max nodule radius px (default: 12)
  phantom.contrast_min         min nodule contrast (default: 60)
  phantom.contrast_max         max nodule contrast (default: 110)
  phantom.texture_scale        background smoothing sigma px (default: 4)
";

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config line {}: expected `key = value`, got '{line}'",
                ln + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let kv = parse_kv(text)?;
        for (k, v) in kv {
            cfg.apply(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("optimizer.lr must be > 0".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "roi_pad_fraction" => self.roi_pad_fraction = num(key, value)?,
            "loss.bce_weight" => self.loss_weight_bce = num(key, value)?,
            "loss.iou_weight" => self.loss_weight_iou = num(key, value)?,
            "optimizer.lr" => self.optimizer.lr = num(key, value)?,
            "optimizer.beta1" => self.optimizer.beta1 = num(key, value)?,
            "optimizer.beta2" => self.optimizer.beta2 = num(key, value)?,
            "optimizer.eps" => self.optimizer.eps = num(key, value)?,
            "model.in_channels" => self.model.in_channels = num(key, value)?,
            "model.num_classes" => self.model.num_classes = num(key, value)?,
            "model.base_width" => self.model.base_width = num(key, value)?,
            "model.web_ratio" => self.model.web_ratio = num(key, value)?,
            "model.input_size" => self.model.input_size = num(key, value)?,
            "augmentation.enabled" => self.augment_enabled = num(key, value)?,
            "augmentation.rotation_degrees" => self.augmentation.rotation_degrees = num(key, value)?,
            "augmentation.hflip_prob" => self.augmentation.hflip_prob = num(key, value)?,
            "augmentation.vflip_prob" => self.augmentation.vflip_prob = num(key, value)?,
            "augmentation.elastic_alpha" => self.augmentation.elastic_alpha = num(key, value)?,
            "augmentation.elastic_sigma" => self.augmentation.elastic_sigma = num(key, value)?,
            "detector.min_area" => self.detector_min_area = num(key, value)?,
            "detector.max_count" => self.detector_max_count = num(key, value)?,
            "detector.quantile" => self.detector_quantile = num(key, value)?,
            "phantom.image_size" => self.phantom.image_size = num(key, value)?,
            "phantom.count" => self.phantom.count = num(key, value)?,
            "phantom.nodule_count_min" => self.phantom.nodule_count_range.0 = num(key, value)?,
            "phantom.nodule_count_max" => self.phantom.nodule_count_range.1 = num(key, value)?,
            "phantom.radius_min" => self.phantom.nodule_radius_range.0 = num(key, value)?,
            "phantom.radius_max" => self.phantom.nodule_radius_range.1 = num(key, value)?,
            "phantom.contrast_min" => self.phantom.nodule_contrast_range.0 = num(key, value)?,
            "phantom.contrast_max" => self.phantom.nodule_contrast_range.1 = num(key, value)?,
            "phantom.texture_scale" => self.phantom.background_texture_scale = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}
